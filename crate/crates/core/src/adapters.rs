//! Weight-update algebra for plain LoRA and the TSD-aware variants.
//!
//! Every adapter has the form
//!
//! ```text
//! merged = base + (alpha / r) · A B + Σ_i Δσ_i ū_i v̄_iᵀ
//! ```
//!
//! where `base` is `W` for LoRA / LoRA-Dash and the frozen residual `W_res`
//! for LoRA-Init / LoRA-TSD once their split has been applied. The dash term
//! is only present for LoRA-Dash and LoRA-TSD after the pre-launch phase.

use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{io, top_k, ChangeRates, Matrix, SvdFactors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lora,
    Dash,
    Init,
    Tsd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Dash => "dash",
            Method::Init => "init",
            Method::Tsd => "tsd",
        }
    }

    /// Whether this method switches regimes after a pre-launch phase.
    pub fn has_prelaunch(self) -> bool {
        !matches!(self, Method::Lora)
    }

    /// Whether the dash phase carries a `Δσ` term.
    pub fn uses_dash_term(self) -> bool {
        matches!(self, Method::Dash | Method::Tsd)
    }

    /// Whether the dash phase re-initializes `A`,`B` from an SVD split.
    pub fn uses_split(self) -> bool {
        matches!(self, Method::Init | Method::Tsd)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Method::Lora),
            "dash" => Ok(Method::Dash),
            "init" => Ok(Method::Init),
            "tsd" => Ok(Method::Tsd),
            other => Err(Error::arg(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prelaunch,
    Dash,
}

/// Trainable low-rank pair; the update is `(alpha / r) · a · b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraCore {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
}

impl LoraCore {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let (n, r) = a.shape();
        let (rb, m) = b.shape();
        if rb != r {
            return Err(Error::ShapeMismatch {
                expected: (r, m),
                got: b.shape(),
            });
        }
        if r > n.min(m) {
            return Err(Error::arg(format!("rank {r} exceeds min({n}, {m})")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::arg(format!("alpha must be positive, got {alpha}")));
        }
        Ok(LoraCore { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `(alpha / r) · a · b`.
    pub fn delta(&self) -> Matrix {
        self.a.matmul(&self.b).scale(self.scale())
    }
}

/// Kaiming-uniform `a` (fan-in `n`, bound `√(6/n)`) and zero `b`.
pub fn lora_random_init(n: usize, m: usize, r: usize, alpha: f64, seed: u64) -> Result<LoraCore> {
    if r == 0 || r > n.min(m) {
        return Err(Error::arg(format!("rank {r} outside 1..={}", n.min(m))));
    }
    let bound = (6.0 / n as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Matrix::zeros(n, r);
    for v in a.as_mut_slice() {
        *v = dist.sample(&mut rng);
    }
    LoraCore::new(a, Matrix::zeros(r, m), alpha)
}

/// Learned coordinate changes along frozen launched directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DashTerm {
    pub indices: Vec<usize>,
    pub dsigma: Vec<f64>,
    /// `n×s`, column `i` is `ū_i`.
    pub u_bar: Matrix,
    /// `m×s`, column `i` is `v̄_i`.
    pub v_bar: Matrix,
}

impl DashTerm {
    /// Zero-initialized coordinates along the listed core directions of `f`.
    pub fn new(f: &SvdFactors, indices: &[usize]) -> Result<Self> {
        check_indices(indices, f.rank())?;
        let u_bar = f.u.select_columns(indices);
        let v_bar = f.vt.select_rows(indices).transpose();
        Ok(DashTerm {
            indices: indices.to_vec(),
            dsigma: vec![0.0; indices.len()],
            u_bar,
            v_bar,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `Σ_i Δσ_i ū_i v̄_iᵀ`.
    pub fn delta(&self) -> Matrix {
        let mut scaled = self.u_bar.clone();
        for i in 0..scaled.rows() {
            for (j, d) in self.dsigma.iter().enumerate() {
                scaled[(i, j)] *= d;
            }
        }
        scaled.matmul_t(&self.v_bar)
    }
}

/// `W = Ū Σ̄ V̄ᵀ + W_res` with the selected components moved into `a0 b0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSplit {
    pub w_res: Matrix,
    pub a0: Matrix,
    pub b0: Matrix,
    pub indices: Vec<usize>,
}

pub fn tsd_init_split(w: &Matrix, f: &SvdFactors, indices: &[usize]) -> Result<InitSplit> {
    w.check_shape(f.source_shape())?;
    if indices.is_empty() {
        return Err(Error::arg("init split needs at least one direction"));
    }
    check_indices(indices, f.rank())?;
    let (n, m) = w.shape();
    let r = indices.len();
    let mut a0 = Matrix::zeros(n, r);
    let mut b0 = Matrix::zeros(r, m);
    for (c, &idx) in indices.iter().enumerate() {
        let root = f.sigma[idx].sqrt();
        for i in 0..n {
            a0[(i, c)] = f.u[(i, idx)] * root;
        }
        for j in 0..m {
            b0[(c, j)] = root * f.vt[(idx, j)];
        }
    }
    let mut w_res = w.clone();
    for &idx in indices {
        w_res.add_outer(&f.left(idx), f.vt.row(idx), -f.sigma[idx]);
    }
    Ok(InitSplit {
        w_res,
        a0,
        b0,
        indices: indices.to_vec(),
    })
}

fn check_indices(indices: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    for &i in indices {
        if i >= k {
            return Err(Error::arg(format!(
                "direction index {i} out of range 0..{k}"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::arg(format!("duplicate direction index {i}")));
        }
    }
    Ok(())
}

/// Per-layer adapter state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub method: Method,
    /// Frozen weight the adapter is added to: `W`, or `W_res` after a split.
    pub base: Matrix,
    pub core: LoraCore,
    pub dash: Option<DashTerm>,
    pub phase: Phase,
    /// Components moved into the adapter by an init split, if one happened.
    pub split_indices: Vec<usize>,
}

impl AdapterState {
    /// Fresh state for `method` on pretrained weight `w`. Methods with a
    /// pre-launch phase start in it and behave as plain LoRA until
    /// [`enter_dash_phase`] is called.
    pub fn new(method: Method, w: Matrix, core: LoraCore) -> Result<Self> {
        core.delta().check_shape(w.shape())?;
        let phase = if method.has_prelaunch() {
            Phase::Prelaunch
        } else {
            Phase::Dash
        };
        Ok(AdapterState {
            method,
            base: w,
            core,
            dash: None,
            phase,
            split_indices: Vec::new(),
        })
    }

    /// LoRA-Init state built directly from a split, skipping the pre-launch
    /// phase (used when the directions come from an external choice).
    pub fn from_split(split: InitSplit, alpha: f64) -> Result<Self> {
        let indices = split.indices.clone();
        let core = split_core(split.a0, split.b0, alpha)?;
        Ok(AdapterState {
            method: Method::Init,
            base: split.w_res,
            core,
            dash: None,
            phase: Phase::Dash,
            split_indices: indices,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.base.shape()
    }

    pub fn rank(&self) -> usize {
        self.core.rank()
    }

    /// `(alpha/r)·a·b` plus the unscaled dash term when present.
    pub fn effective_delta(&self) -> Matrix {
        let mut delta = self.core.delta();
        if let Some(dash) = &self.dash {
            delta.add_scaled(&dash.delta(), 1.0);
        }
        delta
    }

    /// The low-rank part of the update alone.
    pub fn ab_delta(&self) -> Matrix {
        self.core.delta()
    }

    /// The dash part of the update alone (zero when absent).
    pub fn dash_delta(&self) -> Matrix {
        match &self.dash {
            Some(d) => d.delta(),
            None => Matrix::zeros(self.base.rows(), self.base.cols()),
        }
    }

    pub fn merged_weight(&self) -> Matrix {
        self.base.add(&self.effective_delta())
    }

    pub fn validate(&self) -> Result<()> {
        let has_dash = self.dash.is_some();
        let ok = match self.method {
            Method::Lora => !has_dash,
            Method::Init => !has_dash,
            Method::Dash | Method::Tsd => has_dash == (self.phase == Phase::Dash),
        };
        if !ok {
            return Err(Error::InvalidState(format!(
                "{} adapter in {:?} phase with dash term present = {has_dash}",
                self.method, self.phase
            )));
        }
        Ok(())
    }

    /// Writes `meta.json` plus one TSDW file per matrix.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = StateMeta {
            method: self.method,
            phase: self.phase,
            r: self.rank(),
            s: self.dash.as_ref().map_or(0, DashTerm::len),
            alpha: self.core.alpha,
            indices: self
                .dash
                .as_ref()
                .map(|d| d.indices.clone())
                .unwrap_or_default(),
            split_indices: self.split_indices.clone(),
        };
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(meta_path, e))?;
        io::write_matrix(&dir.join("base.tsdw"), &self.base)?;
        io::write_matrix(&dir.join("a.tsdw"), &self.core.a)?;
        io::write_matrix(&dir.join("b.tsdw"), &self.core.b)?;
        if let Some(d) = &self.dash {
            let ds = Matrix::new(1, d.len(), d.dsigma.clone())?;
            io::write_matrix(&dir.join("dsigma.tsdw"), &ds)?;
            io::write_matrix(&dir.join("u_bar.tsdw"), &d.u_bar)?;
            io::write_matrix(&dir.join("v_bar.tsdw"), &d.v_bar)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: StateMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "adapter metadata",
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        let base = io::read_matrix(&dir.join("base.tsdw"))?;
        let a = io::read_matrix(&dir.join("a.tsdw"))?;
        let b = io::read_matrix(&dir.join("b.tsdw"))?;
        let core = LoraCore::new(a, b, meta.alpha)?;
        let dash = if meta.s > 0 {
            let dsigma = io::read_matrix(&dir.join("dsigma.tsdw"))?.into_vec();
            Some(DashTerm {
                indices: meta.indices,
                dsigma,
                u_bar: io::read_matrix(&dir.join("u_bar.tsdw"))?,
                v_bar: io::read_matrix(&dir.join("v_bar.tsdw"))?,
            })
        } else {
            None
        };
        let state = AdapterState {
            method: meta.method,
            base,
            core,
            dash,
            phase: meta.phase,
            split_indices: meta.split_indices,
        };
        state.validate()?;
        Ok(state)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    method: Method,
    phase: Phase,
    r: usize,
    s: usize,
    alpha: f64,
    indices: Vec<usize>,
    #[serde(default)]
    split_indices: Vec<usize>,
}

/// Wraps split factors as a `LoraCore`. When `alpha != r` the factors are
/// rescaled by `√(r/alpha)` so that `(alpha/r)·a·b` still equals `a0·b0`.
fn split_core(a0: Matrix, b0: Matrix, alpha: f64) -> Result<LoraCore> {
    let r = a0.cols() as f64;
    let comp = (r / alpha).sqrt();
    if comp == 1.0 {
        LoraCore::new(a0, b0, alpha)
    } else {
        LoraCore::new(a0.scale(comp), b0.scale(comp), alpha)
    }
}

/// Leaves the pre-launch phase using the top `s_count` change-rate
/// directions for the dash term and the top `r` for an init split.
pub fn enter_dash_phase(
    s: &AdapterState,
    f: &SvdFactors,
    cr: &ChangeRates,
    s_count: usize,
) -> Result<AdapterState> {
    let dash_idx = if s.method.uses_dash_term() {
        top_k(cr, s_count)?
    } else {
        Vec::new()
    };
    let init_idx = if s.method.uses_split() {
        top_k(cr, s.rank())?
    } else {
        Vec::new()
    };
    enter_dash_phase_with(s, f, &dash_idx, &init_idx)
}

/// Like [`enter_dash_phase`] with explicitly chosen directions, for the
/// selection-mode ablations. `dash_indices` is ignored by LoRA-Init and
/// `init_indices` by LoRA-Dash; LoRA-TSD needs `init_indices.len() == r`.
pub fn enter_dash_phase_with(
    s: &AdapterState,
    f: &SvdFactors,
    dash_indices: &[usize],
    init_indices: &[usize],
) -> Result<AdapterState> {
    if !s.method.has_prelaunch() || s.phase != Phase::Prelaunch {
        return Err(Error::InvalidState(format!(
            "cannot enter dash phase from {} adapter in {:?} phase",
            s.method, s.phase
        )));
    }
    s.base.check_shape(f.source_shape())?;
    let mut next = s.clone();
    next.phase = Phase::Dash;
    if s.method.uses_split() {
        if init_indices.len() != s.rank() {
            return Err(Error::arg(format!(
                "init split needs {} directions, got {}",
                s.rank(),
                init_indices.len()
            )));
        }
        let split = tsd_init_split(&s.base, f, init_indices)?;
        next.core = split_core(split.a0, split.b0, s.core.alpha)?;
        next.base = split.w_res;
        next.split_indices = split.indices;
    }
    if s.method.uses_dash_term() {
        if dash_indices.is_empty() {
            return Err(Error::arg("dash phase needs at least one direction"));
        }
        next.dash = Some(DashTerm::new(f, dash_indices)?);
    }
    Ok(next)
}
