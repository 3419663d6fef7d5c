//! Experiment orchestration: method and ablation grids over paired seeds,
//! and the report files they produce.

mod report;
mod run;

pub use report::{
    load_runs, read_report_csv, spectrum_csv, spectrum_rows, write_report, write_runs, SpectrumRow,
    REPORT_HEADER,
};
pub use run::{
    run_cell, run_matrix, train_method, Cell, Experiment, ReportRow, RunRecord, SeedSpectrum,
};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::Method;
use crate::config::{join_list, KvConfig};
use crate::error::{Error, Result};
use crate::models::{TaskSpec, TrainConfig};
use crate::spectral::{top_k, ChangeRates, SvdFactors};

/// What a grid row trains: a dense copy of `W`, or one adapter method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMethod {
    FullFt,
    Lora,
    Dash,
    Init,
    Tsd,
}

impl RunMethod {
    pub fn name(self) -> &'static str {
        match self {
            RunMethod::FullFt => "full_ft",
            RunMethod::Lora => "lora",
            RunMethod::Dash => "dash",
            RunMethod::Init => "init",
            RunMethod::Tsd => "tsd",
        }
    }

    pub fn adapter(self) -> Option<Method> {
        match self {
            RunMethod::FullFt => None,
            RunMethod::Lora => Some(Method::Lora),
            RunMethod::Dash => Some(Method::Dash),
            RunMethod::Init => Some(Method::Init),
            RunMethod::Tsd => Some(Method::Tsd),
        }
    }
}

impl FromStr for RunMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_ft" => Ok(RunMethod::FullFt),
            other => other.parse::<Method>().map(|m| match m {
                Method::Lora => RunMethod::Lora,
                Method::Dash => RunMethod::Dash,
                Method::Init => RunMethod::Init,
                Method::Tsd => RunMethod::Tsd,
            }),
        }
    }
}

impl fmt::Display for RunMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the dash directions are picked at launch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    /// Largest measured change rates.
    Tsd,
    /// Largest singular values.
    Top,
    /// Smallest singular values.
    Bottom,
    Random,
    /// Every core direction; `s` is ignored.
    All,
    /// `⌈s/2⌉` from the top and `⌊s/2⌋` from the bottom.
    TopPlusBottom,
}

impl DirectionMode {
    pub fn name(self) -> &'static str {
        match self {
            DirectionMode::Tsd => "tsd",
            DirectionMode::Top => "top",
            DirectionMode::Bottom => "bottom",
            DirectionMode::Random => "random",
            DirectionMode::All => "all",
            DirectionMode::TopPlusBottom => "top_plus_bottom",
        }
    }
}

impl FromStr for DirectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tsd" => DirectionMode::Tsd,
            "top" => DirectionMode::Top,
            "bottom" => DirectionMode::Bottom,
            "random" => DirectionMode::Random,
            "all" => DirectionMode::All,
            "top_plus_bottom" => DirectionMode::TopPlusBottom,
            other => return Err(Error::arg(format!("unknown direction mode {other:?}"))),
        })
    }
}

impl fmt::Display for DirectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which directions seed the `A0`, `B0` split of LoRA-Init.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Tsd,
    Top,
    Bottom,
    Random,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        self.as_direction_mode().name()
    }

    fn as_direction_mode(self) -> DirectionMode {
        match self {
            InitMode::Tsd => DirectionMode::Tsd,
            InitMode::Top => DirectionMode::Top,
            InitMode::Bottom => DirectionMode::Bottom,
            InitMode::Random => DirectionMode::Random,
        }
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<DirectionMode>()? {
            DirectionMode::Tsd => Ok(InitMode::Tsd),
            DirectionMode::Top => Ok(InitMode::Top),
            DirectionMode::Bottom => Ok(InitMode::Bottom),
            DirectionMode::Random => Ok(InitMode::Random),
            other => Err(Error::arg(format!("{other} is not an init mode"))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Salt mixed into the run seed for random direction draws, so they do not
/// share a stream with task generation.
const SELECT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Direction indices for the dash term.
pub fn select_directions(
    mode: DirectionMode,
    cr: &ChangeRates,
    s: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let k = cr.len();
    if mode == DirectionMode::All {
        return Ok((0..k).collect());
    }
    if s == 0 || s > k {
        return Err(Error::arg(format!("s = {s} outside 1..={k}")));
    }
    Ok(match mode {
        DirectionMode::Tsd => top_k(cr, s)?,
        DirectionMode::Top => (0..s).collect(),
        DirectionMode::Bottom => (k - s..k).collect(),
        DirectionMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SELECT_SALT);
            let mut idx = sample(&mut rng, k, s).into_vec();
            idx.sort_unstable();
            idx
        }
        DirectionMode::TopPlusBottom => {
            let top = s.div_ceil(2);
            (0..top).chain(k - (s - top)..k).collect()
        }
        DirectionMode::All => unreachable!(),
    })
}

/// Direction indices for an init split of rank `r`.
pub fn select_init(
    mode: InitMode,
    cr: &ChangeRates,
    f: &SvdFactors,
    r: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if cr.len() != f.rank() {
        return Err(Error::ShapeMismatch {
            expected: (f.rank(), 1),
            got: (cr.len(), 1),
        });
    }
    select_directions(mode.as_direction_mode(), cr, r, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub methods: Vec<RunMethod>,
    pub direction_modes: Vec<DirectionMode>,
    pub init_modes: Vec<InitMode>,
    pub t_sweep: Vec<usize>,
    pub s_sweep: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Learning rate and budget of the full fine-tuning runs; default to the
    /// adapter values.
    pub full_ft_lr: f64,
    pub full_ft_steps: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskSpec::default();
        let train = TrainConfig::default();
        ExperimentConfig {
            methods: vec![RunMethod::Lora, RunMethod::Dash, RunMethod::Tsd],
            direction_modes: vec![DirectionMode::Tsd],
            init_modes: vec![InitMode::Tsd],
            t_sweep: vec![train.t_prelaunch],
            s_sweep: vec![train.s_dash],
            seeds: vec![task.seed],
            full_ft_lr: train.lr,
            full_ft_steps: train.steps,
            out_dir: PathBuf::from("out"),
            task,
            train,
        }
    }
}

impl ExperimentConfig {
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let task = TaskSpec::from_config(cfg)?;
        let train = TrainConfig::from_config(cfg)?;
        let d = ExperimentConfig::default();
        let methods = parse_names(cfg, "methods")?.unwrap_or(d.methods);
        let direction_modes = parse_names(cfg, "direction_modes")?.unwrap_or(d.direction_modes);
        let init_modes = parse_names(cfg, "init_modes")?.unwrap_or(d.init_modes);
        let out = ExperimentConfig {
            methods,
            direction_modes,
            init_modes,
            t_sweep: cfg.get_list("t_sweep")?.unwrap_or(vec![train.t_prelaunch]),
            s_sweep: cfg.get_list("s_sweep")?.unwrap_or(vec![train.s_dash]),
            seeds: cfg.get_list("seeds")?.unwrap_or(vec![task.seed]),
            full_ft_lr: cfg.get_or("full_ft_lr", train.lr)?,
            full_ft_steps: cfg.get_or("full_ft_steps", train.steps)?,
            out_dir: d.out_dir,
            task,
            train,
        };
        out.validate()
            .map_err(|e| cfg.error_at("methods", e.to_string()))?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::arg("methods and seeds must be non-empty"));
        }
        let uses = |m: RunMethod| self.methods.contains(&m);
        let launched = uses(RunMethod::Dash) || uses(RunMethod::Init) || uses(RunMethod::Tsd);
        if launched && self.t_sweep.is_empty() {
            return Err(Error::arg("t_sweep must be non-empty"));
        }
        if let Some(&t) = self.t_sweep.iter().find(|&&t| t > self.train.steps) {
            return Err(Error::arg(format!(
                "t = {t} exceeds steps {}",
                self.train.steps
            )));
        }
        let k = self.task.k();
        if self.train.rank > k {
            return Err(Error::arg(format!("rank {} exceeds {k}", self.train.rank)));
        }
        if uses(RunMethod::Dash) || uses(RunMethod::Tsd) {
            if self.direction_modes.is_empty() || self.s_sweep.is_empty() {
                return Err(Error::arg("direction_modes and s_sweep must be non-empty"));
            }
            if let Some(&s) = self.s_sweep.iter().find(|&&s| s == 0 || s > k) {
                return Err(Error::arg(format!("s = {s} outside 1..={k}")));
            }
        }
        if uses(RunMethod::Init) && self.init_modes.is_empty() {
            return Err(Error::arg("init_modes must be non-empty"));
        }
        if !(self.full_ft_lr >= 0.0 && self.full_ft_lr.is_finite()) || self.full_ft_steps == 0 {
            return Err(Error::arg(
                "full_ft_lr must be non-negative and full_ft_steps positive",
            ));
        }
        Ok(())
    }

    /// Every grid cell, in report order. Each is run once per seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &method in &self.methods {
            match method {
                RunMethod::FullFt | RunMethod::Lora => out.push(Cell::plain(method)),
                RunMethod::Dash | RunMethod::Tsd => {
                    for &mode in &self.direction_modes {
                        for &t in &self.t_sweep {
                            for &s in &self.s_sweep {
                                out.push(Cell {
                                    method,
                                    mode: Some(mode.name().to_string()),
                                    t: Some(t),
                                    s: Some(s),
                                });
                            }
                        }
                    }
                }
                RunMethod::Init => {
                    for &mode in &self.init_modes {
                        for &t in &self.t_sweep {
                            out.push(Cell {
                                method,
                                mode: Some(mode.name().to_string()),
                                t: Some(t),
                                s: None,
                            });
                        }
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }

    pub fn config_pairs(&self) -> Vec<(&'static str, String)> {
        let names = |v: &[String]| v.join(",");
        let mut out = self.task.config_pairs();
        out.retain(|(k, _)| *k != "seed");
        out.extend(self.train.config_pairs());
        out.push((
            "methods",
            names(
                &self
                    .methods
                    .iter()
                    .map(|m| m.name().to_string())
                    .collect::<Vec<_>>(),
            ),
        ));
        out.push((
            "direction_modes",
            names(
                &self
                    .direction_modes
                    .iter()
                    .map(|m| m.name().to_string())
                    .collect::<Vec<_>>(),
            ),
        ));
        out.push((
            "init_modes",
            names(
                &self
                    .init_modes
                    .iter()
                    .map(|m| m.name().to_string())
                    .collect::<Vec<_>>(),
            ),
        ));
        out.push(("t_sweep", join_list(&self.t_sweep)));
        out.push(("s_sweep", join_list(&self.s_sweep)));
        out.push(("seeds", join_list(&self.seeds)));
        out.push(("full_ft_lr", self.full_ft_lr.to_string()));
        out.push(("full_ft_steps", self.full_ft_steps.to_string()));
        out
    }
}

/// Comma-separated names parsed with `FromStr`; errors point at the key's line.
fn parse_names<T: FromStr<Err = Error>>(cfg: &KvConfig, key: &str) -> Result<Option<Vec<T>>> {
    let Some(items) = cfg.get_list::<String>(key)? else {
        return Ok(None);
    };
    items
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|e: Error| cfg.error_at(key, e.to_string()))
        })
        .collect::<Result<Vec<T>>>()
        .map(Some)
}
