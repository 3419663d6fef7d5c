use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{join_list, KvConfig};
use crate::error::{Error, Result};
use crate::spectral::{svd, Matrix, SvdFactors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `y = x W*ᵀ`.
    PlantedLinear,
    /// `y = relu(x W1ᵀ) W*ᵀ` with a frozen random first layer; only the
    /// second layer is adapted.
    PlantedMlp,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PlantedLinear => "planted_linear",
            TaskKind::PlantedMlp => "planted_mlp",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planted_linear" => Ok(TaskKind::PlantedLinear),
            "planted_mlp" => Ok(TaskKind::PlantedMlp),
            other => Err(Error::arg(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Where the optimal update lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Planting {
    /// `W* = W + Σ c_i u_i v_iᵀ` over the listed core directions.
    Explicit {
        indices: Vec<usize>,
        coeffs: Vec<f64>,
    },
    /// `count` directions drawn (per seed) from `lowest..k`, each with a
    /// target change rate drawn uniformly from `[rate_min, rate_max]` and a
    /// random sign, so `c_i = ±rate_i · σ_i`.
    Random {
        count: usize,
        lowest: usize,
        rate_min: f64,
        rate_max: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n: usize,
    pub m: usize,
    pub planting: Planting,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::PlantedLinear,
            n: 32,
            m: 32,
            planting: Planting::Random {
                count: 4,
                lowest: 24,
                rate_min: 2.0,
                rate_max: 6.0,
            },
            noise_std: 0.01,
            n_train: 512,
            n_val: 256,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn k(&self) -> usize {
        self.n.min(self.m)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TaskSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::arg("layer dimensions must be positive"));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::arg("sample counts must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::arg("noise_std must be non-negative"));
        }
        let k = self.k();
        match &self.planting {
            Planting::Explicit { indices, coeffs } => {
                if indices.len() != coeffs.len() {
                    return Err(Error::arg(format!(
                        "{} planted indices but {} coefficients",
                        indices.len(),
                        coeffs.len()
                    )));
                }
                let mut seen = vec![false; k];
                for &i in indices {
                    if i >= k {
                        return Err(Error::arg(format!(
                            "planted index {i} must be below min(n, m) = {k}"
                        )));
                    }
                    if std::mem::replace(&mut seen[i], true) {
                        return Err(Error::arg(format!("planted index {i} repeated")));
                    }
                }
            }
            Planting::Random {
                count,
                lowest,
                rate_min,
                rate_max,
            } => {
                if lowest + count > k {
                    return Err(Error::arg(format!(
                        "cannot plant {count} directions in {lowest}..{k}"
                    )));
                }
                if !(0.0 <= *rate_min && rate_min <= rate_max && rate_max.is_finite()) {
                    return Err(Error::arg("plant rates need 0 <= rate_min <= rate_max"));
                }
            }
        }
        Ok(())
    }

    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = TaskSpec::default();
        let n = cfg.get_or("n", d.n)?;
        let m = cfg.get_or("m", d.m)?;
        let explicit = cfg.get_list::<usize>("planted_indices")?;
        let planting = match explicit {
            Some(indices) if !indices.is_empty() => {
                let coeffs = cfg
                    .get_list::<f64>("planted_coeffs")?
                    .unwrap_or_else(|| vec![1.0; indices.len()]);
                Planting::Explicit { indices, coeffs }
            }
            _ => {
                let Planting::Random {
                    count,
                    lowest,
                    rate_min,
                    rate_max,
                } = d.planting
                else {
                    unreachable!()
                };
                Planting::Random {
                    count: cfg.get_or("plant_count", count)?,
                    lowest: cfg.get_or("plant_lowest", lowest)?,
                    rate_min: cfg.get_or("plant_rate_min", rate_min)?,
                    rate_max: cfg.get_or("plant_rate_max", rate_max)?,
                }
            }
        };
        let spec = TaskSpec {
            kind: cfg.get_or("kind", d.kind)?,
            n,
            m,
            planting,
            noise_std: cfg.get_or("noise_std", d.noise_std)?,
            n_train: cfg.get_or("n_train", d.n_train)?,
            n_val: cfg.get_or("n_val", d.n_val)?,
            seed: cfg.get_or("seed", d.seed)?,
        };
        spec.validate()
            .map_err(|e| cfg.error_at("n", e.to_string()))?;
        Ok(spec)
    }

    pub fn config_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("kind", self.kind.name().to_string()),
            ("n", self.n.to_string()),
            ("m", self.m.to_string()),
            ("noise_std", self.noise_std.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("seed", self.seed.to_string()),
        ];
        match &self.planting {
            Planting::Explicit { indices, coeffs } => {
                out.push(("planted_indices", join_list(indices)));
                out.push(("planted_coeffs", join_list(coeffs)));
            }
            Planting::Random {
                count,
                lowest,
                rate_min,
                rate_max,
            } => {
                out.push(("plant_count", count.to_string()));
                out.push(("plant_lowest", lowest.to_string()));
                out.push(("plant_rate_min", rate_min.to_string()));
                out.push(("plant_rate_max", rate_max.to_string()));
            }
        }
        out
    }
}

/// Samples in rows: `x` is `samples × inputs`, `y` is `samples × outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
        }
    }
}

/// Frozen input transform in front of the adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Identity,
    /// `relu(x W1ᵀ)`.
    Relu {
        w1: Matrix,
    },
}

impl FeatureMap {
    pub fn apply(&self, x: &Matrix) -> Matrix {
        match self {
            FeatureMap::Identity => x.clone(),
            FeatureMap::Relu { w1 } => x.matmul_t(w1).map(|v| v.max(0.0)),
        }
    }
}

/// A generated task: pretrained weight, planted optimum and data.
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: TaskSpec,
    pub base_w: Matrix,
    pub w_star: Matrix,
    pub factors: SvdFactors,
    pub planted_indices: Vec<usize>,
    pub planted_coeffs: Vec<f64>,
    pub features: FeatureMap,
    pub train: Dataset,
    pub val: Dataset,
}

impl Task {
    /// FNV-1a over the raw bytes of both datasets.
    pub fn dataset_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in [&self.train.x, &self.train.y, &self.val.x, &self.val.y] {
            for v in m.as_slice() {
                for b in v.to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Analytic `ΔW* = W* − W`.
    pub fn delta_star(&self) -> Matrix {
        self.w_star.sub(&self.base_w)
    }

    /// Train and validation sets pushed through the frozen feature map, so
    /// the adapted layer sees `features × n` regression problems.
    pub fn featurized(&self) -> (Dataset, Dataset) {
        let lift = |d: &Dataset| Dataset {
            x: self.features.apply(&d.x),
            y: d.y.clone(),
        };
        (lift(&self.train), lift(&self.val))
    }
}

/// Builds `W` (Gaussian, std `1/√m`), plants `W*` along its core directions
/// and samples train/validation data from `W*`. Deterministic per seed.
pub fn gen_task(spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let (n, m) = (spec.n, spec.m);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base_w = Matrix::random_normal(n, m, 1.0 / (m as f64).sqrt(), &mut rng);
    let factors = svd(&base_w)?;

    let (planted_indices, planted_coeffs) = match &spec.planting {
        Planting::Explicit { indices, coeffs } => (indices.clone(), coeffs.clone()),
        Planting::Random {
            count,
            lowest,
            rate_min,
            rate_max,
        } => {
            let pool = spec.k() - lowest;
            let mut idx: Vec<usize> = sample(&mut rng, pool, *count)
                .into_iter()
                .map(|i| i + lowest)
                .collect();
            idx.sort_unstable();
            let coeffs = idx
                .iter()
                .map(|&i| {
                    let rate = rate_min + (rate_max - rate_min) * rng.random::<f64>();
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * rate * factors.sigma[i]
                })
                .collect();
            (idx, coeffs)
        }
    };

    let mut w_star = base_w.clone();
    for (&i, &c) in planted_indices.iter().zip(&planted_coeffs) {
        w_star.add_outer(&factors.left(i), factors.vt.row(i), c);
    }

    let features = match spec.kind {
        TaskKind::PlantedLinear => FeatureMap::Identity,
        TaskKind::PlantedMlp => FeatureMap::Relu {
            w1: Matrix::random_normal(m, m, (2.0 / m as f64).sqrt(), &mut rng),
        },
    };

    let mut sample_set = |count: usize| -> Dataset {
        let x = Matrix::random_normal(count, m, 1.0, &mut rng);
        let mut y = features.apply(&x).matmul_t(&w_star);
        if spec.noise_std > 0.0 {
            for v in y.as_mut_slice() {
                let z: f64 = rng.sample(StandardNormal);
                *v += spec.noise_std * z;
            }
        }
        Dataset { x, y }
    };
    let train = sample_set(spec.n_train);
    let val = sample_set(spec.n_val);

    Ok(Task {
        spec: spec.clone(),
        base_w,
        w_star,
        factors,
        planted_indices,
        planted_coeffs,
        features,
        train,
        val,
    })
}
