use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{apply, OptimizerKind, Slot};
use super::task::{Dataset, Task};
use super::{grads, loss_mse, weight_grad};
use crate::adapters::{enter_dash_phase_with, AdapterState, Phase};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::spectral::{change_rates, top_k, ChangeRates, Matrix, DEFAULT_EPSILON};

/// Number of launched directions tracked in snapshots.
pub const LTSD_COUNT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    /// Length of the pre-launch phase in optimizer steps.
    pub t_prelaunch: usize,
    /// Number of launched directions given a dash coordinate.
    pub s_dash: usize,
    pub record_every: usize,
    pub seed: u64,
    pub rank: usize,
    /// Defaults to `rank`, i.e. a unit LoRA scale.
    pub alpha: Option<f64>,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.5,
            steps: 300,
            batch: 16,
            optimizer: OptimizerKind::Sgd,
            t_prelaunch: 100,
            s_dash: 8,
            record_every: 100,
            seed: 0,
            rank: 4,
            alpha: None,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::arg("lr must be non-negative"));
        }
        if self.steps == 0 || self.batch == 0 || self.record_every == 0 || self.rank == 0 {
            return Err(Error::arg(
                "steps, batch, record_every and rank must be positive",
            ));
        }
        if self.s_dash == 0 {
            return Err(Error::arg("s_dash must be positive"));
        }
        if self.t_prelaunch > self.steps {
            return Err(Error::arg(format!(
                "t_prelaunch {} exceeds steps {}",
                self.t_prelaunch, self.steps
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::arg("epsilon must be positive"));
        }
        Ok(())
    }

    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let out = TrainConfig {
            lr: cfg.get_or("lr", d.lr)?,
            steps: cfg.get_or("steps", d.steps)?,
            batch: cfg.get_or("batch", d.batch)?,
            optimizer: cfg.get_or("optimizer", d.optimizer)?,
            t_prelaunch: cfg.get_or("t_prelaunch", d.t_prelaunch)?,
            s_dash: cfg.get_or("s_dash", d.s_dash)?,
            record_every: cfg.get_or("record_every", d.record_every)?,
            seed: cfg.get_or("seed", d.seed)?,
            rank: cfg.get_or("rank", d.rank)?,
            alpha: cfg.get("alpha")?,
            epsilon: cfg.get_or("epsilon", d.epsilon)?,
        };
        out.validate()
            .map_err(|e| cfg.error_at("steps", e.to_string()))?;
        Ok(out)
    }

    pub fn config_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("optimizer", self.optimizer.name().to_string()),
            ("t_prelaunch", self.t_prelaunch.to_string()),
            ("s_dash", self.s_dash.to_string()),
            ("record_every", self.record_every.to_string()),
            ("seed", self.seed.to_string()),
            ("rank", self.rank.to_string()),
            ("alpha", self.alpha().to_string()),
            ("epsilon", self.epsilon.to_string()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// Mini-batch loss of step `i + 1`, measured before its update.
    pub losses: Vec<f64>,
    /// `(step, loss on the validation set)` every `record_every` steps.
    pub val_losses: Vec<(usize, f64)>,
    /// `(step, top LTSD indices of merged − W)` every `record_every` steps.
    pub ltsd_snapshots: Vec<(usize, Vec<usize>)>,
    /// Change rates used to launch the dash phase, if it was entered.
    pub launch_rates: Option<ChangeRates>,
    pub final_state: AdapterState,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
}

impl TrainTrace {
    /// `step,loss,val_loss,ltsd_indices`, one line per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,val_loss,ltsd_indices\n");
        let mut vals = self.val_losses.iter().peekable();
        let mut snaps = self.ltsd_snapshots.iter().peekable();
        for (i, loss) in self.losses.iter().enumerate() {
            let step = i + 1;
            let val = match vals.peek() {
                Some((s, v)) if *s == step => {
                    vals.next();
                    v.to_string()
                }
                _ => String::new(),
            };
            let snap = match snaps.peek() {
                Some((s, idx)) if *s == step => {
                    snaps.next();
                    idx.iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join(";")
                }
                _ => String::new(),
            };
            let _ = writeln!(out, "{step},{loss},{val},{snap}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Chooses `(dash directions, init directions)` from the launch-time change
/// rates. `init` directions must number exactly the adapter rank.
pub type DirectionChooser<'a> = dyn Fn(&ChangeRates) -> Result<(Vec<usize>, Vec<usize>)> + 'a;

/// Top `count` directions of `merged − W` (clipped to `k`).
pub fn ltsd_of(
    task: &Task,
    state: &AdapterState,
    count: usize,
    epsilon: f64,
) -> Result<Vec<usize>> {
    let delta = state.merged_weight().sub(&task.base_w);
    let cr = change_rates(&task.factors, &delta, epsilon)?;
    top_k(&cr, count.min(cr.len()))
}

struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(count: usize, size: usize, seed: u64) -> Result<Self> {
        if size > count {
            return Err(Error::arg(format!(
                "batch {size} larger than training set {count}"
            )));
        }
        Ok(Batches {
            order: (0..count).collect(),
            pos: count,
            size,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c_0000_0001),
        })
    }

    /// Next mini-batch; reshuffles when fewer than `size` samples remain.
    fn next(&mut self) -> &[usize] {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        out
    }
}

/// Trains with the default launch rule: top `s_dash` change rates for the
/// dash term and top `r` for an init split.
pub fn train(state: AdapterState, task: &Task, cfg: &TrainConfig) -> Result<TrainTrace> {
    let s_dash = cfg.s_dash;
    let rank = state.rank();
    let chooser = move |cr: &ChangeRates| -> Result<(Vec<usize>, Vec<usize>)> {
        Ok((top_k(cr, s_dash.min(cr.len()))?, top_k(cr, rank)?))
    };
    train_with(state, task, cfg, &chooser)
}

/// Runs `cfg.steps` optimizer steps. Methods with a pre-launch phase switch
/// after `t_prelaunch` steps (never, when `t_prelaunch == steps`), using the
/// change rates of the current update against the task's base factors.
pub fn train_with(
    mut state: AdapterState,
    task: &Task,
    cfg: &TrainConfig,
    choose: &DirectionChooser<'_>,
) -> Result<TrainTrace> {
    cfg.validate()?;
    state.validate()?;
    let (train_set, val_set) = task.featurized();
    let mut batches = Batches::new(train_set.len(), cfg.batch, cfg.seed)?;

    let mut slot_a = Slot::default();
    let mut slot_b = Slot::default();
    let mut slot_ds = Slot::default();

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut val_losses = Vec::new();
    let mut ltsd_snapshots = Vec::new();
    let mut launch_rates = None;

    for step in 1..=cfg.steps {
        if state.phase == Phase::Prelaunch && step - 1 == cfg.t_prelaunch {
            let cr = change_rates(&task.factors, &state.effective_delta(), cfg.epsilon)?;
            let (dash_idx, init_idx) = choose(&cr)?;
            state = enter_dash_phase_with(&state, &task.factors, &dash_idx, &init_idx)?;
            if state.method.uses_split() {
                slot_a.reset();
                slot_b.reset();
            }
            launch_rates = Some(cr);
        }

        let batch = train_set.select(batches.next());
        let g = grads(&state, &batch)?;
        if !g.loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(g.loss);
        apply(
            cfg.optimizer,
            cfg.lr,
            &mut slot_a,
            state.core.a.as_mut_slice(),
            g.da.as_slice(),
        );
        apply(
            cfg.optimizer,
            cfg.lr,
            &mut slot_b,
            state.core.b.as_mut_slice(),
            g.db.as_slice(),
        );
        if let (Some(dash), Some(dd)) = (state.dash.as_mut(), g.ddsigma.as_ref()) {
            apply(cfg.optimizer, cfg.lr, &mut slot_ds, &mut dash.dsigma, dd);
        }

        if step % cfg.record_every == 0 {
            val_losses.push((step, eval_loss(&state, &val_set)?));
            ltsd_snapshots.push((step, ltsd_of(task, &state, LTSD_COUNT, cfg.epsilon)?));
        }
    }

    let final_train_loss = eval_loss(&state, &train_set)?;
    let final_val_loss = eval_loss(&state, &val_set)?;
    if !(final_train_loss.is_finite() && final_val_loss.is_finite()) {
        return Err(Error::Diverged { step: cfg.steps });
    }
    Ok(TrainTrace {
        losses,
        val_losses,
        ltsd_snapshots,
        launch_rates,
        final_state: state,
        final_train_loss,
        final_val_loss,
    })
}

fn eval_loss(state: &AdapterState, data: &Dataset) -> Result<f64> {
    dense_loss(&state.merged_weight(), data)
}

/// MSE of `x · weightᵀ` against `y`; non-finite values map to infinity.
pub fn dense_loss(weight: &Matrix, data: &Dataset) -> Result<f64> {
    let loss = loss_mse(&data.x.matmul_t(weight), &data.y)?;
    Ok(if loss.is_finite() {
        loss
    } else {
        f64::INFINITY
    })
}

/// Full fine-tuning: every entry of a dense copy of `w` is trained with the
/// same optimizer, batches and step budget.
pub fn train_full(w: &Matrix, task: &Task, cfg: &TrainConfig) -> Result<Matrix> {
    train_full_traced(w, task, cfg).map(|(weight, _)| weight)
}

/// [`train_full`] plus the per-step mini-batch losses.
pub fn train_full_traced(w: &Matrix, task: &Task, cfg: &TrainConfig) -> Result<(Matrix, Vec<f64>)> {
    cfg.validate()?;
    w.check_shape(task.base_w.shape())?;
    let (train_set, _) = task.featurized();
    let mut batches = Batches::new(train_set.len(), cfg.batch, cfg.seed)?;
    let mut weight = w.clone();
    let mut slot = Slot::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = train_set.select(batches.next());
        let (loss, g) = weight_grad(&weight, &batch);
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(loss);
        apply(
            cfg.optimizer,
            cfg.lr,
            &mut slot,
            weight.as_mut_slice(),
            g.as_slice(),
        );
    }
    if !weight.is_finite() {
        return Err(Error::Diverged { step: cfg.steps });
    }
    Ok((weight, losses))
}
