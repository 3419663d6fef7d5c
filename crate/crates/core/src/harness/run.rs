use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{select_directions, select_init, DirectionMode, ExperimentConfig, InitMode, RunMethod};
use crate::adapters::{lora_random_init, AdapterState, Method};
use crate::error::{Error, Result};
use crate::metrics::{
    alignment, amplification, ground_truth_from_factors, pr_score, MetricsRow, TsdGroundTruth,
    K_PREC_REF, K_PRED, K_REC_REF,
};
use crate::models::{
    dense_loss, gen_task, ltsd_of, train_full_traced, train_with, Task, TrainConfig, TrainTrace,
};
use crate::spectral::{change_rates, top_k, ChangeRates, Matrix};

/// One point of the method × mode × t × s grid. Fields that do not apply to
/// the method are `None`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub method: RunMethod,
    pub mode: Option<String>,
    pub t: Option<usize>,
    pub s: Option<usize>,
}

impl Cell {
    pub(super) fn plain(method: RunMethod) -> Self {
        Cell {
            method,
            mode: None,
            t: None,
            s: None,
        }
    }

    /// File-name-safe identifier of this cell run with `seed`.
    pub fn run_id(&self, seed: u64) -> String {
        let opt = |v: Option<usize>| v.map_or("na".to_string(), |v| v.to_string());
        format!(
            "{}-{}-t{}-s{}-seed{seed}",
            self.method,
            self.mode.as_deref().unwrap_or("na"),
            opt(self.t),
            opt(self.s)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: RunMethod,
    pub mode: Option<String>,
    pub t: Option<usize>,
    pub s: Option<usize>,
    pub seed: u64,
    pub dataset_checksum: u64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub dtsd_ltsd: Option<f64>,
    pub tsd_ltsd: Option<f64>,
    pub tsd_dtsd: Option<f64>,
    pub amp_all: Option<f64>,
    pub amp_ab: Option<f64>,
    pub amp_dash: Option<f64>,
}

impl ReportRow {
    pub fn cell(&self) -> Cell {
        Cell {
            method: self.method,
            mode: self.mode.clone(),
            t: self.t,
            s: self.s,
        }
    }

    pub fn run_id(&self) -> String {
        self.cell().run_id(self.seed)
    }
}

/// A report row with the series behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub row: ReportRow,
    /// Mini-batch loss per step.
    pub losses: Vec<f64>,
    /// Precision and recall of the LTSD snapshot at each recorded step.
    pub metrics: Vec<MetricsRow>,
}

/// Ground-truth change rates of one seed's task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSpectrum {
    pub seed: u64,
    /// `full_ft` or `planted`.
    pub source: String,
    pub sigma: Vec<f64>,
    pub rates: ChangeRates,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub records: Vec<RunRecord>,
    pub spectra: Vec<SeedSpectrum>,
}

impl Experiment {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.records.iter().map(|r| r.row.clone()).collect()
    }

    /// Restores report order: by cell, then seed.
    pub fn sort(&mut self) {
        self.records.sort_by_key(|r| (r.row.cell(), r.row.seed));
        self.spectra.sort_by_key(|s| s.seed);
    }
}

struct SeedContext {
    seed: u64,
    task: Task,
    truth: TsdGroundTruth,
    source: &'static str,
    full: Option<(Matrix, Vec<f64>)>,
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let task = gen_task(&cfg.task.with_seed(seed))?;
    let eps = cfg.train.epsilon;
    let (truth, source, full) = if cfg.methods.contains(&RunMethod::FullFt) {
        let ft_cfg = TrainConfig {
            lr: cfg.full_ft_lr,
            steps: cfg.full_ft_steps,
            t_prelaunch: 0,
            seed,
            ..cfg.train.clone()
        };
        let (w_ft, losses) = train_full_traced(&task.base_w, &task, &ft_cfg)?;
        let truth = ground_truth_from_factors(&task.factors, &task.base_w, &w_ft, eps)?;
        (truth, "full_ft", Some((w_ft, losses)))
    } else {
        let truth = ground_truth_from_factors(&task.factors, &task.base_w, &task.w_star, eps)?;
        (truth, "planted", None)
    };
    Ok(SeedContext {
        seed,
        task,
        truth,
        source,
        full,
    })
}

/// Runs every cell for every seed. Tasks are generated once per seed and
/// shared by all cells, so rows with the same seed are paired. Ground truth
/// comes from full fine-tuning when `full_ft` is among the methods and from
/// the planted `W*` otherwise.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let contexts: Vec<SeedContext> = cfg
        .seeds
        .par_iter()
        .map(|&seed| prepare(cfg, seed))
        .collect::<Result<_>>()?;
    let cells = cfg.cells();
    let jobs: Vec<(&Cell, &SeedContext)> = cells
        .iter()
        .flat_map(|c| contexts.iter().map(move |ctx| (c, ctx)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|(cell, ctx)| run_one(cfg, cell, ctx))
        .collect::<Result<Vec<_>>>()?;
    let spectra = contexts
        .iter()
        .map(|ctx| SeedSpectrum {
            seed: ctx.seed,
            source: ctx.source.to_string(),
            sigma: ctx.task.factors.sigma.clone(),
            rates: ctx.truth.rates.clone(),
        })
        .collect();
    let mut exp = Experiment { records, spectra };
    exp.sort();
    Ok(exp)
}

/// Trains `method` from a fresh LoRA initialization seeded by `tc.seed`.
/// `mode` names a [`DirectionMode`] for dash and tsd, an [`InitMode`] for
/// init, and is ignored by lora. LoRA-TSD always splits along the top `r`
/// change rates.
pub fn train_method(
    task: &Task,
    tc: &TrainConfig,
    method: Method,
    mode: &str,
) -> Result<TrainTrace> {
    let (n, m) = task.base_w.shape();
    let core = lora_random_init(n, m, tc.rank, tc.alpha(), tc.seed)?;
    let state = AdapterState::new(method, task.base_w.clone(), core)?;
    let (rank, s_dash, seed) = (tc.rank, tc.s_dash, tc.seed);
    let chooser = |cr: &ChangeRates| -> Result<(Vec<usize>, Vec<usize>)> {
        match method {
            Method::Dash | Method::Tsd => Ok((
                select_directions(mode.parse::<DirectionMode>()?, cr, s_dash, seed)?,
                top_k(cr, rank)?,
            )),
            Method::Init => Ok((
                Vec::new(),
                select_init(mode.parse::<InitMode>()?, cr, &task.factors, rank, seed)?,
            )),
            Method::Lora => Err(Error::InvalidState("lora never launches".into())),
        }
    };
    train_with(state, task, tc, &chooser)
}

/// Runs a single cell on a freshly generated task for `seed`.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell, seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    run_one(cfg, cell, &prepare(cfg, seed)?)
}

fn run_one(cfg: &ExperimentConfig, cell: &Cell, ctx: &SeedContext) -> Result<RunRecord> {
    let task = &ctx.task;
    let (train_set, val_set) = task.featurized();
    let mut row = ReportRow {
        method: cell.method,
        mode: cell.mode.clone(),
        t: cell.t,
        s: cell.s,
        seed: ctx.seed,
        dataset_checksum: task.dataset_checksum(),
        final_train_loss: f64::NAN,
        final_val_loss: f64::NAN,
        precision: None,
        recall: None,
        dtsd_ltsd: None,
        tsd_ltsd: None,
        tsd_dtsd: None,
        amp_all: None,
        amp_ab: None,
        amp_dash: None,
    };

    let Some(method) = cell.method.adapter() else {
        let (w_ft, losses) = match &ctx.full {
            Some(full) => full.clone(),
            None => {
                return Err(Error::InvalidState(
                    "full_ft row requested without a full fine-tuning run".into(),
                ))
            }
        };
        row.final_train_loss = dense_loss(&w_ft, &train_set)?;
        row.final_val_loss = dense_loss(&w_ft, &val_set)?;
        return Ok(RunRecord {
            row,
            losses,
            metrics: Vec::new(),
        });
    };

    let mut tc = TrainConfig {
        seed: ctx.seed,
        ..cfg.train.clone()
    };
    if let Some(t) = cell.t {
        tc.t_prelaunch = t;
    }
    if let Some(s) = cell.s {
        tc.s_dash = s;
    }
    let mode = cell.mode.as_deref().unwrap_or("tsd");
    let trace = train_method(task, &tc, method, mode)?;
    let state = &trace.final_state;
    row.final_train_loss = trace.final_train_loss;
    row.final_val_loss = trace.final_val_loss;

    let k = task.factors.rank();
    let ltsd = match &trace.launch_rates {
        Some(cr) => top_k(cr, K_PRED.min(k))?,
        None => ltsd_of(task, state, K_PRED, tc.epsilon)?,
    };
    let pr = pr_score(&ltsd, &ctx.truth, K_PREC_REF, K_REC_REF)?;
    row.precision = Some(pr.precision);
    row.recall = Some(pr.recall);

    if let Some(dash) = &state.dash {
        let dtsd = change_rates(
            &task.factors,
            &state.merged_weight().sub(&task.base_w),
            tc.epsilon,
        )?;
        let al = alignment(&dash.indices, &dtsd, &ctx.truth, dash.len())?;
        row.dtsd_ltsd = Some(al.dtsd_cap_ltsd);
        row.tsd_ltsd = Some(al.tsd_cap_ltsd);
        row.tsd_dtsd = Some(al.tsd_cap_dtsd);
        match amplification(&task.base_w, state) {
            Ok(amp) => {
                row.amp_all = Some(amp.amp_all);
                row.amp_ab = Some(amp.amp_ab);
                row.amp_dash = Some(amp.amp_dash);
            }
            Err(Error::DegenerateProjection(_)) => {}
            Err(e) => return Err(e),
        }
    }

    let metrics = trace
        .ltsd_snapshots
        .iter()
        .map(|(step, snap)| {
            let pr = pr_score(snap, &ctx.truth, K_PREC_REF, K_REC_REF)?;
            Ok(MetricsRow {
                seed: ctx.seed,
                step: *step,
                ..MetricsRow::default()
            }
            .with_pr(&pr))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(RunRecord {
        row,
        losses: trace.losses,
        metrics,
    })
}
