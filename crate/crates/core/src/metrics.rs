//! Diagnostics comparing launched directions (LTSDs), directions of the final
//! update (DTSDs) and ground-truth task-specific directions (TSDs).

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterState;
use crate::error::{Error, Result};
use crate::spectral::{change_rates, svd, ChangeRates, Matrix, SvdFactors};

pub const K_PRED: usize = 8;
pub const K_PREC_REF: usize = 16;
pub const K_REC_REF: usize = 4;
/// Size of the reference sets in alignment rows.
pub const K_ALIGN: usize = 4;

/// Change rates of `ΔW* = W* − W` with the top-4 and top-16 prefixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsdGroundTruth {
    pub rates: ChangeRates,
    pub top4: Vec<usize>,
    pub top16: Vec<usize>,
}

impl TsdGroundTruth {
    pub fn from_rates(rates: ChangeRates) -> Self {
        let k = rates.len();
        TsdGroundTruth {
            top4: rates.ranking[..K_REC_REF.min(k)].to_vec(),
            top16: rates.ranking[..K_PREC_REF.min(k)].to_vec(),
            rates,
        }
    }

    /// First `k` directions of the ranking (clipped to its length).
    pub fn top(&self, k: usize) -> &[usize] {
        &self.rates.ranking[..k.min(self.rates.len())]
    }
}

pub fn ground_truth_tsd(w: &Matrix, w_star: &Matrix, epsilon: f64) -> Result<TsdGroundTruth> {
    w_star.check_shape(w.shape())?;
    ground_truth_from_factors(&svd(w)?, w, w_star, epsilon)
}

/// Same as [`ground_truth_tsd`] reusing an existing factorization of `w`.
pub fn ground_truth_from_factors(
    f: &SvdFactors,
    w: &Matrix,
    w_star: &Matrix,
    epsilon: f64,
) -> Result<TsdGroundTruth> {
    w_star.check_shape(w.shape())?;
    let rates = change_rates(f, &w_star.sub(w), epsilon)?;
    Ok(TsdGroundTruth::from_rates(rates))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrScore {
    pub precision: f64,
    pub recall: f64,
    pub k_pred: usize,
    pub k_prec_ref: usize,
    pub k_rec_ref: usize,
}

fn count_in(a: &[usize], b: &[usize]) -> usize {
    let set: HashSet<usize> = b.iter().copied().collect();
    a.iter().filter(|i| set.contains(i)).count()
}

/// Precision: share of `pred` inside the top `k_prec_ref` TSDs.
/// Recall: share of the top `k_rec_ref` TSDs found in `pred`.
/// Reference sizes are clipped to the number of directions.
pub fn pr_score(
    pred: &[usize],
    truth: &TsdGroundTruth,
    k_prec_ref: usize,
    k_rec_ref: usize,
) -> Result<PrScore> {
    if pred.is_empty() {
        return Err(Error::arg("empty prediction set"));
    }
    let distinct: HashSet<usize> = pred.iter().copied().collect();
    if distinct.len() != pred.len() {
        return Err(Error::arg("prediction set has duplicates"));
    }
    let prec_ref = truth.top(k_prec_ref);
    let rec_ref = truth.top(k_rec_ref);
    if prec_ref.is_empty() || rec_ref.is_empty() {
        return Err(Error::arg("reference sizes must be positive"));
    }
    Ok(PrScore {
        precision: count_in(pred, prec_ref) as f64 / pred.len() as f64,
        recall: count_in(rec_ref, pred) as f64 / rec_ref.len() as f64,
        k_pred: pred.len(),
        k_prec_ref: prec_ref.len(),
        k_rec_ref: rec_ref.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    /// Top-4 DTSDs contained in the `s` LTSDs.
    pub dtsd_cap_ltsd: f64,
    /// Top-4 TSDs contained in the `s` LTSDs.
    pub tsd_cap_ltsd: f64,
    /// Top-4 TSDs contained in the top-`s` DTSDs.
    pub tsd_cap_dtsd: f64,
}

pub fn alignment(
    ltsd: &[usize],
    dtsd_rates: &ChangeRates,
    truth: &TsdGroundTruth,
    s: usize,
) -> Result<AlignmentRow> {
    if ltsd.len() != s {
        return Err(Error::arg(format!(
            "alignment expects {s} LTSDs, got {}",
            ltsd.len()
        )));
    }
    let k = dtsd_rates.len();
    let dtsd_s = &dtsd_rates.ranking[..s.min(k)];
    let dtsd_top = &dtsd_rates.ranking[..K_ALIGN.min(k)];
    let tsd_top = truth.top(K_ALIGN);
    let frac = |a: &[usize], b: &[usize]| count_in(a, b) as f64 / a.len() as f64;
    Ok(AlignmentRow {
        dtsd_cap_ltsd: frac(dtsd_top, ltsd),
        tsd_cap_ltsd: frac(tsd_top, ltsd),
        tsd_cap_dtsd: frac(tsd_top, dtsd_s),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmpReport {
    pub amp_all: f64,
    pub amp_ab: f64,
    pub amp_dash: f64,
}

/// Feature amplification along the launched directions:
/// `‖Ūᵀ X V̄‖_F / ‖Ūᵀ W V̄‖_F` for `X` the merged weight, `W` plus the
/// non-dash part of `merged − W`, and `W` plus the dash update.
pub fn amplification(w: &Matrix, state: &AdapterState) -> Result<AmpReport> {
    let dash = state
        .dash
        .as_ref()
        .ok_or_else(|| Error::InvalidState("amplification needs a dash term".into()))?;
    w.check_shape(state.shape())?;
    let project = |x: &Matrix| dash.u_bar.t_matmul(x).matmul(&dash.v_bar).frob_norm();
    let denom = project(w);
    if denom < 1e-12 {
        return Err(Error::DegenerateProjection(denom));
    }
    // merged − w splits into a dash part and everything else, which for
    // split methods is AB − A0·B0.
    let merged = state.merged_weight();
    let dash_delta = state.dash_delta();
    Ok(AmpReport {
        amp_all: project(&merged) / denom,
        amp_ab: project(&merged.sub(&dash_delta)) / denom,
        amp_dash: project(&w.add(&dash_delta)) / denom,
    })
}

/// `|top-k(a) ∩ top-k(b)| / k`.
pub fn task_overlap(a: &TsdGroundTruth, b: &TsdGroundTruth, k: usize) -> Result<f64> {
    let kmax = a.rates.len().min(b.rates.len());
    if k == 0 || k > kmax {
        return Err(Error::arg(format!("overlap size {k} outside 1..={kmax}")));
    }
    Ok(count_in(a.top(k), b.top(k)) as f64 / k as f64)
}

pub const METRICS_HEADER: &str =
    "seed,step,layer,precision,recall,dtsd_ltsd,tsd_ltsd,tsd_dtsd,amp_all,amp_ab,amp_dash";

/// One metrics line; unavailable quantities are `None` and serialize as
/// empty fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub step: usize,
    pub layer: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub dtsd_ltsd: Option<f64>,
    pub tsd_ltsd: Option<f64>,
    pub tsd_dtsd: Option<f64>,
    pub amp_all: Option<f64>,
    pub amp_ab: Option<f64>,
    pub amp_dash: Option<f64>,
}

pub(crate) fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn with_pr(mut self, pr: &PrScore) -> Self {
        self.precision = Some(pr.precision);
        self.recall = Some(pr.recall);
        self
    }

    pub fn with_alignment(mut self, a: &AlignmentRow) -> Self {
        self.dtsd_ltsd = Some(a.dtsd_cap_ltsd);
        self.tsd_ltsd = Some(a.tsd_cap_ltsd);
        self.tsd_dtsd = Some(a.tsd_cap_dtsd);
        self
    }

    pub fn with_amp(mut self, amp: &AmpReport) -> Self {
        self.amp_all = Some(amp.amp_all);
        self.amp_ab = Some(amp.amp_ab);
        self.amp_dash = Some(amp.amp_dash);
        self
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.step,
            self.layer,
            opt_field(self.precision),
            opt_field(self.recall),
            opt_field(self.dtsd_ltsd),
            opt_field(self.tsd_ltsd),
            opt_field(self.tsd_dtsd),
            opt_field(self.amp_all),
            opt_field(self.amp_ab),
            opt_field(self.amp_dash),
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// Arithmetic mean, `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}
