use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::svd::SvdFactors;
use crate::error::{Error, Result};

/// Regularizer added to `σ_i` in the change-rate denominator.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Coordinates `p_ij = u_iᵀ A v_j` of a matrix on the global bases of `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionCoeffs {
    pub coeffs: Matrix,
}

/// Projects `a` onto every global basis `u_i v_jᵀ` of the factored matrix.
/// The right basis is completed to all `m` input directions, so the result
/// is `k×m`.
pub fn project_global(f: &SvdFactors, a: &Matrix) -> Result<ProjectionCoeffs> {
    a.check_shape(f.source_shape())?;
    let v = f.full_right_basis();
    let coeffs = f.u.t_matmul(a).matmul_t(&v);
    Ok(ProjectionCoeffs { coeffs })
}

/// Relative coordinate change of `ΔW` along each core direction of `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRates {
    pub delta: Vec<f64>,
    pub signed: Vec<f64>,
    pub epsilon: f64,
    /// Indices ordered by `delta` non-increasing, lower index first on ties.
    pub ranking: Vec<usize>,
}

impl ChangeRates {
    pub fn from_signed(signed: Vec<f64>, epsilon: f64) -> Self {
        let delta: Vec<f64> = signed.iter().map(|s| s.abs()).collect();
        let ranking = rank_descending(&delta);
        ChangeRates {
            delta,
            signed,
            epsilon,
            ranking,
        }
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    /// Position of each index within `ranking` (0 = highest rate).
    pub fn rank_of(&self) -> Vec<usize> {
        let mut pos = vec![0; self.ranking.len()];
        for (r, &i) in self.ranking.iter().enumerate() {
            pos[i] = r;
        }
        pos
    }
}

/// Stable descending argsort; ties keep index order.
pub(crate) fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// `δ_i = u_iᵀ ΔW v_i / (σ_i + ε)`, evaluated as the rectangle diagonal of
/// `(Uᵀ ΔW V) ⊙ D` where `D` carries `1/(σ_i + ε)` on its diagonal.
pub fn change_rates(f: &SvdFactors, delta_w: &Matrix, epsilon: f64) -> Result<ChangeRates> {
    delta_w.check_shape(f.source_shape())?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::arg(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let k = f.rank();
    let projected = f.u.t_matmul(delta_w).matmul_t(&f.vt);
    let inv: Vec<f64> = f.sigma.iter().map(|s| 1.0 / (s + epsilon)).collect();
    let weights = Matrix::from_diag(k, k, &inv);
    let signed = projected.hadamard(&weights).diagonal();
    Ok(ChangeRates::from_signed(signed, epsilon))
}

/// First `k` entries of the ranking.
pub fn top_k(cr: &ChangeRates, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > cr.len() {
        return Err(Error::arg(format!(
            "top_k: k = {k} outside 1..={}",
            cr.len()
        )));
    }
    Ok(cr.ranking[..k].to_vec())
}

/// `ln(δ + 1) / 3`, the display scaling for change-rate spectra.
pub fn scaled_rate(delta: f64) -> Result<f64> {
    if delta.is_nan() || delta < 0.0 {
        return Err(Error::arg(format!("scaled_rate of negative value {delta}")));
    }
    Ok(delta.ln_1p() / 3.0)
}
