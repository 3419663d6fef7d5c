use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Thin SVD `W = U diag(σ) Vᵀ` with `k = min(n, m)` components.
///
/// Column `i` of `u` and row `i` of `vt` form the core basis `u_i v_iᵀ`;
/// pairing column `i` of `u` with row `j` of a completed right basis gives
/// the global basis `u_i v_jᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Shape of the matrix these factors came from.
    pub fn source_shape(&self) -> (usize, usize) {
        (self.u.rows(), self.vt.cols())
    }

    pub fn left(&self, i: usize) -> Vec<f64> {
        self.u.column(i)
    }

    pub fn right(&self, i: usize) -> Vec<f64> {
        self.vt.row(i).to_vec()
    }

    /// `U diag(σ) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.u.clone();
        for i in 0..scaled.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                scaled[(i, j)] *= s;
            }
        }
        scaled.matmul(&self.vt)
    }

    /// Orthonormal basis of the input space (`m×m`, one vector per row) whose
    /// first `k` rows are `vt`. The remaining rows are obtained by
    /// Gram-Schmidt over the standard basis, picking at each step the
    /// candidate with the largest residual so the completion is deterministic.
    pub fn full_right_basis(&self) -> Matrix {
        complete_row_basis(&self.vt)
    }
}

/// Thin SVD with signs canonicalized so the largest-magnitude entry of each
/// `u_i` is positive (first such entry on ties).
pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    if !w.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entries".into()));
    }
    let (n, m) = w.shape();
    let k = n.min(m);
    let dm = DMatrix::from_row_slice(n, m, w.as_slice());
    let decomposition = dm
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::InvalidMatrix("SVD failed to converge".into()))?;
    let (Some(u), Some(v_t)) = (decomposition.u, decomposition.v_t) else {
        return Err(Error::InvalidMatrix("SVD did not return vectors".into()));
    };
    let values = decomposition.singular_values;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let mut u_out = Matrix::zeros(n, k);
    let mut vt_out = Matrix::zeros(k, m);
    let mut sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| u[(i, src)]).collect();
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &v)| {
                if v.abs() > best.1 {
                    (i, v.abs())
                } else {
                    best
                }
            })
            .0;
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, v) in col.iter().enumerate() {
            u_out[(i, dst)] = sign * v;
        }
        for j in 0..m {
            vt_out[(dst, j)] = sign * v_t[(src, j)];
        }
        sigma.push(values[src].max(0.0));
    }
    Ok(SvdFactors {
        u: u_out,
        sigma,
        vt: vt_out,
    })
}

fn complete_row_basis(rows: &Matrix) -> Matrix {
    let (k, m) = rows.shape();
    let mut basis: Vec<Vec<f64>> = (0..k).map(|i| rows.row(i).to_vec()).collect();
    let mut used = vec![false; m];
    while basis.len() < m {
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for (e, taken) in used.iter().enumerate() {
            if *taken {
                continue;
            }
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(&cand, b);
                    for (x, y) in cand.iter_mut().zip(b) {
                        *x -= c * y;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(_, _, bn)| norm > *bn) {
                best = Some((e, cand, norm));
            }
        }
        let (e, mut cand, norm) = best.expect("an unused standard basis vector remains");
        used[e] = true;
        for x in &mut cand {
            *x /= norm;
        }
        basis.push(cand);
    }
    Matrix::from_rows(&basis).expect("basis rows are finite and equal length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orth_residual(q: &Matrix) -> f64 {
        // qᵀq − I for column-orthonormal q
        let g = q.t_matmul(q);
        g.sub(&Matrix::identity(g.rows())).frob_norm()
    }

    #[test]
    fn diagonal_input_is_its_own_svd() {
        let w = Matrix::from_diag(2, 2, &[3.0, 2.0]);
        let f = svd(&w).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0]);
        assert!(f.u.max_abs_diff(&Matrix::identity(2)) < 1e-15);
        assert!(f.vt.max_abs_diff(&Matrix::identity(2)) < 1e-15);
    }

    #[test]
    fn scalar_matrix() {
        let w = Matrix::new(1, 1, vec![-5.0]).unwrap();
        let f = svd(&w).unwrap();
        assert_eq!(f.sigma, vec![5.0]);
        assert_eq!(f.u[(0, 0)], 1.0);
        assert_eq!(f.vt[(0, 0)], -1.0);
        assert_eq!(f.reconstruct(), w);
    }

    #[test]
    fn random_wide_matrix_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Matrix::random_normal(8, 12, 1.0, &mut rng);
        let f = svd(&w).unwrap();
        // oracle: direct multiply U diag(σ) Vᵀ, compared entrywise
        let rebuilt = Matrix::from_fn(8, 12, |i, j| {
            (0..8)
                .map(|l| f.u[(i, l)] * f.sigma[l] * f.vt[(l, j)])
                .sum()
        });
        assert!(rebuilt.sub(&w).frob_norm() / w.frob_norm() <= 1e-10);
        assert!(orth_residual(&f.u) <= 1e-10);
        assert!(orth_residual(&f.vt.transpose()) <= 1e-10);
        assert!(f.sigma.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn tall_and_rank_deficient_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::random_normal(9, 2, 1.0, &mut rng);
        let b = Matrix::random_normal(2, 4, 1.0, &mut rng);
        let w = a.matmul(&b); // 9x4 of rank 2
        let f = svd(&w).unwrap();
        assert_eq!(f.rank(), 4);
        assert!(f.sigma[2] < 1e-12 && f.sigma[3] < 1e-12);
        assert!(orth_residual(&f.u) <= 1e-10);
        assert!(orth_residual(&f.vt.transpose()) <= 1e-10);
        assert!(f.reconstruct().sub(&w).frob_norm() <= 1e-10 * w.frob_norm());
    }

    #[test]
    fn signs_are_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::random_normal(5, 7, 1.0, &mut rng);
        let f = svd(&w).unwrap();
        for i in 0..f.rank() {
            let col = f.left(i);
            let max = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let first = col.iter().find(|v| v.abs() == max).unwrap();
            assert!(*first > 0.0);
        }
        // negating the input flips v only
        let g = svd(&w.scale(-1.0)).unwrap();
        assert!(g.u.max_abs_diff(&f.u) < 1e-10);
        assert!(g.vt.max_abs_diff(&f.vt.scale(-1.0)) < 1e-10);
    }

    #[test]
    fn non_finite_rejected() {
        let w = Matrix::from_fn(2, 2, |_, _| 1.0);
        let mut bad = w.clone();
        bad.as_mut_slice()[1] = f64::NAN;
        assert!(matches!(svd(&bad), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn completed_right_basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Matrix::random_normal(3, 7, 1.0, &mut rng);
        let f = svd(&w).unwrap();
        let v = f.full_right_basis();
        assert_eq!(v.shape(), (7, 7));
        assert!(orth_residual(&v.transpose()) < 1e-12);
        assert!(v.select_rows(&[0, 1, 2]).max_abs_diff(&f.vt) == 0.0);
    }
}
