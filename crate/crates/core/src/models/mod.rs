//! Toy models with planted optima, analytic gradients and training loops.
//!
//! Samples are rows: a batch `x` is `samples × m` and the adapted layer maps
//! it to `x · Mᵀ` (`samples × n`) where `M` is the merged weight.

pub mod optim;
mod task;
mod train;

pub use optim::OptimizerKind;
pub use task::{gen_task, Dataset, FeatureMap, Planting, Task, TaskKind, TaskSpec};
pub use train::{
    dense_loss, ltsd_of, train, train_full, train_full_traced, train_with, DirectionChooser,
    TrainConfig, TrainTrace, LTSD_COUNT,
};

use crate::adapters::AdapterState;
use crate::error::{Error, Result};
use crate::spectral::{dot, Matrix};

/// `x · merged_weight(state)ᵀ`.
pub fn forward(state: &AdapterState, x: &Matrix) -> Result<Matrix> {
    let m = state.shape().1;
    if x.cols() != m {
        return Err(Error::ShapeMismatch {
            expected: (x.rows(), m),
            got: x.shape(),
        });
    }
    Ok(x.matmul_t(&state.merged_weight()))
}

/// Mean of squared entry differences.
pub fn loss_mse(pred: &Matrix, target: &Matrix) -> Result<f64> {
    target.check_shape(pred.shape())?;
    let sum: f64 = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.as_slice().len() as f64)
}

/// Gradients of the MSE with respect to the trainable parameters only.
/// `base`, `u_bar` and `v_bar` are frozen and have no slot here.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub loss: f64,
    pub da: Matrix,
    pub db: Matrix,
    /// Present only once the dash term exists.
    pub ddsigma: Option<Vec<f64>>,
}

/// Gradient of the batch MSE with respect to the merged weight,
/// `G = Eᵀ x` with `E = 2 (pred − y) / (samples · n)`, plus the loss.
pub(crate) fn weight_grad(weight: &Matrix, batch: &Dataset) -> (f64, Matrix) {
    let pred = batch.x.matmul_t(weight);
    let resid = pred.sub(&batch.y);
    let count = resid.as_slice().len() as f64;
    let loss = resid.as_slice().iter().map(|r| r * r).sum::<f64>() / count;
    let e = resid.scale(2.0 / count);
    (loss, e.t_matmul(&batch.x))
}

/// Analytic backprop through `M = base + s·A B + Ū diag(Δσ) V̄ᵀ`:
/// `dA = s·G Bᵀ`, `dB = s·Aᵀ G`, `dΔσ_i = ū_iᵀ G v̄_i`.
pub fn grads(state: &AdapterState, batch: &Dataset) -> Result<Grads> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    batch.x.check_shape((batch.len(), state.shape().1))?;
    batch.y.check_shape((batch.len(), state.shape().0))?;
    let (loss, g) = weight_grad(&state.merged_weight(), batch);
    let s = state.core.scale();
    let da = g.matmul_t(&state.core.b).scale(s);
    let db = state.core.a.t_matmul(&g).scale(s);
    let ddsigma = state.dash.as_ref().map(|d| {
        let gv = g.matmul(&d.v_bar); // n×s, column i is G v̄_i
        (0..d.len())
            .map(|i| dot(&d.u_bar.column(i), &gv.column(i)))
            .collect()
    });
    Ok(Grads {
        loss,
        da,
        db,
        ddsigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{lora_random_init, Method};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul_t(x: &Matrix, w: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), w.rows());
        for i in 0..x.rows() {
            for j in 0..w.rows() {
                let mut acc = 0.0;
                for k in 0..x.cols() {
                    acc += x[(i, k)] * w[(j, k)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    #[test]
    fn forward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let core = lora_random_init(3, 5, 2, 2.0, 1).unwrap();
        let mut s = AdapterState::new(Method::Lora, w.clone(), core).unwrap();
        let x = Matrix::random_normal(4, 5, 1.0, &mut rng);
        assert_eq!(forward(&s, &x).unwrap(), x.matmul_t(&w));

        let e2 = Matrix::from_fn(1, 5, |_, j| if j == 2 { 1.0 } else { 0.0 });
        assert_eq!(forward(&s, &e2).unwrap().as_slice(), w.column(2).as_slice());

        s.core.b = Matrix::random_normal(2, 5, 1.0, &mut rng);
        let out = forward(&s, &x).unwrap();
        assert!(out.max_abs_diff(&naive_matmul_t(&x, &s.merged_weight())) < 1e-12);
        assert!(forward(&s, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn loss_examples() {
        let a = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
        assert_eq!(loss_mse(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_mse(&a.map(|v| v + 1.0), &a).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Matrix::random_normal(4, 6, 1.0, &mut rng);
        let t = Matrix::random_normal(4, 6, 1.0, &mut rng);
        let mut acc = 0.0;
        for i in 0..4 {
            for j in 0..6 {
                acc += (p[(i, j)] - t[(i, j)]).powi(2);
            }
        }
        assert!((loss_mse(&p, &t).unwrap() - acc / 24.0).abs() < 1e-12);
        assert!(loss_mse(&p, &t.transpose()).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let mut core = lora_random_init(3, 4, 2, 2.0, 1).unwrap();
        core.b = Matrix::random_normal(2, 4, 1.0, &mut rng);
        let s = AdapterState::new(Method::Lora, w, core).unwrap();
        let x = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let y = forward(&s, &x).unwrap();
        let g = grads(&s, &Dataset { x, y }).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.da.frob_norm() == 0.0 && g.db.frob_norm() == 0.0);
        assert!(g.ddsigma.is_none());
    }
}
