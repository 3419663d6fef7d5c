#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsdlab::adapters::{enter_dash_phase_with, lora_random_init, AdapterState, Method, Phase};
use tsdlab::models::{forward, grads, loss_mse, Dataset};
use tsdlab::spectral::{svd, Matrix, SvdFactors};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, &mut rng(seed))
}

/// `δ_i = u_iᵀ ΔW v_i / (σ_i + ε)` by explicit summation.
pub fn loop_rates(f: &SvdFactors, dw: &Matrix, eps: f64) -> Vec<f64> {
    (0..f.rank())
        .map(|i| {
            let mut acc = 0.0;
            for r in 0..dw.rows() {
                for c in 0..dw.cols() {
                    acc += f.u[(r, i)] * dw[(r, c)] * f.vt[(i, c)];
                }
            }
            acc / (f.sigma[i] + eps)
        })
        .collect()
}

/// A state of `method` in `phase` with every trainable parameter set to a
/// random value, so no gradient vanishes structurally.
pub fn random_state(method: Method, phase: Phase, n: usize, m: usize, seed: u64) -> AdapterState {
    let mut g = rng(seed);
    let w = Matrix::random_normal(n, m, 1.0, &mut g);
    let r = g.random_range(1..=n.min(m).min(3));
    let alpha = g.random_range(0.5..4.0);
    let core = lora_random_init(n, m, r, alpha, seed).unwrap();
    let mut state = AdapterState::new(method, w, core).unwrap();
    if phase == Phase::Dash {
        let f = svd(&state.base).unwrap();
        let k = f.rank();
        let s = g.random_range(1..=k);
        let mut all: Vec<usize> = (0..k).collect();
        for i in 0..k {
            all.swap(i, g.random_range(i..k));
        }
        let dash_idx = all[..s].to_vec();
        let init_idx = all[..r].to_vec();
        state = enter_dash_phase_with(&state, &f, &dash_idx, &init_idx).unwrap();
    }
    let (a_rows, a_cols) = state.core.a.shape();
    let (b_rows, b_cols) = state.core.b.shape();
    state.core.a = Matrix::random_normal(a_rows, a_cols, 0.7, &mut g);
    state.core.b = Matrix::random_normal(b_rows, b_cols, 0.7, &mut g);
    if let Some(d) = state.dash.as_mut() {
        for v in d.dsigma.iter_mut() {
            *v = g.random_range(-1.0..1.0);
        }
    }
    state
}

pub fn random_batch(n: usize, m: usize, rows: usize, seed: u64) -> Dataset {
    let mut g = rng(seed);
    Dataset {
        x: Matrix::random_normal(rows, m, 1.0, &mut g),
        y: Matrix::random_normal(rows, n, 1.0, &mut g),
    }
}

fn batch_loss(state: &AdapterState, batch: &Dataset) -> f64 {
    loss_mse(&forward(state, &batch.x).unwrap(), &batch.y).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest relative error between the analytic gradient and a central
/// difference with step `h`, over every trainable entry.
pub fn max_grad_error(state: &AdapterState, batch: &Dataset, h: f64) -> f64 {
    let g = grads(state, batch).unwrap();
    let mut worst: f64 = 0.0;
    let probe = |edit: &dyn Fn(&mut AdapterState, f64)| -> f64 {
        let mut plus = state.clone();
        edit(&mut plus, h);
        let mut minus = state.clone();
        edit(&mut minus, -h);
        (batch_loss(&plus, batch) - batch_loss(&minus, batch)) / (2.0 * h)
    };
    for i in 0..state.core.a.as_slice().len() {
        let fd = probe(&|s: &mut AdapterState, d| s.core.a.as_mut_slice()[i] += d);
        worst = worst.max(rel_err(fd, g.da.as_slice()[i]));
    }
    for i in 0..state.core.b.as_slice().len() {
        let fd = probe(&|s: &mut AdapterState, d| s.core.b.as_mut_slice()[i] += d);
        worst = worst.max(rel_err(fd, g.db.as_slice()[i]));
    }
    match (&state.dash, &g.ddsigma) {
        (Some(d), Some(dd)) => {
            assert_eq!(d.len(), dd.len());
            for (i, &analytic) in dd.iter().enumerate() {
                let fd = probe(&|s: &mut AdapterState, v| s.dash.as_mut().unwrap().dsigma[i] += v);
                worst = worst.max(rel_err(fd, analytic));
            }
        }
        (None, None) => {}
        _ => panic!("dash gradient present without a dash term or vice versa"),
    }
    worst
}
