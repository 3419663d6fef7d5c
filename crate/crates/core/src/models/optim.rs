use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8, no weight decay.
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::arg(format!("unknown optimizer {other:?}"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Slot {
    pub fn reset(&mut self) {
        *self = Slot::default();
    }
}

/// In-place update `params -= lr · step(grads)`.
pub fn apply(kind: OptimizerKind, lr: f64, slot: &mut Slot, params: &mut [f64], grads: &[f64]) {
    debug_assert_eq!(params.len(), grads.len());
    match kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam => {
            if slot.m.len() != params.len() {
                slot.m = vec![0.0; params.len()];
                slot.v = vec![0.0; params.len()];
                slot.t = 0;
            }
            slot.t += 1;
            let c1 = 1.0 - BETA1.powi(slot.t);
            let c2 = 1.0 - BETA2.powi(slot.t);
            for ((p, g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}
