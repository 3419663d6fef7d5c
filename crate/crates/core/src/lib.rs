//! Desk-scale laboratory for task-specific directions (TSDs) in low-rank
//! adaptation.
//!
//! A weight update `ΔW` is read in the coordinate system of the pretrained
//! weight's SVD: each core direction `u_i v_iᵀ` gets a change rate
//! `|u_iᵀ ΔW v_i| / (σ_i + ε)`, and the directions with the largest rates are
//! the task-specific ones. On top of that analysis the crate implements
//! plain LoRA plus three TSD-aware variants:
//!
//! * **LoRA-Dash** trains LoRA for a short pre-launch phase, picks the top
//!   change-rate directions, then learns a scalar coordinate change along
//!   each of them alongside `AB`.
//! * **LoRA-Init** moves the selected SVD components of `W` into the
//!   adapter (`A = Ū Σ̄^{1/2}`, `B = Σ̄^{1/2} V̄ᵀ`) and freezes the residual.
//! * **LoRA-TSD** does both.
//!
//! Everything runs on small linear/MLP models whose optimal weights are
//! planted, so ground-truth directions are known exactly.

pub mod adapters;
pub mod config;
mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod spectral;

pub use error::{Error, Result};
pub use spectral::Matrix;
