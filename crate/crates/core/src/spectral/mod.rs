//! Dense matrices, thin SVD, projections onto core/global bases and the
//! change rates of a weight update along `W`'s core directions.

pub mod io;
mod matrix;
mod rates;
mod svd;

pub use matrix::{dot, frob_norm, Matrix};
pub use rates::{
    change_rates, project_global, scaled_rate, top_k, ChangeRates, ProjectionCoeffs,
    DEFAULT_EPSILON,
};
pub use svd::{svd, SvdFactors};
