//! Markov-switching dynamic matrix factor models.
//!
//! Observations are `p × q` matrices `Y_t = R F_t Cᵀ + E_t` whose loadings and
//! factor dynamics `F_t = B + Φ F_{t-1} Γᵀ + ε_t` switch with a hidden Markov
//! regime. The crate provides simulation, a collapsed (Kim) filter and smoother,
//! EM estimation with automatic initialization, evaluation metrics, and
//! one-step forecasting.

// Negated comparisons are how NaN inputs are made to fail validity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assign;
pub mod em;
pub mod error;
pub mod estep;
pub mod filter;
pub mod forecast;
pub mod init;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod mstep;
pub mod serde_mat;
pub mod simulate;
pub mod smoother;

pub use em::{fit, observed_loglik, FitConfig, FitResult, InitStrategy};
pub use error::{Error, Result};
pub use filter::{filter_pass, FilterConfig, FilterOutput};
pub use forecast::{rolling_eval, ForecastConfig, ForecastMethod, ForecastReport};
pub use linalg::{Mat, SymMat, Vector};
pub use metrics::{evaluate, evaluate_parts, rand_index, EvalReport};
pub use model::{
    normalize_identification, spectral_radius_switching, stationary_dist, Dims, MatrixSeries, ModelParams,
    RegimeParams, StationaryDist,
};
pub use simulate::{simulate, ErrorDist, ModelVariant, SimConfig, SimOutput};
pub use smoother::{smooth_pass, SmoothOutput};
