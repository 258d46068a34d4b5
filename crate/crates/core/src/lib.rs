//! Linear models for two-factor repeated measures whose within-subject
//! correlation is the Kronecker product of two stationary factor-specific
//! correlation matrices (LEAR, AR(1), damped exponential and spatial families).
//!
//! The variance is profiled out of the Gaussian likelihood and the remaining
//! mean and correlation parameters are estimated by a box-constrained
//! Newton–Raphson ascent.

pub mod corr;
pub mod data;
pub mod error;
pub mod fit;
pub mod inference;
pub mod kron;
pub mod likelihood;
pub mod simulate;
pub mod surface;

pub use corr::{build_factor_matrix, eval_family, lear_corr, CorrFamily, CorrSpec, DistanceConstants};
pub use data::{Dataset, Factor2Layout, IngestConfig, SubjectBlock};
pub use error::{KronError, Result};
pub use fit::{fit_ml, negative_variance_diagnostic, FitOptions, FitResult};
pub use inference::{backward_select, structure_grid, wald_f_test};
pub use likelihood::{loglik, profile_loglik, profile_sigma2, SigmaSqEstimate, ThetaVector};
