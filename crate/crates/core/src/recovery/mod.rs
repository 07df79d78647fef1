//! Per-image metric depth recovery: correspondences between monocular
//! values and tie-point depths, the rational model fit, and its application
//! to whole depth maps.

mod correspondence;
mod fit;
mod model;

use thiserror::Error;

use crate::rasters::{DepthKind, RasterError};

pub use correspondence::{build_correspondences, CorrespondencePair, CorrespondenceStats};
pub use fit::{
    fit_linear_init, fit_rational, jacobian_row, residual_rmse, FitOptions, FitReport, Loss,
    HARD_MIN_PAIRS,
};
pub use model::{
    apply_model, denominator_floor, inflate_range, normalize, validate_model, validate_model_with,
    ApplyStats, FitStatus, Monotonicity, RationalModel, DEFAULT_RANGE_INFLATION,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecoveryError {
    #[error("need at least {needed} correspondence pairs, got {got}")]
    InsufficientPairs { needed: usize, got: usize },
    #[error("linear system is rank deficient (mono values nearly constant)")]
    DegenerateSystem,
    #[error("model coefficients are all zero or non-finite")]
    ZeroCoefficients,
    #[error("invalid mono range [{}, {}]", .0[0], .0[1])]
    InvalidRange([f64; 2]),
    #[error("pair {index} has a non-finite value or non-positive depth")]
    InvalidPair { index: usize },
    #[error("cannot recover a {0} depth map")]
    KindMismatch(DepthKind),
    #[error(transparent)]
    Raster(#[from] RasterError),
}
