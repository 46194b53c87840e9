//! Efficient estimation of semivarying coefficient models for longitudinal
//! and clustered data.
//!
//! The model is `Y_ij = X_ij' β + Z_ij' g(T_ij) + ε_ij` with constant
//! coefficients `β` and smooth coefficient functions `g` on `[0, 1]`.
//! Estimation runs in stages:
//!
//! 1. a working-independence B-spline GEE fit for `β` ([`gee`]),
//! 2. local-linear smoothing of the partial residuals for `g` and of the
//!    residual squares and cross-products for the within-subject covariance
//!    ([`smoothers`], [`covariance`]),
//! 3. a feasible-GLS refit with the estimated per-subject covariance, and
//!    updated curve estimates ([`pipeline`]).
//!
//! [`simulate`] and [`harness`] generate synthetic designs and run Monte
//! Carlo studies over the estimator variants.

pub mod config;
pub mod covariance;
pub mod data;
pub mod error;
pub mod gee;
pub mod harness;
pub mod linalg;
pub mod pipeline;
pub mod simulate;
pub mod smoothers;
pub mod splines;

pub use config::{Bandwidth, H3Rule, PipelineConfig, ResidualSource, SplineDim};
pub use covariance::{CovarianceModel, EigenReport};
pub use data::{load_csv, read_csv, save_csv, validate, write_csv, CsvSchema, LongitudinalDataset, Subject, Violation};
pub use error::{Error, Result};
pub use gee::{GeeFit, SeMode, WeightSpec};
pub use harness::{McSummary, Variant};
pub use pipeline::EfficientFitResult;
pub use simulate::{Scenario, SimConfig, SimTruth};
pub use smoothers::{CurveEstimate, Kernel, SmootherKind, SmootherOptions};
pub use splines::SplineBasis;
