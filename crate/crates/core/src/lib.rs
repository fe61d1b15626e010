//! Desk-scale laboratory for training-data attribution.
//!
//! The crate trains small differentiable classifiers, scores every training
//! sample with a family of influence estimators (standard influence function
//! via explicit inverse or LiSSA, TracIn, and the validation-minima /
//! flat-validation-minima quadratic forms), checks those scores against a
//! leave-one-out retraining oracle, and evaluates them on mislabeled-sample
//! detection, relabeling, and pseudo-label recall tasks.
//!
//! Modules mirror the pipeline stages:
//!
//! - [`numerics`]: dense linear algebra and a counter-based RNG
//! - [`model`]: per-sample loss / gradient / Hessian-vector products
//! - [`optim`]: SGD, SAM, validation tuning, sharpness estimation
//! - [`data`]: synthetic Gaussian-mixture datasets with label noise
//! - [`influence`]: all influence estimators and score reports
//! - [`oracle`]: leave-one-out ground truth, sign error, and error bounds
//! - [`eval`]: detection/relabeling/recall metrics and experiment protocols

pub mod data;
pub mod error;
pub mod eval;
pub mod influence;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod oracle;

pub use error::{Error, Result};
