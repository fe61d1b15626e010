//! Shared error type. Numeric routines never return NaN/Inf silently; they
//! surface a typed error instead.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix not positive definite: nonpositive pivot at index {pivot}")]
    NotPositiveDefinite { pivot: usize },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty set passed to {0}")]
    EmptySet(&'static str),

    #[error("training diverged at step {step}; last finite risk {last_risk}")]
    Divergence { step: usize, last_risk: f64 },

    #[error("iterate norm grew past {limit:.1e} at depth {depth}; increase the lissa scale")]
    LissaDiverged { depth: usize, limit: f64 },

    #[error("parameter count {params} exceeds explicit-Hessian cap {cap}; use the lissa or diag_fisher backend")]
    HessianCapExceeded { params: usize, cap: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
