use alloc::string::String;

use thiserror::Error;

/// Errors raised by model construction, likelihood evaluation and fitting.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Malformed model or data: missing covariates, invalid times, bad status codes.
    #[error("input error: {0}")]
    Input(String),

    #[error("subject {subject}: covariate `{covariate}` is missing")]
    MissingCovariate { subject: String, covariate: String },

    /// A value outside the domain of a function (e.g. a Weibull hazard at 0 with kappa < 1).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Flat parameter vector does not match the model layout.
    #[error("parameter vector has length {found}, layout expects {expected}")]
    Layout { expected: usize, found: usize },

    #[error("likelihood of subject {subject} is zero or not finite")]
    DegenerateLikelihood { subject: String },

    #[error("finite-difference probe along coordinate {coordinate} is not finite")]
    NonFiniteProbe { coordinate: usize },

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("no posterior mass: {0}")]
    NoPosteriorMass(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
