//! Location-scale joint model for a longitudinal marker with subject-specific,
//! time-dependent residual variability and up to two competing events.
//!
//! The marker follows a linear mixed model whose log residual standard
//! deviation has its own fixed and random effects. Each cause-specific hazard
//! may depend on the current value, the current slope and the current residual
//! standard deviation of the marker. Parameters are estimated by maximum
//! likelihood, integrating the random effects by quasi-Monte Carlo over a
//! Sobol sequence and maximizing with a Marquardt-Levenberg algorithm on
//! finite-difference derivatives.
//!
//! The crate is `no_std` (with `alloc`); IO, configuration and threading live
//! in the `lsjm` companion crate. Parallel finite-difference probes are
//! injected through [`optimizer::ProbeExecutor`].

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod hazard;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod predict;
pub mod qmc;
pub mod roots;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{
    Association, Baseline, CovarianceStructure, Dataset, EventParams, EventSpec, ModelSpec,
    ParameterVector, SubjectData, Term,
};
