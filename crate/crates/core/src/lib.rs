//! Foundation priors: a user's primitive prior updated with synthetic data
//! from a pluggable generator through a tempered likelihood,
//! `ρ(θ | D_s, λ) ∝ π(θ) L(D_s|θ)^λ`.
//!
//! The crate covers anticipated-data sampling and divergences, the prompt
//! refinement loop, the tempered update in conjugate and grid forms,
//! calibration of the trust parameter λ against real data, and downstream
//! estimators (two-step random-coefficients logit, partially linear model
//! with generated covariates, Gaussian-process refinement).

pub mod anticipation;
pub mod calibration;
pub mod error;
pub mod estimators;
pub mod foundation;
pub mod models;
pub mod numeric;
pub mod promptloop;
pub mod rng;
pub mod serde_ext;

pub use error::{Error, Result};
pub use models::{
    condition_prior, log_likelihood, log_prior_density, power_update, sample_prior, Dataset, GridAxis, GridPrior,
    LikelihoodSpec, Observation, ParameterPoint, PriorSpec, Provenance,
};
