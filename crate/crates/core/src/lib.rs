//! Approximate Bayesian inference for latent Gaussian structured additive
//! regression models with binomial-logit observations: Gaussian Markov
//! random field priors, nested Laplace approximations with hyperparameter
//! grid exploration, simplified Laplace latent marginals, numerical
//! integration, and DIC-based model comparison — together with brute-force
//! quadrature and Metropolis oracles used for validation.

pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod gmrf;
pub mod likelihood;
pub mod linalg;
pub mod marginal;
pub mod model;
pub mod oracle;
pub mod priors;

pub use error::{Error, Result};
