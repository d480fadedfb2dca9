//! Binomial-logit observation model with analytic derivatives up to third
//! order, plus the observation-model trait the engine is generic over.

use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

/// pi = e^eta / (1 + e^eta), saturating without overflow at extreme eta.
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `expit`; defined on the open interval (0, 1).
pub fn logit(p: f64) -> Result<f64> {
    if p <= 0.0 || p >= 1.0 {
        return Err(Error::Domain(format!("logit requires 0 < p < 1, got {p}")));
    }
    Ok((p / (1.0 - p)).ln())
}

/// log(1 + e^eta) without overflow.
fn log1p_exp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Binomial log-likelihood with the logit link:
/// y eta - N log(1 + e^eta) + log C(N, y). The binomial coefficient is kept
/// so deviance values are comparable across models and samplers.
pub fn log_likelihood(y: u64, n: u64, eta: f64) -> f64 {
    y as f64 * eta - n as f64 * log1p_exp(eta) + ln_binomial(n, y)
}

/// First three derivatives of the log-likelihood in eta:
/// d1 = y - N pi, d2 = -N pi (1-pi), d3 = -N pi (1-pi) (1-2 pi).
pub fn derivatives(y: u64, n: u64, eta: f64) -> (f64, f64, f64) {
    let p = expit(eta);
    let w = n as f64 * p * (1.0 - p);
    (y as f64 - n as f64 * p, -w, -w * (1.0 - 2.0 * p))
}

/// One data row: counts for a geographical unit plus its covariates.
#[derive(Debug, Clone)]
pub struct ObservationRow {
    pub unit_id: usize,
    pub y: u64,
    pub n: u64,
}

impl ObservationRow {
    pub fn new(unit_id: usize, y: u64, n: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Input(format!("unit {unit_id}: population N must be >= 1")));
        }
        if y > n {
            return Err(Error::Input(format!("unit {unit_id}: y = {y} exceeds N = {n}")));
        }
        Ok(ObservationRow { unit_id, y, n })
    }

    /// Observed standardized recruitment ratio y/N.
    pub fn srr(&self) -> f64 {
        self.y as f64 / self.n as f64
    }
}

/// Observation model seen by the inference engine: per-observation
/// log-density in the linear predictor and its first three derivatives.
pub trait Observations {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn log_likelihood(&self, obs: usize, eta: f64) -> f64;

    /// (d1, d2, d3) of the log-density at eta.
    fn derivatives(&self, obs: usize, eta: f64) -> (f64, f64, f64);

    fn log_likelihood_sum(&self, eta: &[f64]) -> f64 {
        eta.iter().enumerate().map(|(o, &e)| self.log_likelihood(o, e)).sum()
    }
}

/// Binomial counts with the logit link. The binomial coefficients are
/// cached at construction; samplers evaluate the likelihood millions of
/// times.
#[derive(Debug, Clone)]
pub struct BinomialObservations {
    pub rows: Vec<ObservationRow>,
    ln_coeff: Vec<f64>,
}

impl BinomialObservations {
    pub fn new(rows: Vec<ObservationRow>) -> Self {
        let ln_coeff = rows.iter().map(|r| ln_binomial(r.n, r.y)).collect();
        BinomialObservations { rows, ln_coeff }
    }
}

impl Observations for BinomialObservations {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn log_likelihood(&self, obs: usize, eta: f64) -> f64 {
        let r = &self.rows[obs];
        r.y as f64 * eta - r.n as f64 * log1p_exp(eta) + self.ln_coeff[obs]
    }

    fn derivatives(&self, obs: usize, eta: f64) -> (f64, f64, f64) {
        let r = &self.rows[obs];
        derivatives(r.y, r.n, eta)
    }
}

/// Gaussian observations with known precision: the conjugate case in which
/// every Laplace-type approximation in the engine is exact. Used both as a
/// real observation model and as the exactness reference in tests.
#[derive(Debug, Clone)]
pub struct GaussianObservations {
    pub values: Vec<f64>,
    pub precisions: Vec<f64>,
}

impl GaussianObservations {
    pub fn new(values: Vec<f64>, precisions: Vec<f64>) -> Result<Self> {
        if values.len() != precisions.len() {
            return Err(Error::DimensionMismatch { expected: values.len(), got: precisions.len() });
        }
        if precisions.iter().any(|&p| p <= 0.0) {
            return Err(Error::Domain("Gaussian observation precisions must be positive".into()));
        }
        Ok(GaussianObservations { values, precisions })
    }
}

impl Observations for GaussianObservations {
    fn len(&self) -> usize {
        self.values.len()
    }

    fn log_likelihood(&self, obs: usize, eta: f64) -> f64 {
        let p = self.precisions[obs];
        let r = eta - self.values[obs];
        0.5 * (p / (2.0 * std::f64::consts::PI)).ln() - 0.5 * p * r * r
    }

    fn derivatives(&self, obs: usize, eta: f64) -> (f64, f64, f64) {
        let p = self.precisions[obs];
        (-p * (eta - self.values[obs]), -p, 0.0)
    }
}
