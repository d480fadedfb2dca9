//! Gridded posterior marginals with trapezoid-rule summaries.

use crate::error::{Error, Result};

/// What a marginal describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Latent(usize),
    Hyperparameter(usize),
    LinearPredictor(usize),
}

/// A density on a grid, normalized to integrate to one, with the summary
/// statistics used in reports.
#[derive(Debug, Clone)]
pub struct PosteriorMarginal {
    pub target: Target,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
}

/// Trapezoid integral of `f` sampled on `x`.
pub fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2)
        .zip(f.windows(2))
        .map(|(xw, fw)| 0.5 * (xw[1] - xw[0]) * (fw[0] + fw[1]))
        .sum()
}

impl PosteriorMarginal {
    /// Normalize a non-negative grid function into a marginal and compute
    /// its summaries.
    pub fn from_grid(target: Target, grid: Vec<f64>, mut density: Vec<f64>) -> Result<Self> {
        if grid.len() != density.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: density.len() });
        }
        if grid.len() < 3 {
            return Err(Error::MarginalUnavailable("grid has fewer than 3 points".into()));
        }
        for w in grid.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::MarginalUnavailable("marginal grid must be increasing".into()));
            }
        }
        for d in density.iter_mut() {
            if !d.is_finite() || *d < 0.0 {
                *d = 0.0;
            }
        }
        let z = trapezoid(&grid, &density);
        if z <= 0.0 || !z.is_finite() {
            return Err(Error::MarginalUnavailable("density mass is zero or non-finite".into()));
        }
        for d in density.iter_mut() {
            *d /= z;
        }
        let mean = trapezoid(&grid, &grid.iter().zip(&density).map(|(x, d)| x * d).collect::<Vec<_>>());
        let ex2 = trapezoid(&grid, &grid.iter().zip(&density).map(|(x, d)| x * x * d).collect::<Vec<_>>());
        let var = (ex2 - mean * mean).max(0.0);
        let sd = var.sqrt();
        let q025 = quantile_from_density(&grid, &density, 0.025);
        let q500 = quantile_from_density(&grid, &density, 0.5);
        let q975 = quantile_from_density(&grid, &density, 0.975);
        Ok(PosteriorMarginal { target, grid, density, mean, sd, q025, q500, q975 })
    }

    /// Summaries of exp(x) under this marginal, computed by transforming the
    /// grid rather than exponentiating the summaries.
    pub fn exp_summaries(&self) -> (f64, f64, f64) {
        let integrand: Vec<f64> = self.grid.iter().zip(&self.density).map(|(x, d)| x.exp() * d).collect();
        let mean = trapezoid(&self.grid, &integrand);
        (mean, self.q025.exp(), self.q975.exp())
    }

    /// P(X <= t) by trapezoid accumulation.
    pub fn cdf(&self, t: f64) -> f64 {
        if t <= self.grid[0] {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 1..self.grid.len() {
            let (x0, x1) = (self.grid[i - 1], self.grid[i]);
            if t >= x1 {
                acc += 0.5 * (x1 - x0) * (self.density[i - 1] + self.density[i]);
            } else {
                let frac = (t - x0) / (x1 - x0);
                let dt = self.density[i - 1] + frac * (self.density[i] - self.density[i - 1]);
                acc += 0.5 * (t - x0) * (self.density[i - 1] + dt);
                break;
            }
        }
        acc.min(1.0)
    }
}

/// Inverse-CDF quantile. Inside a cell the density is linear, so the mass
/// accumulates quadratically; inverting that exactly keeps `cdf` and the
/// quantile function mutual inverses.
pub fn quantile_from_density(grid: &[f64], density: &[f64], p: f64) -> f64 {
    let mut acc = 0.0;
    for i in 1..grid.len() {
        let w = grid[i] - grid[i - 1];
        let (d0, d1) = (density[i - 1], density[i]);
        let seg = 0.5 * w * (d0 + d1);
        if acc + seg >= p {
            let need = p - acc;
            if seg <= 0.0 {
                return grid[i - 1];
            }
            // solve d0 s + (d1-d0) s^2 / (2w) = need for s in [0, w]
            let slope = (d1 - d0) / w;
            let s = if slope.abs() < 1e-14 * (d0.abs() + 1e-300) || slope.abs() < 1e-300 {
                need / d0.max(1e-300)
            } else {
                let disc = (d0 * d0 + 2.0 * slope * need).max(0.0);
                (-d0 + disc.sqrt()) / slope
            };
            return grid[i - 1] + s.clamp(0.0, w);
        }
        acc += seg;
    }
    *grid.last().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_marginal(mean: f64, sd: f64) -> PosteriorMarginal {
        let grid: Vec<f64> = (0..601).map(|i| mean - 6.0 * sd + i as f64 * 0.02 * sd).collect();
        let dens: Vec<f64> = grid.iter().map(|x| (-0.5 * ((x - mean) / sd).powi(2)).exp()).collect();
        PosteriorMarginal::from_grid(Target::Latent(0), grid, dens).unwrap()
    }

    #[test]
    fn summaries_of_standard_normal() {
        let m = gaussian_marginal(0.0, 1.0);
        assert!(m.mean.abs() < 1e-8);
        assert!((m.sd - 1.0).abs() < 1e-4);
        assert!((m.q500 - 0.0).abs() < 1e-6);
        assert!((m.q025 + 1.959964).abs() < 1e-3);
        assert!((m.q975 - 1.959964).abs() < 1e-3);
        let total = trapezoid(&m.grid, &m.density);
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantiles_are_monotone() {
        let m = gaussian_marginal(2.0, 0.5);
        assert!(m.q025 < m.q500 && m.q500 < m.q975);
    }

    #[test]
    fn exp_summaries_use_the_grid() {
        // lognormal mean is exp(mu + sd^2/2) > exp(mu)
        let m = gaussian_marginal(0.0, 0.5);
        let (mean, lo, hi) = m.exp_summaries();
        assert!((mean - (0.125f64).exp()).abs() < 1e-3);
        assert!(lo < 1.0 && hi > 1.0);
        assert!(mean >= m.mean.exp());
    }

    #[test]
    fn cdf_matches_quantile() {
        let m = gaussian_marginal(0.0, 1.0);
        let q = quantile_from_density(&m.grid, &m.density, 0.3);
        assert!((m.cdf(q) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn degenerate_grid_rejected() {
        let r = PosteriorMarginal::from_grid(Target::Latent(0), vec![0.0, 1.0], vec![1.0, 1.0]);
        assert!(r.is_err());
    }
}
