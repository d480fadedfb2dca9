//! Latent and hyperparameter marginals: the skew-corrected standardized
//! density per latent component, the optional per-index full Laplace path,
//! interpolant-based hyperparameter marginals, and the final mixture over
//! the hyperparameter grid.

use crate::engine::explore::ThetaExploration;
use crate::engine::gauss::{gaussian_approximation_constrained, GaussianApprox};
use crate::engine::{FitOptions, Problem};
use crate::error::{Error, Result};
use crate::linalg::CubicSpline;
use crate::marginal::{trapezoid, PosteriorMarginal, Target};

/// Skew-corrected log-density of one standardized latent component:
/// -x^2/2 + mean_shift * x + skewness * x^3/6, with the cubic term damped to
/// zero over the outer grid so the density stays integrable.
#[derive(Debug, Clone)]
pub struct SlaDensity {
    pub index: usize,
    pub grid_std: Vec<f64>,
    pub density: Vec<f64>,
    pub mean_shift: f64,
    pub skewness: f64,
    pub fell_back_to_gaussian: bool,
}

fn damp(x: f64, start: f64, end: f64) -> f64 {
    let a = x.abs();
    if a <= start {
        1.0
    } else if a >= end {
        0.0
    } else {
        (end - a) / (end - start)
    }
}

fn count_local_maxima(d: &[f64]) -> usize {
    let n = d.len();
    let mut maxima = 0;
    if n < 3 {
        return 1;
    }
    if d[0] > d[1] {
        maxima += 1;
    }
    for k in 1..n - 1 {
        if d[k] > d[k - 1] && d[k] >= d[k + 1] {
            maxima += 1;
        }
    }
    if d[n - 1] > d[n - 2] {
        maxima += 1;
    }
    maxima
}

/// Simplified Laplace density for latent index `i` at the hyperparameter
/// point of `ga` (which must be enriched).
///
/// The correction terms run over the observation-bearing nodes: for each
/// observation, the regression slope of its linear predictor on x_i plays
/// the role of sigma_j a_ij and the conditional variance of the predictor
/// given x_i weights the mean shift. When every observation sits on its own
/// latent coordinate this is exactly the per-node sum over j != i; an
/// observation depending on x_i alone is the j = i term and is excluded.
pub fn sla_marginal(
    i: usize,
    ga: &GaussianApprox,
    problem: &Problem,
    opts: &FitOptions,
) -> Result<SlaDensity> {
    let cov = ga.covariance.as_ref().ok_or_else(|| Error::MarginalUnavailable("enrich the approximation first".into()))?;
    let sigma = ga.sigma.as_ref().unwrap();
    let d3_obs = ga.d3_obs.as_ref().unwrap();
    let eta_var = ga.eta_var.as_ref().unwrap();
    let n = sigma.len();
    if i >= n {
        return Err(Error::IndexOutOfRange { row: i, col: i, dim: n });
    }

    let si = sigma[i];
    let mut mean_shift = 0.0;
    let mut skewness = 0.0;
    if si > 0.0 {
        for (o, row) in problem.incidence.rows.iter().enumerate() {
            if d3_obs[o] == 0.0 {
                continue;
            }
            if row.len() == 1 && row[0].0 == i {
                continue; // the anchor's own observation node
            }
            let cov_i_eta: f64 = row.iter().map(|&(j, v)| v * cov[i * n + j]).sum();
            let slope = cov_i_eta / si;
            let cond_var = (eta_var[o] - slope * slope).max(0.0);
            mean_shift += 0.5 * cond_var * d3_obs[o] * slope;
            skewness += d3_obs[o] * slope * slope * slope;
        }
    }

    let half = opts.sla_grid_half_width;
    let step = opts.sla_grid_step;
    let count = (2.0 * half / step).round() as usize + 1;
    let grid_std: Vec<f64> = (0..count).map(|k| -half + k as f64 * step).collect();

    let build = |shift: f64, skew: f64| -> Vec<f64> {
        let logd: Vec<f64> = grid_std
            .iter()
            .map(|&x| -0.5 * x * x + shift * x + skew * x * x * x / 6.0 * damp(x, opts.sla_damp_start, half))
            .collect();
        let m = logd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        logd.iter().map(|v| (v - m).exp()).collect()
    };

    let mut density = build(mean_shift, skewness);
    let mut fell_back = false;
    if count_local_maxima(&density) > 1 {
        // skew correction large enough to fabricate a second mode: fall
        // back to the plain Gaussian for this component
        density = build(0.0, 0.0);
        fell_back = true;
    }
    let z = trapezoid(&grid_std, &density);
    for d in density.iter_mut() {
        *d /= z;
    }
    Ok(SlaDensity {
        index: i,
        grid_std,
        density,
        mean_shift: if fell_back { 0.0 } else { mean_shift },
        skewness: if fell_back { 0.0 } else { skewness },
        fell_back_to_gaussian: fell_back,
    })
}

impl SlaDensity {
    /// Map the standardized density onto the natural scale x = mu + sigma s.
    pub fn to_natural(&self, mu: f64, sigma: f64) -> (Vec<f64>, Vec<f64>) {
        let grid: Vec<f64> = self.grid_std.iter().map(|&s| mu + sigma * s).collect();
        let dens: Vec<f64> = self.density.iter().map(|&d| d / sigma).collect();
        (grid, dens)
    }
}

/// Full Laplace marginal for latent index `i`: for each grid value of x_i,
/// re-optimize the remaining field with x_i pinned by an extra constraint
/// and evaluate the joint-to-conditional ratio.
pub fn laplace_marginal(
    i: usize,
    theta: &[f64],
    problem: &Problem,
    ga: &GaussianApprox,
    opts: &FitOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sigma = ga.sigma.as_ref().ok_or_else(|| Error::MarginalUnavailable("enrich the approximation first".into()))?;
    let n = problem.layout.n;
    if i >= n {
        return Err(Error::IndexOutOfRange { row: i, col: i, dim: n });
    }
    let mu_i = ga.mode[i];
    let s_i = sigma[i].max(1e-12);
    let points = opts.la_grid_points.max(5);
    let lo = mu_i - opts.la_range_sds * s_i;
    let hi = mu_i + opts.la_range_sds * s_i;
    let step = (hi - lo) / (points - 1) as f64;

    let mut pin = vec![0.0; n];
    pin[i] = 1.0;

    let mut grid = Vec::with_capacity(points);
    let mut logd = Vec::with_capacity(points);
    let mut init = ga.mode.clone();
    for k in 0..points {
        let v = lo + k as f64 * step;
        init[i] = v;
        let extra = [(pin.clone(), v)];
        match gaussian_approximation_constrained(problem, theta, Some(&init), &extra, opts) {
            Ok(cond) => {
                let loglik = problem.obs.log_likelihood_sum(&cond.eta_mode);
                let prior_x = problem.layout.prior_log_density(&cond.mode, theta)?;
                grid.push(v);
                logd.push(loglik + prior_x - cond.log_gauss_at_mode);
                init = cond.mode;
            }
            Err(_) => {
                // drop the point; restart the warm start from the mode
                init = ga.mode.clone();
                init[i] = v;
            }
        }
    }
    if grid.len() < 5 {
        return Err(Error::LaplaceGridFailure { index: i, surviving: grid.len() });
    }
    let m = logd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut dens: Vec<f64> = logd.iter().map(|v| (v - m).exp()).collect();
    let z = trapezoid(&grid, &dens);
    for d in dens.iter_mut() {
        *d /= z;
    }
    Ok((grid, dens))
}

/// Combine per-hyperparameter-point marginals into the final mixture:
/// sum_k density_k(x) * w_k on a shared natural-scale grid.
pub fn integrate_marginals(
    target: Target,
    per_theta: &[(Vec<f64>, Vec<f64>)],
    weights: &[f64],
) -> Result<PosteriorMarginal> {
    if per_theta.is_empty() || per_theta.len() != weights.len() {
        return Err(Error::MarginalUnavailable("no per-point marginals to integrate".into()));
    }
    if per_theta.len() == 1 {
        // degenerate mixture: keep the component's own grid, avoiding
        // resampling error
        let (grid, dens) = per_theta[0].clone();
        return PosteriorMarginal::from_grid(target, grid, dens);
    }
    let lo = per_theta.iter().map(|(g, _)| g[0]).fold(f64::INFINITY, f64::min);
    let hi = per_theta.iter().map(|(g, _)| *g.last().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::MarginalUnavailable("degenerate grid range".into()));
    }
    let points = 401usize;
    let step = (hi - lo) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|k| lo + k as f64 * step).collect();
    let mut density = vec![0.0; points];
    for ((g, d), &w) in per_theta.iter().zip(weights) {
        for (gi, di) in grid.iter().zip(density.iter_mut()) {
            *di += w * linear_interp(g, d, *gi);
        }
    }
    PosteriorMarginal::from_grid(target, grid, density)
}

fn linear_interp(x: &[f64], y: &[f64], t: f64) -> f64 {
    if t <= x[0] || t >= *x.last().unwrap() {
        return 0.0;
    }
    let mut lo = 0;
    let mut hi = x.len() - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if x[mid] > t {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let f = (t - x[lo]) / (x[hi] - x[lo]);
    y[lo] + f * (y[hi] - y[lo])
}

/// Marginal of each hyperparameter on both the log-precision and natural
/// precision scales.
#[derive(Debug, Clone)]
pub struct HyperMarginal {
    pub label: String,
    pub log_scale: PosteriorMarginal,
    pub natural: PosteriorMarginal,
}

/// Per-axis cubic interpolants of the explored log posterior, combined
/// separably and pushed through the linear map back to each hyperparameter,
/// integrating the other axes out numerically.
pub fn hyperparameter_marginals(
    expl: &ThetaExploration,
    labels: &[String],
) -> Result<Vec<HyperMarginal>> {
    let dim = expl.theta_star.len();
    if dim == 0 {
        return Ok(Vec::new());
    }

    // per-axis density samples in z, on a fine uniform grid
    let mut axis_grids: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let mut axis_dens: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for axis in 0..dim {
        let mut knots: Vec<(f64, f64)> = expl
            .points
            .iter()
            .filter(|p| p.z.iter().enumerate().all(|(j, &v)| j == axis || v == 0.0))
            .map(|p| (p.z[axis], p.log_post))
            .collect();
        knots.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        knots.dedup_by(|a, b| a.0 == b.0);
        if knots.len() < 3 {
            return Err(Error::MarginalUnavailable(format!(
                "axis {axis} has only {} accepted points; need at least 3",
                knots.len()
            )));
        }
        let xs: Vec<f64> = knots.iter().map(|k| k.0).collect();
        let ys: Vec<f64> = knots.iter().map(|k| k.1 - expl.log_post_star).collect();
        let spline = CubicSpline::new(&xs, &ys)?;
        let z_lo = xs[0] - 4.0;
        let z_hi = xs[xs.len() - 1] + 4.0;
        let step = 0.05;
        let count = ((z_hi - z_lo) / step).round() as usize + 1;
        let grid: Vec<f64> = (0..count).map(|k| z_lo + k as f64 * step).collect();
        // force the extrapolated tails to decay so the density integrates
        let lo_val = spline.eval(xs[0]);
        let hi_val = spline.eval(xs[xs.len() - 1]);
        let dens: Vec<f64> = grid
            .iter()
            .map(|&z| {
                let mut lv = spline.eval(z);
                if z < xs[0] {
                    lv = lv.min(lo_val - 0.05 * (xs[0] - z));
                } else if z > xs[xs.len() - 1] {
                    lv = lv.min(hi_val - 0.05 * (z - xs[xs.len() - 1]));
                }
                lv.exp()
            })
            .collect();
        axis_grids.push(grid);
        axis_dens.push(dens);
    }

    let mut out = Vec::with_capacity(dim);
    for h in 0..dim {
        // theta_h(z) = theta*_h + sum_j M_hj z_j, M = V Lambda^{1/2}
        let coeffs: Vec<f64> = (0..dim)
            .map(|j| expl.eigen_vectors[j][h] * expl.eigen_values[j].sqrt())
            .collect();
        let (mut grid, mut dens) = marginal_of_linear_combination(&axis_grids, &axis_dens, &coeffs)?;
        for g in grid.iter_mut() {
            *g += expl.theta_star[h];
        }
        let label = labels.get(h).cloned().unwrap_or_else(|| format!("theta_{h}"));
        let log_scale = PosteriorMarginal::from_grid(Target::Hyperparameter(h), grid.clone(), dens.clone())?;
        // natural precision scale: tau = exp(theta), density / tau
        let tau_grid: Vec<f64> = grid.iter().map(|t| t.exp()).collect();
        for (d, t) in dens.iter_mut().zip(&tau_grid) {
            *d /= t;
        }
        let natural = PosteriorMarginal::from_grid(Target::Hyperparameter(h), tau_grid, dens)?;
        out.push(HyperMarginal { label, log_scale, natural });
    }
    Ok(out)
}

/// Distribution of sum_j c_j z_j for independent z_j sampled on uniform
/// grids, by iterated discrete convolution.
fn marginal_of_linear_combination(
    grids: &[Vec<f64>],
    densities: &[Vec<f64>],
    coeffs: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    // common step: finest scaled step among contributing axes
    let mut h = f64::INFINITY;
    for (g, &c) in grids.iter().zip(coeffs) {
        if c.abs() > 1e-12 {
            h = h.min((g[1] - g[0]) * c.abs());
        }
    }
    if !h.is_finite() {
        return Err(Error::MarginalUnavailable("all combination coefficients are zero".into()));
    }

    let mut acc: Option<(Vec<f64>, Vec<f64>)> = None;
    for ((g, d), &c) in grids.iter().zip(densities).zip(coeffs) {
        if c.abs() <= 1e-12 {
            continue;
        }
        // scaled variable u = c z on the common step
        let (u_lo, u_hi) = if c > 0.0 {
            (c * g[0], c * g[g.len() - 1])
        } else {
            (c * g[g.len() - 1], c * g[0])
        };
        let count = ((u_hi - u_lo) / h).ceil() as usize + 1;
        let ug: Vec<f64> = (0..count).map(|k| u_lo + k as f64 * h).collect();
        let ud: Vec<f64> = ug.iter().map(|&u| linear_interp_sorted(g, d, u / c) / c.abs()).collect();
        acc = Some(match acc {
            None => (ug, ud),
            Some((ag, ad)) => convolve(&ag, &ad, &ug, &ud, h),
        });
    }
    let (grid, mut dens) = acc.unwrap();
    let z = trapezoid(&grid, &dens);
    if z > 0.0 {
        for v in dens.iter_mut() {
            *v /= z;
        }
    }
    Ok((grid, dens))
}

fn linear_interp_sorted(x: &[f64], y: &[f64], t: f64) -> f64 {
    // x may be traversed in either direction depending on the sign of the
    // scaling; handle both orders
    if x[0] < x[x.len() - 1] {
        linear_interp(x, y, t)
    } else {
        let rx: Vec<f64> = x.iter().rev().cloned().collect();
        let ry: Vec<f64> = y.iter().rev().cloned().collect();
        linear_interp(&rx, &ry, t)
    }
}

fn convolve(xa: &[f64], fa: &[f64], xb: &[f64], fb: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let la = fa.len();
    let lb = fb.len();
    let lo = xa[0] + xb[0];
    let len = la + lb - 1;
    let mut out = vec![0.0; len];
    for i in 0..la {
        let fai = fa[i];
        if fai == 0.0 {
            continue;
        }
        for j in 0..lb {
            out[i + j] += fai * fb[j];
        }
    }
    for v in out.iter_mut() {
        *v *= h;
    }
    let grid: Vec<f64> = (0..len).map(|k| lo + k as f64 * h).collect();
    (grid, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::explore::explore_theta;
    use crate::engine::FitOptions;
    use crate::marginal::Target;

    #[test]
    fn integrate_single_component_is_identity() {
        let grid: Vec<f64> = (0..201).map(|k| -5.0 + 0.05 * k as f64).collect();
        let dens: Vec<f64> = grid.iter().map(|x| (-0.5 * x * x).exp()).collect();
        let m = integrate_marginals(Target::Latent(0), &[(grid.clone(), dens)], &[1.0]).unwrap();
        assert!(m.mean.abs() < 1e-6);
        assert!((m.sd - 1.0).abs() < 1e-3);
    }

    #[test]
    fn integrate_symmetric_mixture_has_zero_mean() {
        let comp = |center: f64| {
            let grid: Vec<f64> = (0..241).map(|k| center - 3.0 + 0.025 * k as f64).collect();
            let dens: Vec<f64> = grid.iter().map(|x| (-2.0 * (x - center) * (x - center)).exp()).collect();
            (grid, dens)
        };
        let m = integrate_marginals(Target::Latent(0), &[comp(-1.5), comp(1.5)], &[0.5, 0.5]).unwrap();
        assert!(m.mean.abs() < 1e-8, "mean {}", m.mean);
    }

    #[test]
    fn hyper_marginal_recovers_gaussian_surrogate() {
        // log posterior -theta^2/2: the log-scale marginal should come back
        // with mean 0, sd 1 within the interpolation error budget
        let mut obj = |t: &[f64]| Ok(-0.5 * t[0] * t[0]);
        let opts = FitOptions::default();
        let expl = explore_theta(&mut obj, &[0.0], &opts).unwrap();
        let hm = hyperparameter_marginals(&expl, &["tau".into()]).unwrap();
        assert_eq!(hm.len(), 1);
        let m = &hm[0].log_scale;
        assert!(m.mean.abs() < 0.05, "mean {}", m.mean);
        assert!((m.sd - 1.0).abs() < 0.05, "sd {}", m.sd);
        // 1-D: the marginal is the normalized interpolant itself, so its
        // mode sits at the exploration mode
        let peak = m.grid[m.density.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0];
        assert!(peak.abs() < 0.1);
    }

    #[test]
    fn hyper_marginal_needs_three_points_per_axis() {
        // shallow curvature at the mode but walls just outside: the
        // standardized walk rejects every off-mode point, leaving one knot
        let mut obj = |t: &[f64]| Ok(-0.01 * (t[0].cosh() - 1.0));
        let opts = FitOptions::default();
        let expl = explore_theta(&mut obj, &[0.0], &opts).unwrap();
        assert_eq!(expl.points.len(), 1);
        assert!(matches!(
            hyperparameter_marginals(&expl, &[]),
            Err(Error::MarginalUnavailable(_))
        ));
    }

    #[test]
    fn damping_is_one_inside_and_zero_outside() {
        assert_eq!(damp(2.9, 3.0, 6.0), 1.0);
        assert_eq!(damp(6.0, 3.0, 6.0), 0.0);
        assert!((damp(4.5, 3.0, 6.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bimodality_detector_counts_maxima() {
        assert_eq!(count_local_maxima(&[0.1, 0.5, 0.2]), 1);
        assert_eq!(count_local_maxima(&[0.5, 0.1, 0.5]), 2);
        assert_eq!(count_local_maxima(&[0.1, 0.5, 0.2, 0.6, 0.1]), 2);
    }
}
