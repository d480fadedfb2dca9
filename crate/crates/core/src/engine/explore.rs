//! Hyperparameter posterior exploration: quasi-Newton mode search with
//! finite-difference gradients, a finite-difference negative Hessian at the
//! mode, and the standardized-coordinate grid walk that selects the
//! integration points.

use crate::engine::FitOptions;
use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigen, DenseSym};

/// One accepted exploration point.
#[derive(Debug, Clone)]
pub struct ThetaPoint {
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
    pub log_post: f64,
    /// Equal-area weight, delta_z^dim.
    pub weight_area: f64,
}

/// Mode, curvature, and accepted grid of the hyperparameter posterior.
#[derive(Debug, Clone)]
pub struct ThetaExploration {
    pub theta_star: Vec<f64>,
    pub log_post_star: f64,
    /// Negative Hessian of the log posterior at the mode.
    pub neg_hessian: DenseSym,
    /// Eigenvalues of Sigma = H^{-1}, matching `eigen_vectors` columns.
    pub eigen_values: Vec<f64>,
    pub eigen_vectors: Vec<Vec<f64>>,
    pub points: Vec<ThetaPoint>,
    /// Accepted offsets per axis, including 0, sorted ascending.
    pub axis_offsets: Vec<Vec<f64>>,
    pub delta_z: f64,
    pub delta_pi: f64,
    pub warnings: Vec<String>,
}

impl ThetaExploration {
    /// theta(z) = theta* + V Lambda^{1/2} z.
    pub fn theta_of_z(&self, z: &[f64]) -> Vec<f64> {
        let dim = self.theta_star.len();
        let mut theta = self.theta_star.clone();
        for (j, &zj) in z.iter().enumerate() {
            let scale = self.eigen_values[j].sqrt();
            for i in 0..dim {
                theta[i] += self.eigen_vectors[j][i] * scale * zj;
            }
        }
        theta
    }

    /// Normalized mixture weights over the accepted points:
    /// w_k proportional to exp(log_post_k - max) * area_k.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let max = self.points.iter().map(|p| p.log_post).fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = self.points.iter().map(|p| (p.log_post - max).exp() * p.weight_area).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    }
}

fn gradient(
    objective: &mut dyn FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; theta.len()];
    let mut t = theta.to_vec();
    for i in 0..theta.len() {
        t[i] = theta[i] + step;
        let fp = objective(&t)?;
        t[i] = theta[i] - step;
        let fm = objective(&t)?;
        t[i] = theta[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    Ok(g)
}

/// Quasi-Newton (BFGS) ascent of `objective` starting at `init`. Terminates
/// when the finite-difference gradient max-norm drops below `grad_tol`.
pub fn find_mode_theta(
    objective: &mut dyn FnMut(&[f64]) -> Result<f64>,
    init: &[f64],
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    let dim = init.len();
    if dim == 0 {
        return Ok(Vec::new());
    }
    let mut theta = init.to_vec();
    let mut f = objective(&theta)?;
    let mut best = (theta.clone(), f);
    let mut g = gradient(objective, &theta, opts.grad_step)?;

    // inverse-Hessian approximation of the negated objective
    let mut h = vec![0.0; dim * dim];
    for i in 0..dim {
        h[i * dim + i] = 1.0;
    }

    for _iter in 0..opts.max_quasi_newton {
        let gnorm = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if gnorm < opts.grad_tol {
            return Ok(theta);
        }
        // ascent direction d = H g
        let mut d = vec![0.0; dim];
        for i in 0..dim {
            for j in 0..dim {
                d[i] += h[i * dim + j] * g[j];
            }
        }
        let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        if slope <= 0.0 {
            // reset to steepest ascent if the approximation went bad
            for i in 0..dim {
                for j in 0..dim {
                    h[i * dim + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
            d = g.clone();
        }
        let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();

        // backtracking line search with an Armijo condition
        let mut alpha = 1.0;
        let mut accepted = false;
        let mut theta_new = theta.clone();
        let mut f_new = f;
        for _ in 0..30 {
            for i in 0..dim {
                theta_new[i] = theta[i] + alpha * d[i];
            }
            match objective(&theta_new) {
                Ok(v) if v.is_finite() && v >= f + 1e-4 * alpha * slope => {
                    f_new = v;
                    accepted = true;
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        if !accepted {
            // gradient too small to make progress at machine precision
            if gnorm < 10.0 * opts.grad_tol {
                return Ok(theta);
            }
            return Err(Error::ModeSearchFailure { best_point: best.0, best_value: best.1 });
        }

        let g_new = gradient(objective, &theta_new, opts.grad_step)?;
        // BFGS update on the minimization problem: s = step, y = grad(-f) change
        let s: Vec<f64> = theta_new.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(old, new)| old - new).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            // H = (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let mut hy = vec![0.0; dim];
            for i in 0..dim {
                for j in 0..dim {
                    hy[i] += h[i * dim + j] * y[j];
                }
            }
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let coeff = rho * (1.0 + rho * yhy);
            for i in 0..dim {
                for j in 0..dim {
                    h[i * dim + j] += coeff * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        theta = theta_new;
        f = f_new;
        g = g_new;
        if f > best.1 {
            best = (theta.clone(), f);
        }
    }

    let g_final = gradient(objective, &theta, opts.grad_step)?;
    if g_final.iter().map(|v| v.abs()).fold(0.0, f64::max) < opts.grad_tol {
        Ok(theta)
    } else {
        Err(Error::ModeSearchFailure { best_point: best.0, best_value: best.1 })
    }
}

/// Negative Hessian by central second differences.
fn neg_hessian(
    objective: &mut dyn FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    f0: f64,
    step: f64,
) -> Result<DenseSym> {
    let dim = theta.len();
    let mut h = DenseSym::zeros(dim);
    let mut t = theta.to_vec();
    for i in 0..dim {
        t[i] = theta[i] + step;
        let fp = objective(&t)?;
        t[i] = theta[i] - step;
        let fm = objective(&t)?;
        t[i] = theta[i];
        h.set(i, i, -(fp - 2.0 * f0 + fm) / (step * step));
    }
    for i in 0..dim {
        for j in (i + 1)..dim {
            let mut eval = |si: f64, sj: f64| -> Result<f64> {
                t[i] = theta[i] + si * step;
                t[j] = theta[j] + sj * step;
                let v = objective(&t);
                t[i] = theta[i];
                t[j] = theta[j];
                v
            };
            let fpp = eval(1.0, 1.0)?;
            let fpm = eval(1.0, -1.0)?;
            let fmp = eval(-1.0, 1.0)?;
            let fmm = eval(-1.0, -1.0)?;
            h.set(i, j, -(fpp - fpm - fmp + fmm) / (4.0 * step * step));
        }
    }
    Ok(h)
}

/// Explore the log posterior around its mode in standardized coordinates:
/// walk each eigen-axis in steps of `delta_z` while the log-density deficit
/// against the mode stays below `delta_pi`; for one or two dimensions the
/// tensor grid of accepted per-axis offsets is filled as well, keeping the
/// combinations that pass the same rule.
pub fn explore_theta(
    objective: &mut dyn FnMut(&[f64]) -> Result<f64>,
    theta_star: &[f64],
    opts: &FitOptions,
) -> Result<ThetaExploration> {
    let dim = theta_star.len();
    let mut warnings = Vec::new();
    let log_post_star = objective(theta_star)?;

    if dim == 0 {
        return Ok(ThetaExploration {
            theta_star: Vec::new(),
            log_post_star,
            neg_hessian: DenseSym::zeros(0),
            eigen_values: Vec::new(),
            eigen_vectors: Vec::new(),
            points: vec![ThetaPoint { z: Vec::new(), theta: Vec::new(), log_post: log_post_star, weight_area: 1.0 }],
            axis_offsets: Vec::new(),
            delta_z: opts.delta_z,
            delta_pi: opts.delta_pi,
            warnings,
        });
    }

    let h = neg_hessian(objective, theta_star, log_post_star, opts.hess_step)?;
    let (h_vals, h_vecs) = jacobi_eigen(&h);
    if h_vals.iter().any(|&v| v <= 0.0) {
        return Err(Error::NonConcaveMode);
    }
    // Sigma = H^{-1} shares eigenvectors with H; eigenvalues invert
    let eigen_values: Vec<f64> = h_vals.iter().map(|v| 1.0 / v).collect();
    let eigen_vectors = h_vecs;

    let expl_stub = ThetaExploration {
        theta_star: theta_star.to_vec(),
        log_post_star,
        neg_hessian: h.clone(),
        eigen_values: eigen_values.clone(),
        eigen_vectors: eigen_vectors.clone(),
        points: Vec::new(),
        axis_offsets: Vec::new(),
        delta_z: opts.delta_z,
        delta_pi: opts.delta_pi,
        warnings: Vec::new(),
    };

    let mut accepts = |z: &[f64]| -> Result<Option<(Vec<f64>, f64)>> {
        let theta = expl_stub.theta_of_z(z);
        match objective(&theta) {
            Ok(lp) if lp.is_finite() && log_post_star - lp < opts.delta_pi => Ok(Some((theta, lp))),
            Ok(_) => Ok(None),
            Err(_) => Ok(None), // unevaluable point: treat as rejected
        }
    };

    let mut points: Vec<ThetaPoint> = Vec::new();
    let weight_area = opts.delta_z.powi(dim as i32);
    points.push(ThetaPoint {
        z: vec![0.0; dim],
        theta: theta_star.to_vec(),
        log_post: log_post_star,
        weight_area,
    });

    let mut axis_offsets: Vec<Vec<f64>> = vec![vec![0.0]; dim];
    for axis in 0..dim {
        for dir in [1.0f64, -1.0] {
            for step in 1..=opts.max_walk_steps {
                let mut z = vec![0.0; dim];
                z[axis] = dir * step as f64 * opts.delta_z;
                match accepts(&z)? {
                    Some((theta, lp)) => {
                        axis_offsets[axis].push(z[axis]);
                        points.push(ThetaPoint { z, theta, log_post: lp, weight_area });
                        if step == opts.max_walk_steps {
                            warnings.push(format!(
                                "axis {axis} walk hit the {} step cap; posterior may be very flat",
                                opts.max_walk_steps
                            ));
                        }
                    }
                    None => break,
                }
            }
        }
        axis_offsets[axis].sort_by(|a, b| a.partial_cmp(b).unwrap());
    }

    if dim == 2 {
        for &za in &axis_offsets[0] {
            for &zb in &axis_offsets[1] {
                if za == 0.0 || zb == 0.0 {
                    continue; // axis points already collected
                }
                let z = vec![za, zb];
                if let Some((theta, lp)) = accepts(&z)? {
                    points.push(ThetaPoint { z, theta, log_post: lp, weight_area });
                }
            }
        }
    }

    // deterministic order regardless of walk sequence
    points.sort_by(|a, b| {
        a.z.iter()
            .zip(&b.z)
            .find_map(|(x, y)| x.partial_cmp(y).filter(|o| *o != std::cmp::Ordering::Equal))
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    Ok(ThetaExploration {
        theta_star: theta_star.to_vec(),
        log_post_star,
        neg_hessian: h,
        eigen_values,
        eigen_vectors,
        points,
        axis_offsets,
        delta_z: opts.delta_z,
        delta_pi: opts.delta_pi,
        warnings,
    })
}
