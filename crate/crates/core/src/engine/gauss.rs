//! Gaussian approximation of the latent conditional posterior at a fixed
//! hyperparameter point: Newton iterations on the latent field with linear
//! constraints imposed by conditioning-by-kriging, plus the constrained
//! covariance quantities the marginal approximations consume.

use crate::engine::{FitOptions, Problem};
use crate::error::{Error, Result};
use crate::gmrf::{cholesky, CholeskyFactor, SymmetricSparseMatrix};
use crate::linalg::{DenseChol, DenseSym};

const LN_2PI: f64 = 1.8378770664093453;

/// Mode, curvature, and normalization of the Gaussian approximation
/// to pi(x | theta, y), restricted to the constraint subspace.
#[derive(Debug)]
pub struct GaussianApprox {
    pub theta: Vec<f64>,
    /// Constrained posterior mode x*(theta); also the approximation mean.
    pub mode: Vec<f64>,
    pub eta_mode: Vec<f64>,
    pub factor: CholeskyFactor,
    /// log of the approximation's density at its own mode, w.r.t. the
    /// surface measure on the constraint subspace.
    pub log_gauss_at_mode: f64,
    pub newton_iters: usize,
    /// W = Q^{-1} C^T, one column per constraint.
    w_cols: Vec<Vec<f64>>,
    /// Cholesky of S = C Q^{-1} C^T.
    s_chol: Option<DenseChol>,
    /// Constrained marginal standard deviations (after `enrich`).
    pub sigma: Option<Vec<f64>>,
    /// Constrained covariance, row-major n x n (after `enrich`).
    pub covariance: Option<Vec<f64>>,
    /// Third log-likelihood derivative per observation at the mode
    /// (after `enrich`).
    pub d3_obs: Option<Vec<f64>>,
    /// Var(eta_o) under the constrained approximation (after `enrich`).
    pub eta_var: Option<Vec<f64>>,
}

fn assemble_precision(
    problem: &Problem,
    q_prior: &SymmetricSparseMatrix,
    neg_d2: &[f64],
) -> Result<SymmetricSparseMatrix> {
    let mut q = q_prior.clone();
    for (o, row) in problem.incidence.rows.iter().enumerate() {
        let w = neg_d2[o];
        if w == 0.0 {
            continue;
        }
        for (ai, &(ji, vi)) in row.iter().enumerate() {
            for &(jj, vj) in &row[ai..] {
                if ji <= jj {
                    q.add_entry(ji, jj, w * vi * vj)?;
                } else {
                    q.add_entry(jj, ji, w * vi * vj)?;
                }
            }
        }
    }
    Ok(q)
}

/// Project onto the constraint manifold {x : C x = rhs} using the
/// covariance implied by `w_cols` and `s_chol`.
fn project(
    x: &mut [f64],
    constraints: &[Vec<f64>],
    rhs: &[f64],
    w_cols: &[Vec<f64>],
    s_chol: &DenseChol,
) {
    let k = constraints.len();
    if k == 0 {
        return;
    }
    let mut resid = vec![0.0; k];
    for (a, c) in constraints.iter().enumerate() {
        let cx: f64 = c.iter().zip(x.iter()).map(|(ci, xi)| ci * xi).sum();
        resid[a] = cx - rhs[a];
    }
    let coeff = s_chol.solve(&resid);
    for (a, w) in w_cols.iter().enumerate() {
        let ca = coeff[a];
        for (xi, wi) in x.iter_mut().zip(w.iter()) {
            *xi -= ca * wi;
        }
    }
}

/// Newton mode finding for pi(x | theta, y) with optional extra linear
/// constraints (used by the per-index Laplace path to pin one coordinate).
pub fn gaussian_approximation_constrained(
    problem: &Problem,
    theta: &[f64],
    init: Option<&[f64]>,
    extra_constraints: &[(Vec<f64>, f64)],
    opts: &FitOptions,
) -> Result<GaussianApprox> {
    let n = problem.layout.n;
    let mut q_prior = problem.layout.prior_precision(theta)?;

    let mut constraints: Vec<Vec<f64>> = problem.layout.constraint_rows.clone();
    let mut rhs: Vec<f64> = vec![0.0; constraints.len()];
    for (c, e) in extra_constraints {
        constraints.push(c.clone());
        rhs.push(*e);
    }
    let k = constraints.len();

    // Penalize the constrained directions in the precision before
    // factorizing. On the manifold {Cx = rhs} this changes nothing (B^T c =
    // 0 for any null-space basis B), but it removes the exact singularities
    // that arise when several intrinsic blocks share a null direction.
    if k > 0 {
        let diag_mean = (0..n).map(|i| q_prior.get(i, i)).sum::<f64>() / n as f64;
        let kappa = diag_mean.abs().max(1.0);
        for c in &constraints {
            let norm2: f64 = c.iter().map(|v| v * v).sum();
            if norm2 <= 0.0 {
                continue;
            }
            let support: Vec<usize> = (0..n).filter(|&i| c[i] != 0.0).collect();
            for (a, &i) in support.iter().enumerate() {
                for &j in &support[a..] {
                    q_prior.add_entry(i, j, kappa * c[i] * c[j] / norm2)?;
                }
            }
        }
    }

    let mut x = match init {
        Some(v) => v.to_vec(),
        None => vec![0.0; n],
    };
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.len() });
    }

    let mut last_step = f64::INFINITY;
    let mut result: Option<(CholeskyFactor, Vec<Vec<f64>>, Option<DenseChol>)> = None;
    let mut iters = 0;
    for iter in 0..opts.max_newton {
        iters = iter + 1;
        let eta = problem.incidence.eta(&x);
        let n_obs = problem.incidence.n_obs();
        let mut neg_d2 = vec![0.0; n_obs];
        let mut grad_term = vec![0.0; n]; // A^T (d1 - d2 * eta)
        for o in 0..n_obs {
            let (d1, d2, _) = problem.obs.derivatives(o, eta[o]);
            neg_d2[o] = -d2;
            let coeff = d1 - d2 * eta[o];
            for &(j, v) in &problem.incidence.rows[o] {
                grad_term[j] += coeff * v;
            }
        }
        let q = assemble_precision(problem, &q_prior, &neg_d2)?;
        let factor = cholesky(&q, 0.0)?;
        let mut x_new = factor.solve(&grad_term)?;

        let w_cols: Vec<Vec<f64>> = constraints
            .iter()
            .map(|c| factor.solve(c))
            .collect::<Result<_>>()?;
        let s_chol = if k > 0 {
            let mut s = DenseSym::zeros(k);
            for a in 0..k {
                for b in a..k {
                    let dot: f64 = constraints[a].iter().zip(w_cols[b].iter()).map(|(c, w)| c * w).sum();
                    s.set(a, b, dot);
                }
            }
            Some(DenseChol::new(&s)?)
        } else {
            None
        };
        if let Some(sc) = &s_chol {
            project(&mut x_new, &constraints, &rhs, &w_cols, sc);
        }

        last_step = x_new.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = x_new;
        result = Some((factor, w_cols, s_chol));
        if last_step < opts.newton_tol {
            break;
        }
    }
    if last_step >= opts.newton_tol {
        return Err(Error::NewtonDivergence { iters, last_step });
    }
    let (factor, w_cols, s_chol) = result.expect("at least one Newton iteration ran");

    // log pi_G at the mode on the constraint subspace:
    // -((n-k)/2) ln 2pi + 1/2 ln det Q + 1/2 ln det(C Q^-1 C^T) - 1/2 ln det(C C^T)
    let mut log_gauss = -0.5 * (n as f64 - k as f64) * LN_2PI + 0.5 * factor.log_det();
    if k > 0 {
        log_gauss += 0.5 * s_chol.as_ref().unwrap().log_det();
        let mut gram = DenseSym::zeros(k);
        for a in 0..k {
            for b in a..k {
                let dot: f64 = constraints[a].iter().zip(constraints[b].iter()).map(|(x1, x2)| x1 * x2).sum();
                gram.set(a, b, dot);
            }
        }
        log_gauss -= 0.5 * DenseChol::new(&gram)?.log_det();
    }

    let eta_mode = problem.incidence.eta(&x);
    Ok(GaussianApprox {
        theta: theta.to_vec(),
        mode: x,
        eta_mode,
        factor,
        log_gauss_at_mode: log_gauss,
        newton_iters: iters,
        w_cols,
        s_chol,
        sigma: None,
        covariance: None,
        d3_obs: None,
        eta_var: None,
    })
}

/// Newton mode finding with the layout's own constraints only.
pub fn gaussian_approximation(
    problem: &Problem,
    theta: &[f64],
    init: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<GaussianApprox> {
    gaussian_approximation_constrained(problem, theta, init, &[], opts)
}

impl GaussianApprox {
    /// Worst constraint violation |c^T x*| at the mode.
    pub fn constraint_residual(&self, problem: &Problem) -> f64 {
        problem
            .layout
            .constraint_rows
            .iter()
            .map(|c| c.iter().zip(self.mode.iter()).map(|(ci, xi)| ci * xi).sum::<f64>().abs())
            .fold(0.0, f64::max)
    }

    /// Compute the constrained covariance, marginal standard deviations, and
    /// the latent-folded third derivatives. Required before the simplified
    /// Laplace quantities can be read.
    pub fn enrich(&mut self, problem: &Problem) -> Result<()> {
        if self.covariance.is_some() {
            return Ok(());
        }
        let n = self.factor.dim();
        let k = self.w_cols.len();
        // unconstrained covariance, column by column
        let mut cov = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            self.factor.solve_in_place(&mut e);
            for i in 0..n {
                cov[i * n + j] = e[i];
            }
        }
        // constraint correction: Sigma* = Sigma - W S^{-1} W^T
        if k > 0 {
            let s_chol = self.s_chol.as_ref().unwrap();
            // U = S^{-1} W^T, k x n
            let mut u = vec![0.0; k * n];
            let mut col = vec![0.0; k];
            for j in 0..n {
                for a in 0..k {
                    col[a] = self.w_cols[a][j];
                }
                let sol = s_chol.solve(&col);
                for a in 0..k {
                    u[a * n + j] = sol[a];
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let mut corr = 0.0;
                    for a in 0..k {
                        corr += self.w_cols[a][i] * u[a * n + j];
                    }
                    cov[i * n + j] -= corr;
                }
            }
        }
        let sigma: Vec<f64> = (0..n).map(|i| cov[i * n + i].max(0.0).sqrt()).collect();

        let d3_obs: Vec<f64> = (0..problem.incidence.n_obs())
            .map(|o| problem.obs.derivatives(o, self.eta_mode[o]).2)
            .collect();
        let eta_var: Vec<f64> = problem
            .incidence
            .rows
            .iter()
            .map(|row| {
                let mut v = 0.0;
                for &(i, vi) in row {
                    for &(j, vj) in row {
                        v += vi * vj * cov[i * n + j];
                    }
                }
                v.max(0.0)
            })
            .collect();

        self.covariance = Some(cov);
        self.sigma = Some(sigma);
        self.d3_obs = Some(d3_obs);
        self.eta_var = Some(eta_var);
        Ok(())
    }
}

/// Unnormalized log posterior of the hyperparameters: the joint density at
/// the mode divided by the Gaussian approximation's density there.
pub fn log_posterior_theta(
    problem: &Problem,
    theta: &[f64],
    init: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<(f64, GaussianApprox)> {
    let ga = gaussian_approximation(problem, theta, init, opts)?;
    let loglik = problem.obs.log_likelihood_sum(&ga.eta_mode);
    let prior_x = problem.layout.prior_log_density(&ga.mode, theta)?;
    let prior_theta = problem.layout.theta_log_prior(theta, &problem.hyperprior)?;
    let lp = loglik + prior_x + prior_theta - ga.log_gauss_at_mode;
    Ok((lp, ga))
}
