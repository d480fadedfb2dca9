//! The three-step inference engine: Gaussian approximation of the latent
//! conditional, exploration of the hyperparameter posterior, per-component
//! marginal approximations, and their numerical integration into posterior
//! marginals.

pub mod explore;
pub mod gauss;
pub mod marginals;

use crate::error::{Error, Result};
use crate::likelihood::{BinomialObservations, Observations};
use crate::marginal::{trapezoid, PosteriorMarginal, Target};
use crate::model::{assemble_layout, incidence, Dataset, Incidence, LatentLayout, ModelSpec};
use crate::priors::{AdjacencyGraph, HyperPrior};

pub use explore::{explore_theta, find_mode_theta, ThetaExploration, ThetaPoint};
pub use gauss::{gaussian_approximation, log_posterior_theta, GaussianApprox};
pub use marginals::{
    hyperparameter_marginals, integrate_marginals, laplace_marginal, sla_marginal, HyperMarginal,
    SlaDensity,
};

/// Which per-component marginal approximation the fit uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalPath {
    /// Skew-corrected standardized expansion (default).
    Sla,
    /// Per-index re-optimization (slower, more accurate).
    La,
}

impl MarginalPath {
    pub fn as_str(&self) -> &'static str {
        match self {
            MarginalPath::Sla => "sla",
            MarginalPath::La => "la",
        }
    }
}

/// Every tolerance, step size, and grid the engine uses. Recorded verbatim
/// in output provenance.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub delta_z: f64,
    pub delta_pi: f64,
    pub marginal_path: MarginalPath,
    pub newton_tol: f64,
    pub max_newton: usize,
    pub grad_step: f64,
    pub hess_step: f64,
    pub grad_tol: f64,
    pub max_quasi_newton: usize,
    pub theta_init: Option<Vec<f64>>,
    pub sla_grid_half_width: f64,
    pub sla_grid_step: f64,
    pub sla_damp_start: f64,
    pub la_grid_points: usize,
    pub la_range_sds: f64,
    pub max_walk_steps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            delta_z: 1.0,
            delta_pi: 2.5,
            marginal_path: MarginalPath::Sla,
            newton_tol: 1e-6,
            max_newton: 50,
            grad_step: 1e-4,
            hess_step: 1e-3,
            grad_tol: 1e-4,
            max_quasi_newton: 100,
            theta_init: None,
            sla_grid_half_width: 6.0,
            sla_grid_step: 0.05,
            sla_damp_start: 3.0,
            la_grid_points: 21,
            la_range_sds: 4.0,
            max_walk_steps: 20,
        }
    }
}

/// Everything the engine needs to evaluate the model: layout, incidence,
/// observation model, and the hyperprior.
pub struct Problem<'a> {
    pub layout: &'a LatentLayout,
    pub incidence: &'a Incidence,
    pub obs: &'a dyn Observations,
    pub hyperprior: HyperPrior,
}

/// Per-hyperparameter-point state kept for diagnostics.
#[derive(Debug, Clone)]
pub struct PerThetaRecord {
    pub theta: Vec<f64>,
    pub z: Vec<f64>,
    pub log_post: f64,
    pub weight: f64,
    pub eta_mode: Vec<f64>,
    pub eta_var: Vec<f64>,
    pub latent_mode: Vec<f64>,
    pub latent_sd: Vec<f64>,
}

/// Full output of the inference pass on a `Problem`.
#[derive(Debug)]
pub struct EngineFit {
    pub theta_star: Vec<f64>,
    pub exploration_points: Vec<ThetaPoint>,
    pub latent_marginals: Vec<PosteriorMarginal>,
    pub hyper_marginals: Vec<HyperMarginal>,
    pub eta_marginals: Vec<PosteriorMarginal>,
    pub per_theta: Vec<PerThetaRecord>,
    pub sla_fallbacks: usize,
    pub warnings: Vec<String>,
}

/// Run the three inference steps on an assembled problem.
pub fn fit_problem(problem: &Problem, opts: &FitOptions) -> Result<EngineFit> {
    let n_hyper = problem.layout.n_hyper;
    let mut warnings = Vec::new();

    // Step 1: locate the hyperparameter mode, warm-starting each inner
    // Newton solve from the previous latent mode.
    let init: Vec<f64> = match &opts.theta_init {
        Some(v) => {
            if v.len() != n_hyper {
                return Err(Error::DimensionMismatch { expected: n_hyper, got: v.len() });
            }
            v.clone()
        }
        None => vec![10.0_f64.ln(); n_hyper],
    };
    let mut warm: Option<Vec<f64>> = None;
    let mut objective = |theta: &[f64]| -> Result<f64> {
        let (lp, ga) = log_posterior_theta(problem, theta, warm.as_deref(), opts)?;
        warm = Some(ga.mode);
        Ok(lp)
    };
    let theta_star = find_mode_theta(&mut objective, &init, opts)?;

    // Step 1 continued: negative Hessian, standardized grid walk.
    let expl = explore_theta(&mut objective, &theta_star, opts)?;
    warnings.extend(expl.warnings.iter().cloned());
    let weights = expl.normalized_weights();

    let hyper_marginals = if n_hyper > 0 {
        hyperparameter_marginals(&expl, &problem.layout.hyper_labels)?
    } else {
        Vec::new()
    };

    // Step 2: per-point Gaussian approximation and latent marginals.
    let n = problem.layout.n;
    let n_obs = problem.incidence.n_obs();
    let mode_init = warm.clone();
    let mut per_theta: Vec<PerThetaRecord> = Vec::with_capacity(expl.points.len());
    let mut per_theta_latent: Vec<Vec<(Vec<f64>, Vec<f64>)>> = Vec::with_capacity(expl.points.len());
    let mut sla_fallbacks = 0usize;
    for (point, &w) in expl.points.iter().zip(&weights) {
        let mut ga = gaussian_approximation(problem, &point.theta, mode_init.as_deref(), opts)?;
        ga.enrich(problem)?;
        let resid = ga.constraint_residual(problem);
        if resid > 1e-8 {
            warnings.push(format!(
                "constraint residual {resid:.2e} at theta = {:?} exceeds 1e-8",
                point.theta
            ));
        }
        let sigma = ga.sigma.as_ref().unwrap().clone();
        let mut latents: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(n);
        match opts.marginal_path {
            MarginalPath::Sla => {
                for i in 0..n {
                    let sla = sla_marginal(i, &ga, problem, opts)?;
                    if sla.fell_back_to_gaussian {
                        sla_fallbacks += 1;
                    }
                    latents.push(sla.to_natural(ga.mode[i], sigma[i].max(1e-12)));
                }
            }
            MarginalPath::La => {
                for i in 0..n {
                    match laplace_marginal(i, &point.theta, problem, &ga, opts) {
                        Ok(m) => latents.push(m),
                        Err(Error::LaplaceGridFailure { index, surviving }) => {
                            warnings.push(format!(
                                "laplace path failed for latent {index} ({surviving} grid points); using the skew-corrected density"
                            ));
                            let sla = sla_marginal(i, &ga, problem, opts)?;
                            latents.push(sla.to_natural(ga.mode[i], sigma[i].max(1e-12)));
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        per_theta_latent.push(latents);
        per_theta.push(PerThetaRecord {
            theta: point.theta.clone(),
            z: point.z.clone(),
            log_post: point.log_post,
            weight: w,
            eta_mode: ga.eta_mode.clone(),
            eta_var: ga.eta_var.clone().expect("enriched"),
            latent_mode: ga.mode.clone(),
            latent_sd: sigma,
        });
    }

    // Step 3: numerical integration over the grid.
    let mut latent_marginals = Vec::with_capacity(n);
    for i in 0..n {
        let per: Vec<(Vec<f64>, Vec<f64>)> =
            per_theta_latent.iter().map(|l| l[i].clone()).collect();
        latent_marginals.push(integrate_marginals(Target::Latent(i), &per, &weights)?);
    }

    // linear-predictor marginals: Gaussian mixture across grid points
    let mut eta_marginals = Vec::with_capacity(n_obs);
    for o in 0..n_obs {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for rec in &per_theta {
            let sd = rec.eta_var[o].sqrt().max(1e-9);
            lo = lo.min(rec.eta_mode[o] - 6.0 * sd);
            hi = hi.max(rec.eta_mode[o] + 6.0 * sd);
        }
        let points = 301usize;
        let step = (hi - lo) / (points - 1) as f64;
        let grid: Vec<f64> = (0..points).map(|k| lo + k as f64 * step).collect();
        let mut density = vec![0.0; points];
        for rec in &per_theta {
            let sd = rec.eta_var[o].sqrt().max(1e-9);
            let norm = rec.weight / (sd * (2.0 * std::f64::consts::PI).sqrt());
            for (g, d) in grid.iter().zip(density.iter_mut()) {
                let zsc = (g - rec.eta_mode[o]) / sd;
                *d += norm * (-0.5 * zsc * zsc).exp();
            }
        }
        eta_marginals.push(PosteriorMarginal::from_grid(Target::LinearPredictor(o), grid, density)?);
    }

    Ok(EngineFit {
        theta_star,
        exploration_points: expl.points,
        latent_marginals,
        hyper_marginals,
        eta_marginals,
        per_theta,
        sla_fallbacks,
        warnings,
    })
}

/// Per-unit report row: observed ratio, fitted risk, and the spatial effect.
#[derive(Debug, Clone)]
pub struct UnitSummary {
    pub unit_id: usize,
    pub y: u64,
    pub n: u64,
    pub srr_observed: f64,
    pub pi_mean: f64,
    pub pi_q025: f64,
    pub pi_q975: f64,
    pub eta_mean: f64,
    pub eta_sd: f64,
    pub exp_spatial_mean: Option<f64>,
}

/// Result of `fit` on a binomial dataset.
#[derive(Debug)]
pub struct FitResult {
    pub model_name: String,
    pub engine: EngineFit,
    pub unit_summaries: Vec<UnitSummary>,
    pub options: FitOptions,
    pub elapsed_seconds: f64,
}

/// Assemble and fit a declarative model on a binomial dataset.
pub fn fit(
    spec: &ModelSpec,
    data: &Dataset,
    graph: &AdjacencyGraph,
    opts: &FitOptions,
) -> Result<FitResult> {
    let start = std::time::Instant::now();
    let layout = assemble_layout(spec, data, graph)?;
    let inc = incidence(&layout, data)?;
    let obs = BinomialObservations::new(data.rows.clone());
    let problem = Problem { layout: &layout, incidence: &inc, obs: &obs, hyperprior: spec.hyperprior };
    let mut engine = fit_problem(&problem, opts)?;
    engine.warnings.extend(layout.warnings.iter().cloned());

    // per-unit summaries from the linear-predictor marginals
    let spatial = layout.spatial_block().map(|b| (b.offset, b.len));
    let mut unit_summaries = Vec::with_capacity(data.n_rows());
    for (o, row) in data.rows.iter().enumerate() {
        let em = &engine.eta_marginals[o];
        // E[expit(eta)] on the marginal grid
        let integrand: Vec<f64> = em
            .grid
            .iter()
            .zip(&em.density)
            .map(|(g, d)| crate::likelihood::expit(*g) * d)
            .collect();
        let pi_mean = trapezoid(&em.grid, &integrand);
        let exp_spatial_mean = spatial.and_then(|(off, len)| {
            if row.unit_id < len {
                let (mean, _, _) = engine.latent_marginals[off + row.unit_id].exp_summaries();
                Some(mean)
            } else {
                None
            }
        });
        unit_summaries.push(UnitSummary {
            unit_id: row.unit_id,
            y: row.y,
            n: row.n,
            srr_observed: row.srr(),
            pi_mean,
            pi_q025: crate::likelihood::expit(em.q025),
            pi_q975: crate::likelihood::expit(em.q975),
            eta_mean: em.mean,
            eta_sd: em.sd,
            exp_spatial_mean,
        });
    }

    Ok(FitResult {
        model_name: spec.name.clone(),
        engine,
        unit_summaries,
        options: opts.clone(),
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}
