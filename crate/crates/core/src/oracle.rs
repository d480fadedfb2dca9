//! Independent ground-truth engines: tensor-grid quadrature for tiny models
//! and a blockwise random-walk Metropolis sampler for small ones. Both share
//! only likelihood and prior density evaluations with the inference engine —
//! no mode finding, factorization, or approximation code.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::engine::Problem;
use crate::error::{Error, Result};
use crate::likelihood::{expit, ObservationRow};
use crate::model::Dataset;
use crate::priors::AdjacencyGraph;

/// Identifier of the seeded generator recorded in every oracle output.
pub const GENERATOR_ID: &str = "chacha8";

const QUADRATURE_CELL_GUARD: u128 = 100_000_000;

/// Tensor-grid ranges: one (lo, hi, points) triple per latent dimension and
/// optionally one for the single hyperparameter (on the log scale).
#[derive(Debug, Clone)]
pub struct QuadratureSpec {
    pub latent: Vec<(f64, f64, usize)>,
    pub theta: Option<(f64, f64, usize)>,
}

impl QuadratureSpec {
    pub fn uniform(n_latent: usize, lo: f64, hi: f64, points: usize, theta: Option<(f64, f64, usize)>) -> Self {
        QuadratureSpec { latent: vec![(lo, hi, points); n_latent], theta }
    }
}

/// Gridded marginal with exact moment sums.
#[derive(Debug, Clone)]
pub struct OracleMarginal {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

/// Output of the quadrature oracle.
#[derive(Debug)]
pub struct QuadratureResult {
    pub latent: Vec<OracleMarginal>,
    /// Marginal of the hyperparameter on the log scale, when present.
    pub hyper_log_scale: Option<OracleMarginal>,
    /// Posterior mean and sd of the precision on the natural scale.
    pub hyper_natural_mean_sd: Option<(f64, f64)>,
    pub log_evidence: f64,
}

/// Handles constraint elimination: pivots one coordinate per constraint row
/// so the tensor grid runs over free coordinates only.
struct ConstraintElimination {
    free: Vec<usize>,
    pivots: Vec<usize>,
    /// Row-reduced solve: pivot values from free values.
    c_rows: Vec<Vec<f64>>,
}

impl ConstraintElimination {
    fn new(n: usize, constraints: &[Vec<f64>]) -> Result<Self> {
        let mut pivots: Vec<usize> = Vec::new();
        for row in constraints {
            let mut pivot = None;
            for j in (0..n).rev() {
                if row[j].abs() > 1e-12 && !pivots.contains(&j) {
                    pivot = Some(j);
                    break;
                }
            }
            pivots.push(pivot.ok_or_else(|| Error::Spec("constraint rows are linearly dependent".into()))?);
        }
        let free: Vec<usize> = (0..n).filter(|j| !pivots.contains(j)).collect();
        Ok(ConstraintElimination { free, pivots, c_rows: constraints.to_vec() })
    }

    /// Fill `x` from free-coordinate values, solving the k x k pivot system.
    fn embed(&self, free_vals: &[f64], x: &mut [f64]) {
        for v in x.iter_mut() {
            *v = 0.0;
        }
        for (j, &fj) in self.free.iter().zip(free_vals) {
            x[*j] = fj;
        }
        let k = self.pivots.len();
        if k == 0 {
            return;
        }
        // rhs_a = -sum_{free j} c_a[j] x[j]
        let mut rhs = vec![0.0; k];
        for (a, row) in self.c_rows.iter().enumerate() {
            let mut s = 0.0;
            for &j in &self.free {
                s += row[j] * x[j];
            }
            rhs[a] = -s;
        }
        // solve C_pp p = rhs by Gaussian elimination (k is tiny)
        let mut m = vec![0.0; k * k];
        for (a, row) in self.c_rows.iter().enumerate() {
            for (b, &p) in self.pivots.iter().enumerate() {
                m[a * k + b] = row[p];
            }
        }
        let mut sol = rhs;
        for col in 0..k {
            let mut piv = col;
            for r in (col + 1)..k {
                if m[r * k + col].abs() > m[piv * k + col].abs() {
                    piv = r;
                }
            }
            if piv != col {
                for c in 0..k {
                    m.swap(col * k + c, piv * k + c);
                }
                sol.swap(col, piv);
            }
            let d = m[col * k + col];
            for r in (col + 1)..k {
                let f = m[r * k + col] / d;
                for c in col..k {
                    m[r * k + c] -= f * m[col * k + c];
                }
                sol[r] -= f * sol[col];
            }
        }
        for r in (0..k).rev() {
            let mut s = sol[r];
            for c in (r + 1)..k {
                s -= m[r * k + c] * sol[c];
            }
            sol[r] = s / m[r * k + r];
        }
        for (b, &p) in self.pivots.iter().enumerate() {
            x[p] = sol[b];
        }
    }
}

struct Accumulator {
    running_max: f64,
    mass: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    density: Vec<Vec<f64>>,
    grids: Vec<Vec<f64>>,
    theta_mass: Vec<f64>,
    theta_mean: f64,
    theta_m2: f64,
    tau_mean: f64,
    tau_m2: f64,
}

impl Accumulator {
    fn new(grids: Vec<Vec<f64>>, n_theta: usize) -> Self {
        let n = grids.len();
        Accumulator {
            running_max: f64::NEG_INFINITY,
            mass: 0.0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            density: grids.iter().map(|g| vec![0.0; g.len()]).collect(),
            grids,
            theta_mass: vec![0.0; n_theta],
            theta_mean: 0.0,
            theta_m2: 0.0,
            tau_mean: 0.0,
            tau_m2: 0.0,
        }
    }

    fn rescale(&mut self, factor: f64) {
        self.mass *= factor;
        for v in self.mean.iter_mut() {
            *v *= factor;
        }
        for v in self.m2.iter_mut() {
            *v *= factor;
        }
        for d in self.density.iter_mut() {
            for v in d.iter_mut() {
                *v *= factor;
            }
        }
        for v in self.theta_mass.iter_mut() {
            *v *= factor;
        }
        self.theta_mean *= factor;
        self.theta_m2 *= factor;
        self.tau_mean *= factor;
        self.tau_m2 *= factor;
    }

    fn add(&mut self, lp: f64, x: &[f64], theta_idx: Option<(usize, f64)>) {
        if lp > self.running_max {
            let factor = (self.running_max - lp).exp();
            if self.mass > 0.0 {
                self.rescale(factor);
            }
            self.running_max = lp;
        }
        let w = (lp - self.running_max).exp();
        self.mass += w;
        for (i, &xi) in x.iter().enumerate() {
            self.mean[i] += w * xi;
            self.m2[i] += w * xi * xi;
            // linear split between the two neighboring grid points
            let g = &self.grids[i];
            let step = g[1] - g[0];
            let pos = (xi - g[0]) / step;
            let lo = pos.floor();
            let idx = lo as isize;
            let frac = pos - lo;
            if idx >= 0 && (idx as usize) < g.len() {
                self.density[i][idx as usize] += w * (1.0 - frac);
            }
            if idx + 1 >= 0 && ((idx + 1) as usize) < g.len() {
                self.density[i][(idx + 1) as usize] += w * frac;
            }
        }
        if let Some((ti, tv)) = theta_idx {
            self.theta_mass[ti] += w;
            self.theta_mean += w * tv;
            self.theta_m2 += w * tv * tv;
            let tau = tv.exp();
            self.tau_mean += w * tau;
            self.tau_m2 += w * tau * tau;
        }
    }
}

/// Exact posterior marginals by brute-force tensor-grid integration of
/// exp(log likelihood + log prior + log hyperprior). Free latent dimension
/// is capped at 4 and the hyperparameter dimension at 1.
pub fn quadrature_posterior(problem: &Problem, qs: &QuadratureSpec) -> Result<QuadratureResult> {
    let n = problem.layout.n;
    if qs.latent.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: qs.latent.len() });
    }
    let elim = ConstraintElimination::new(n, &problem.layout.constraint_rows)?;
    if elim.free.len() > 4 {
        return Err(Error::Spec(format!(
            "quadrature oracle handles at most 4 free latent dimensions, got {}",
            elim.free.len()
        )));
    }
    if problem.layout.n_hyper > 1 {
        return Err(Error::Spec("quadrature oracle handles at most 1 hyperparameter".into()));
    }
    if (problem.layout.n_hyper == 1) != qs.theta.is_some() {
        return Err(Error::Spec("theta range must be given exactly when the model has one hyperparameter".into()));
    }

    let free_axes: Vec<Vec<f64>> = elim
        .free
        .iter()
        .map(|&j| {
            let (lo, hi, pts) = qs.latent[j];
            linspace(lo, hi, pts.min(61))
        })
        .collect();
    let theta_axis: Vec<f64> = match qs.theta {
        Some((lo, hi, pts)) => linspace(lo, hi, pts.min(81)),
        None => vec![],
    };
    let mut cells: u128 = free_axes.iter().map(|a| a.len() as u128).product();
    cells *= theta_axis.len().max(1) as u128;
    if cells > QUADRATURE_CELL_GUARD {
        return Err(Error::OracleTooLarge { cells, limit: QUADRATURE_CELL_GUARD });
    }

    let grids: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let (lo, hi, pts) = qs.latent[j];
            linspace(lo, hi, pts.min(61))
        })
        .collect();
    let mut acc = Accumulator::new(grids, theta_axis.len().max(1));

    let free_volume: f64 = free_axes.iter().map(|a| a[1] - a[0]).product();
    let theta_step = if theta_axis.len() > 1 { theta_axis[1] - theta_axis[0] } else { 1.0 };

    let mut x = vec![0.0; n];
    let mut free_vals = vec![0.0; free_axes.len()];
    let mut idx = vec![0usize; free_axes.len()];
    let theta_iter: Vec<(usize, Vec<f64>)> = if theta_axis.is_empty() {
        vec![(0, Vec::new())]
    } else {
        theta_axis.iter().enumerate().map(|(i, &t)| (i, vec![t])).collect()
    };

    for (ti, theta) in &theta_iter {
        let theta_prior = problem.layout.theta_log_prior(theta, &problem.hyperprior)?;
        idx.iter_mut().for_each(|v| *v = 0);
        loop {
            for (d, &i) in idx.iter().enumerate() {
                free_vals[d] = free_axes[d][i];
            }
            elim.embed(&free_vals, &mut x);
            let eta = problem.incidence.eta(&x);
            let lp = problem.obs.log_likelihood_sum(&eta)
                + problem.layout.prior_log_density(&x, theta)?
                + theta_prior;
            let theta_info = if theta.is_empty() { None } else { Some((*ti, theta[0])) };
            acc.add(lp, &x, theta_info);

            // advance the multi-index
            let mut d = 0;
            loop {
                if d == idx.len() {
                    break;
                }
                idx[d] += 1;
                if idx[d] < free_axes[d].len() {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == idx.len() {
                break;
            }
        }
    }

    let mass = acc.mass;
    let log_evidence = acc.running_max + (mass * free_volume * theta_step).ln();
    let latent = (0..n)
        .map(|i| {
            let grid = acc.grids[i].clone();
            let step = grid[1] - grid[0];
            let density: Vec<f64> = acc.density[i].iter().map(|v| v / (mass * step)).collect();
            let mean = acc.mean[i] / mass;
            let var = (acc.m2[i] / mass - mean * mean).max(0.0);
            OracleMarginal { grid, density, mean, sd: var.sqrt() }
        })
        .collect();
    let (hyper_log_scale, hyper_natural_mean_sd) = if theta_axis.is_empty() {
        (None, None)
    } else {
        let density: Vec<f64> = acc.theta_mass.iter().map(|v| v / (mass * theta_step)).collect();
        let mean = acc.theta_mean / mass;
        let var = (acc.theta_m2 / mass - mean * mean).max(0.0);
        let tau_mean = acc.tau_mean / mass;
        let tau_var = (acc.tau_m2 / mass - tau_mean * tau_mean).max(0.0);
        (
            Some(OracleMarginal { grid: theta_axis, density, mean, sd: var.sqrt() }),
            Some((tau_mean, tau_var.sqrt())),
        )
    };

    Ok(QuadratureResult { latent, hyper_log_scale, hyper_natural_mean_sd, log_evidence })
}

/// log of the latent-space integral of likelihood times prior at a fixed
/// hyperparameter point: the quantity the first inference step approximates
/// (up to the hyperprior term).
pub fn quadrature_log_evidence_at(problem: &Problem, theta: &[f64], qs: &QuadratureSpec) -> Result<f64> {
    let n = problem.layout.n;
    let elim = ConstraintElimination::new(n, &problem.layout.constraint_rows)?;
    if elim.free.len() > 4 {
        return Err(Error::Spec("at most 4 free latent dimensions".into()));
    }
    let free_axes: Vec<Vec<f64>> = elim
        .free
        .iter()
        .map(|&j| {
            let (lo, hi, pts) = qs.latent[j];
            linspace(lo, hi, pts)
        })
        .collect();
    let free_volume: f64 = free_axes.iter().map(|a| a[1] - a[0]).product();
    let mut x = vec![0.0; n];
    let mut idx = vec![0usize; free_axes.len()];
    let mut running_max = f64::NEG_INFINITY;
    let mut mass = 0.0;
    loop {
        let free_vals: Vec<f64> = idx.iter().enumerate().map(|(d, &i)| free_axes[d][i]).collect();
        elim.embed(&free_vals, &mut x);
        let eta = problem.incidence.eta(&x);
        let lp = problem.obs.log_likelihood_sum(&eta) + problem.layout.prior_log_density(&x, theta)?;
        if lp > running_max {
            if mass > 0.0 {
                mass *= (running_max - lp).exp();
            }
            running_max = lp;
        }
        mass += (lp - running_max).exp();

        let mut d = 0;
        loop {
            if d == idx.len() {
                break;
            }
            idx[d] += 1;
            if idx[d] < free_axes[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == idx.len() {
            break;
        }
    }
    Ok(running_max + (mass * free_volume).ln())
}

fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let pts = points.max(2);
    let step = (hi - lo) / (pts - 1) as f64;
    (0..pts).map(|k| lo + k as f64 * step).collect()
}

/// Sampler configuration. The seed is mandatory; per-chain seeds derive
/// from it by fixed offsets.
#[derive(Debug, Clone)]
pub struct McmcSpec {
    pub iterations: usize,
    pub burn_in: usize,
    pub step_latent: f64,
    pub step_theta: f64,
    pub seed: u64,
    pub n_chains: usize,
    pub thin: usize,
    /// Run a short pre-pass that adapts per-block step sizes, then freeze.
    pub tune: bool,
    /// Emit summaries even when split R-hat exceeds 1.05.
    pub force: bool,
}

impl McmcSpec {
    pub fn new(iterations: usize, burn_in: usize, seed: u64) -> Self {
        McmcSpec {
            iterations,
            burn_in,
            step_latent: 0.5,
            step_theta: 0.5,
            seed,
            n_chains: 2,
            thin: 1,
            tune: true,
            force: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::McmcConfig("iterations must be positive".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::McmcConfig(format!(
                "burn_in {} must be smaller than iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if self.step_latent <= 0.0 || self.step_theta <= 0.0 {
            return Err(Error::McmcConfig("proposal step sizes must be positive".into()));
        }
        if self.n_chains == 0 || self.thin == 0 {
            return Err(Error::McmcConfig("n_chains and thin must be positive".into()));
        }
        Ok(())
    }
}

/// Kept samples and diagnostics from the random-walk sampler.
#[derive(Debug)]
pub struct McmcResult {
    /// Kept latent samples (embedded to the full coordinate system), one
    /// vector per kept sweep, chains concatenated.
    pub x_samples: Vec<Vec<f64>>,
    pub theta_samples: Vec<Vec<f64>>,
    pub kept_per_chain: usize,
    pub n_chains: usize,
    pub acceptance_latent: f64,
    pub acceptance_theta: Vec<f64>,
    pub split_rhat_max: f64,
    pub seed: u64,
    pub generator: &'static str,
    pub forced: bool,
}

/// Blockwise random-walk Metropolis on (free latent coordinates, log
/// precisions). Constraints are honored by sampling in the eliminated
/// coordinate system, so the target is exactly the constrained posterior.
pub fn metropolis(problem: &Problem, ms: &McmcSpec) -> Result<McmcResult> {
    ms.validate()?;
    let n = problem.layout.n;
    let n_hyper = problem.layout.n_hyper;
    let elim = ConstraintElimination::new(n, &problem.layout.constraint_rows)?;
    let n_free = elim.free.len();

    // map each free coordinate to its block, for per-block step scaling
    let block_of: Vec<usize> = elim
        .free
        .iter()
        .map(|&j| {
            problem
                .layout
                .blocks
                .iter()
                .position(|b| j >= b.offset && j < b.offset + b.len)
                .expect("latent index inside a block")
        })
        .collect();
    let n_blocks = problem.layout.blocks.len();

    let target = |x: &[f64], theta: &[f64]| -> Result<f64> {
        let eta = problem.incidence.eta(x);
        Ok(problem.obs.log_likelihood_sum(&eta)
            + problem.layout.prior_log_density(x, theta)?
            + problem.layout.theta_log_prior(theta, &problem.hyperprior)?)
    };

    let kept_per_chain = (ms.iterations - ms.burn_in) / ms.thin;
    let mut x_samples: Vec<Vec<f64>> = Vec::with_capacity(kept_per_chain * ms.n_chains);
    let mut theta_samples: Vec<Vec<f64>> = Vec::with_capacity(kept_per_chain * ms.n_chains);
    let mut acc_latent_num = 0u64;
    let mut acc_latent_den = 0u64;
    let mut acc_theta_num = vec![0u64; n_hyper];
    let mut acc_theta_den = vec![0u64; n_hyper];

    for chain in 0..ms.n_chains {
        let mut rng = ChaCha8Rng::seed_from_u64(ms.seed.wrapping_add(1000 * chain as u64));
        let mut u = vec![0.0; n_free];
        let mut theta = vec![0.0; n_hyper];
        let mut x = vec![0.0; n];
        elim.embed(&u, &mut x);
        let mut lp = target(&x, &theta)?;

        let mut step_block = vec![ms.step_latent; n_blocks];
        let mut step_theta = vec![ms.step_theta; n_hyper];

        if ms.tune {
            // short adaptive pre-pass; scales are frozen afterwards
            let tune_sweeps = 1500usize;
            let mut acc_b = vec![0u64; n_blocks];
            let mut try_b = vec![0u64; n_blocks];
            let mut acc_t = vec![0u64; n_hyper];
            let mut try_t = vec![0u64; n_hyper];
            for sweep in 0..tune_sweeps {
                sweep_once(
                    problem, &elim, &block_of, &mut u, &mut theta, &mut x, &mut lp, &step_block,
                    &step_theta, &mut rng, &target, Some((&mut acc_b, &mut try_b, &mut acc_t, &mut try_t)),
                )?;
                if (sweep + 1) % 150 == 0 {
                    for b in 0..n_blocks {
                        if try_b[b] > 0 {
                            let rate = acc_b[b] as f64 / try_b[b] as f64;
                            if rate > 0.5 {
                                step_block[b] *= 1.4;
                            } else if rate < 0.3 {
                                step_block[b] *= 0.7;
                            }
                        }
                        acc_b[b] = 0;
                        try_b[b] = 0;
                    }
                    for h in 0..n_hyper {
                        if try_t[h] > 0 {
                            let rate = acc_t[h] as f64 / try_t[h] as f64;
                            if rate > 0.5 {
                                step_theta[h] *= 1.4;
                            } else if rate < 0.3 {
                                step_theta[h] *= 0.7;
                            }
                        }
                        acc_t[h] = 0;
                        try_t[h] = 0;
                    }
                }
            }
        }

        for sweep in 0..ms.iterations {
            let accepted = sweep_once(
                problem, &elim, &block_of, &mut u, &mut theta, &mut x, &mut lp, &step_block,
                &step_theta, &mut rng, &target, None,
            )?;
            acc_latent_num += accepted.0;
            acc_latent_den += n_free as u64;
            for h in 0..n_hyper {
                acc_theta_num[h] += accepted.1[h];
                acc_theta_den[h] += 1;
            }
            if sweep >= ms.burn_in && (sweep - ms.burn_in) % ms.thin == 0 && x_samples.len() < kept_per_chain * (chain + 1)
            {
                x_samples.push(x.clone());
                theta_samples.push(theta.clone());
            }
        }
    }

    // split R-hat over 2 * n_chains half-chains, max over all coordinates
    let mut rhat_max: f64 = 1.0;
    let scalar = |samples: &[Vec<f64>], dim: usize, chain: usize| -> Vec<f64> {
        samples[chain * kept_per_chain..(chain + 1) * kept_per_chain]
            .iter()
            .map(|v| v[dim])
            .collect()
    };
    for dim in 0..n {
        let mut halves: Vec<Vec<f64>> = Vec::new();
        for c in 0..ms.n_chains {
            let full = scalar(&x_samples, dim, c);
            let mid = full.len() / 2;
            halves.push(full[..mid].to_vec());
            halves.push(full[mid..].to_vec());
        }
        rhat_max = rhat_max.max(split_rhat(&halves));
    }
    for dim in 0..n_hyper {
        let mut halves: Vec<Vec<f64>> = Vec::new();
        for c in 0..ms.n_chains {
            let full: Vec<f64> = theta_samples[c * kept_per_chain..(c + 1) * kept_per_chain]
                .iter()
                .map(|v| v[dim])
                .collect();
            let mid = full.len() / 2;
            halves.push(full[..mid].to_vec());
            halves.push(full[mid..].to_vec());
        }
        rhat_max = rhat_max.max(split_rhat(&halves));
    }

    Ok(McmcResult {
        x_samples,
        theta_samples,
        kept_per_chain,
        n_chains: ms.n_chains,
        acceptance_latent: if acc_latent_den > 0 { acc_latent_num as f64 / acc_latent_den as f64 } else { 0.0 },
        acceptance_theta: acc_theta_num
            .iter()
            .zip(&acc_theta_den)
            .map(|(&a, &d)| if d > 0 { a as f64 / d as f64 } else { 0.0 })
            .collect(),
        split_rhat_max: rhat_max,
        seed: ms.seed,
        generator: GENERATOR_ID,
        forced: ms.force,
    })
}

#[allow(clippy::too_many_arguments)]
fn sweep_once(
    _problem: &Problem,
    elim: &ConstraintElimination,
    block_of: &[usize],
    u: &mut [f64],
    theta: &mut [f64],
    x: &mut Vec<f64>,
    lp: &mut f64,
    step_block: &[f64],
    step_theta: &[f64],
    rng: &mut ChaCha8Rng,
    target: &dyn Fn(&[f64], &[f64]) -> Result<f64>,
    mut tally: Option<(&mut Vec<u64>, &mut Vec<u64>, &mut Vec<u64>, &mut Vec<u64>)>,
) -> Result<(u64, Vec<u64>)> {
    let n_free = u.len();
    let n_hyper = theta.len();
    let mut accepted_latent = 0u64;
    let mut accepted_theta = vec![0u64; n_hyper];
    let mut proposal = x.clone();
    for j in 0..n_free {
        let old = u[j];
        let noise: f64 = StandardNormal.sample(rng);
        u[j] = old + step_block[block_of[j]] * noise;
        elim.embed(u, &mut proposal);
        let lp_new = target(&proposal, theta)?;
        let log_ratio = lp_new - *lp;
        let accept = log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp();
        if let Some((acc_b, try_b, _, _)) = tally.as_mut() {
            try_b[block_of[j]] += 1;
            if accept {
                acc_b[block_of[j]] += 1;
            }
        }
        if accept {
            *lp = lp_new;
            std::mem::swap(x, &mut proposal);
            accepted_latent += 1;
        } else {
            u[j] = old;
        }
        proposal.clone_from(x);
    }
    for h in 0..n_hyper {
        let old = theta[h];
        let noise: f64 = StandardNormal.sample(rng);
        theta[h] = old + step_theta[h] * noise;
        let lp_new = target(x, theta)?;
        let log_ratio = lp_new - *lp;
        let accept = log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp();
        if let Some((_, _, acc_t, try_t)) = tally.as_mut() {
            try_t[h] += 1;
            if accept {
                acc_t[h] += 1;
            }
        }
        if accept {
            *lp = lp_new;
            accepted_theta[h] += 1;
        } else {
            theta[h] = old;
        }
    }
    Ok((accepted_latent, accepted_theta))
}

fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if m < 2 || len < 4 {
        return 1.0;
    }
    let means: Vec<f64> = chains.iter().map(|c| c[..len].iter().sum::<f64>() / len as f64).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = len as f64 / (m as f64 - 1.0) * means.iter().map(|mu| (mu - grand) * (mu - grand)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c[..len].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (len as f64 - 1.0))
        .sum::<f64>()
        / m as f64;
    if w <= 0.0 {
        return 1.0;
    }
    let var_plus = (len as f64 - 1.0) / len as f64 * w + b / len as f64;
    (var_plus / w).sqrt()
}

/// Mean, sd, and batch-means Monte Carlo standard error per coordinate.
#[derive(Debug, Clone)]
pub struct SampleSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub mcse: Vec<f64>,
}

impl McmcResult {
    fn summarize(&self, samples: &[Vec<f64>], dim: usize) -> SampleSummary {
        let total = samples.len();
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= total as f64;
        }
        let mut sd = vec![0.0; dim];
        for s in samples {
            for ((v, m), out) in s.iter().zip(&mean).zip(sd.iter_mut()) {
                *out += (v - m) * (v - m);
            }
        }
        for out in sd.iter_mut() {
            *out = (*out / (total as f64 - 1.0)).sqrt();
        }
        // batch means per chain
        let mut mcse = vec![0.0; dim];
        let per_chain = self.kept_per_chain;
        let n_batches_per_chain = 25usize.min(per_chain / 4).max(2);
        let batch_len = per_chain / n_batches_per_chain;
        for d in 0..dim {
            let mut batch_means = Vec::new();
            for c in 0..self.n_chains {
                for b in 0..n_batches_per_chain {
                    let start = c * per_chain + b * batch_len;
                    let end = start + batch_len;
                    let bm: f64 = samples[start..end].iter().map(|s| s[d]).sum::<f64>() / batch_len as f64;
                    batch_means.push(bm);
                }
            }
            let k = batch_means.len() as f64;
            let bm_mean = batch_means.iter().sum::<f64>() / k;
            let bm_var = batch_means.iter().map(|v| (v - bm_mean) * (v - bm_mean)).sum::<f64>() / (k - 1.0);
            mcse[d] = (bm_var / k).sqrt();
        }
        SampleSummary { mean, sd, mcse }
    }

    fn check_converged(&self) -> Result<()> {
        if self.split_rhat_max > 1.05 && !self.forced {
            return Err(Error::McmcNotConverged { rhat: self.split_rhat_max });
        }
        Ok(())
    }

    /// Latent summaries; refuses when the convergence diagnostic fails
    /// unless the run was forced.
    pub fn latent_summary(&self) -> Result<SampleSummary> {
        self.check_converged()?;
        let dim = self.x_samples[0].len();
        Ok(self.summarize(&self.x_samples, dim))
    }

    pub fn theta_summary(&self) -> Result<SampleSummary> {
        self.check_converged()?;
        let dim = self.theta_samples.first().map(|v| v.len()).unwrap_or(0);
        if dim == 0 {
            return Ok(SampleSummary { mean: vec![], sd: vec![], mcse: vec![] });
        }
        Ok(self.summarize(&self.theta_samples, dim))
    }

    /// Sampler-based DIC with the posterior-mean linear predictor as the
    /// plug-in, matching the engine's convention.
    pub fn dic(&self, problem: &Problem) -> Result<(f64, f64, f64, f64)> {
        self.check_converged()?;
        let n_obs = problem.incidence.n_obs();
        let total = self.x_samples.len() as f64;
        let mut mean_dev = 0.0;
        let mut eta_bar = vec![0.0; n_obs];
        for x in &self.x_samples {
            let eta = problem.incidence.eta(x);
            mean_dev += -2.0 * problem.obs.log_likelihood_sum(&eta);
            for (e, v) in eta_bar.iter_mut().zip(&eta) {
                *e += v;
            }
        }
        mean_dev /= total;
        for e in eta_bar.iter_mut() {
            *e /= total;
        }
        let dev_at_mean = -2.0 * problem.obs.log_likelihood_sum(&eta_bar);
        let p_d = mean_dev - dev_at_mean;
        Ok((mean_dev, dev_at_mean, p_d, mean_dev + p_d))
    }
}

/// Known per-unit contributions to the linear predictor used when
/// simulating data.
#[derive(Debug, Clone, Default)]
pub struct TrueEffects {
    pub intercept: f64,
    pub spatial: Option<Vec<f64>>,
    pub unstructured: Option<Vec<f64>>,
    /// Additional named per-unit contributions (smooth or linear effects
    /// already evaluated unit-wise).
    pub covariate_contributions: Vec<(String, Vec<f64>)>,
}

impl TrueEffects {
    pub fn eta(&self, n_units: usize) -> Result<Vec<f64>> {
        let mut eta = vec![self.intercept; n_units];
        let mut add = |v: &Vec<f64>| -> Result<()> {
            if v.len() != n_units {
                return Err(Error::DimensionMismatch { expected: n_units, got: v.len() });
            }
            for (e, c) in eta.iter_mut().zip(v) {
                *e += c;
            }
            Ok(())
        };
        if let Some(v) = &self.spatial {
            add(v)?;
        }
        if let Some(v) = &self.unstructured {
            add(v)?;
        }
        for (_, v) in &self.covariate_contributions {
            add(v)?;
        }
        Ok(eta)
    }
}

/// Draw y_u ~ Binomial(N_u, expit(eta_u)) with a seeded generator and emit
/// the dataset together with the true linear predictor.
pub fn simulate_dataset(
    graph: &AdjacencyGraph,
    effects: &TrueEffects,
    populations: &[u64],
    covariates: BTreeMap<String, Vec<String>>,
    seed: u64,
) -> Result<(Dataset, Vec<f64>)> {
    let n_units = graph.n_units();
    if populations.len() != n_units {
        return Err(Error::DimensionMismatch { expected: n_units, got: populations.len() });
    }
    let eta = effects.eta(n_units)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_units);
    for u in 0..n_units {
        if populations[u] == 0 {
            return Err(Error::Input(format!("unit {u}: population must be >= 1")));
        }
        let p = expit(eta[u]);
        let y = Binomial::new(populations[u], p)
            .map_err(|e| Error::Domain(format!("binomial draw failed: {e}")))?
            .sample(&mut rng);
        rows.push(ObservationRow::new(u, y, populations[u])?);
    }
    for (name, col) in &covariates {
        if col.len() != n_units {
            return Err(Error::DimensionMismatch { expected: n_units, got: col.len() })
                .map_err(|_| Error::Input(format!("covariate {name:?} has wrong length")));
        }
    }
    Ok((Dataset { rows, covariates }, eta))
}
