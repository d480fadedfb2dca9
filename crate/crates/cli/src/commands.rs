//! The four subcommands: fit, compare, simulate, and oracle.

use std::path::{Path, PathBuf};

use serde_json::json;

use inla_core::diagnostics::{dic, effect_summaries, DicResult};
use inla_core::engine::{fit, FitOptions, FitResult, Problem};
use inla_core::likelihood::BinomialObservations;
use inla_core::model::{assemble_layout, incidence, Dataset, ModelSpec};
use inla_core::oracle::{
    metropolis, quadrature_posterior, McmcSpec, QuadratureSpec, GENERATOR_ID,
};
use inla_core::priors::AdjacencyGraph;
use inla_core::{Error, Result};

use crate::ingest::ingest;
use crate::output::{ensure_dir, fmt_float, fmt_opt, write_atomic, CsvBuilder};
use crate::presets::{preset, required_covariates};
use crate::simulate::{region_like, units, SyntheticRegion};

/// Where the model definition comes from.
#[derive(Debug, Clone)]
pub enum ModelSource {
    ConfigFile(PathBuf),
    Preset(String),
}

impl ModelSource {
    pub fn resolve(&self) -> Result<ModelSpec> {
        match self {
            ModelSource::Preset(name) => preset(name),
            ModelSource::ConfigFile(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Input(format!("cannot read model config {}: {e}", path.display())))?;
                let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
                ModelSpec::from_json(name, &text)
            }
        }
    }

    fn provenance(&self) -> serde_json::Value {
        match self {
            ModelSource::Preset(p) => json!({ "preset": p }),
            ModelSource::ConfigFile(p) => json!({ "config_path": p.display().to_string() }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub adjacency_path: PathBuf,
    pub model: ModelSource,
    pub out_dir: PathBuf,
    pub options: FitOptions,
}

fn options_provenance(o: &FitOptions) -> serde_json::Value {
    json!({
        "delta_z": o.delta_z,
        "delta_pi": o.delta_pi,
        "marginal_path": o.marginal_path.as_str(),
        "newton_tol": o.newton_tol,
        "max_newton": o.max_newton,
        "grad_step": o.grad_step,
        "hess_step": o.hess_step,
        "grad_tol": o.grad_tol,
        "max_quasi_newton": o.max_quasi_newton,
        "sla_grid_half_width": o.sla_grid_half_width,
        "sla_grid_step": o.sla_grid_step,
        "sla_damp_start": o.sla_damp_start,
        "la_grid_points": o.la_grid_points,
        "la_range_sds": o.la_range_sds,
        "max_walk_steps": o.max_walk_steps,
        "grid_weight_rule": "equal_area_delta_z_pow_dim",
    })
}

fn write_fit_outputs(
    cfg: &RunConfig,
    spec: &ModelSpec,
    data: &Dataset,
    graph: &AdjacencyGraph,
    result: &FitResult,
    dic_result: &DicResult,
) -> Result<()> {
    let layout = assemble_layout(spec, data, graph)?;
    let labels = layout.component_labels();

    let mut latent = CsvBuilder::new(&["index", "block", "component", "mean", "sd", "q025", "q500", "q975"]);
    for (i, m) in result.engine.latent_marginals.iter().enumerate() {
        latent.row(&[
            i.to_string(),
            labels[i].0.clone(),
            labels[i].1.clone(),
            fmt_float(m.mean),
            fmt_float(m.sd),
            fmt_float(m.q025),
            fmt_float(m.q500),
            fmt_float(m.q975),
        ]);
    }
    write_atomic(&cfg.out_dir.join("latent_marginals.csv"), &latent.finish())?;

    let mut hyper = CsvBuilder::new(&[
        "index",
        "label",
        "tau_mean",
        "tau_sd",
        "tau_q025",
        "tau_q500",
        "tau_q975",
        "log_tau_mean",
        "log_tau_sd",
    ]);
    for (h, m) in result.engine.hyper_marginals.iter().enumerate() {
        hyper.row(&[
            h.to_string(),
            m.label.clone(),
            fmt_float(m.natural.mean),
            fmt_float(m.natural.sd),
            fmt_float(m.natural.q025),
            fmt_float(m.natural.q500),
            fmt_float(m.natural.q975),
            fmt_float(m.log_scale.mean),
            fmt_float(m.log_scale.sd),
        ]);
    }
    write_atomic(&cfg.out_dir.join("hyper_marginals.csv"), &hyper.finish())?;

    let tables = effect_summaries(&result.engine, &layout);
    let mut effects = CsvBuilder::new(&["block", "component", "exp_mean", "exp_q025", "exp_q975"]);
    for t in &tables {
        for r in &t.rows {
            effects.row(&[
                t.block_label.clone(),
                r.label.clone(),
                fmt_opt(r.exp_mean),
                fmt_opt(r.exp_q025),
                fmt_opt(r.exp_q975),
            ]);
        }
    }
    write_atomic(&cfg.out_dir.join("effects_exp.csv"), &effects.finish())?;

    let mut unit = CsvBuilder::new(&[
        "unit_id",
        "y",
        "N",
        "srr_observed",
        "pi_mean",
        "pi_q025",
        "pi_q975",
        "eta_mean",
        "eta_sd",
        "exp_spatial_mean",
    ]);
    for u in &result.unit_summaries {
        unit.row(&[
            u.unit_id.to_string(),
            u.y.to_string(),
            u.n.to_string(),
            fmt_float(u.srr_observed),
            fmt_float(u.pi_mean),
            fmt_float(u.pi_q025),
            fmt_float(u.pi_q975),
            fmt_float(u.eta_mean),
            fmt_float(u.eta_sd),
            fmt_opt(u.exp_spatial_mean),
        ]);
    }
    write_atomic(&cfg.out_dir.join("unit_summaries.csv"), &unit.finish())?;

    let mut dic_csv = CsvBuilder::new(&["Model", "p_D", "DIC"]);
    dic_csv.row(&[spec.name.clone(), fmt_float(dic_result.p_d), fmt_float(dic_result.dic)]);
    write_atomic(&cfg.out_dir.join("dic.csv"), &dic_csv.finish())?;

    let provenance = json!({
        "tool": "inla-lite",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "fit",
        "data_path": cfg.data_path.display().to_string(),
        "adjacency_path": cfg.adjacency_path.display().to_string(),
        "model": cfg.model.provenance(),
        "model_name": spec.name,
        "n_hyperparameters": layout.n_hyper,
        "options": options_provenance(&cfg.options),
        "hyperprior": { "a": spec.hyperprior.a, "b": spec.hyperprior.b },
        "fixed_prior_precision": spec.fixed_prior_precision,
        "dic_convention": "plug_in_posterior_mean_linear_predictor",
        "exploration_points": result.engine.exploration_points.len(),
        "sla_gaussian_fallbacks": result.engine.sla_fallbacks,
        "warnings": result.engine.warnings,
    });
    write_atomic(
        &cfg.out_dir.join("provenance.json"),
        &format!("{}\n", serde_json::to_string_pretty(&provenance)?),
    )?;
    Ok(())
}

/// Fit one model and emit the full table set.
pub fn fit_command(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.out_dir)?;
    let (data, graph) = ingest(&cfg.data_path, &cfg.adjacency_path)?;
    let spec = cfg.model.resolve()?;
    let result = fit(&spec, &data, &graph, &cfg.options)?;
    let obs = BinomialObservations::new(data.rows.clone());
    let dic_result = dic(&result.engine, &obs)?;
    write_fit_outputs(cfg, &spec, &data, &graph, &result, &dic_result)?;
    eprintln!(
        "fit {} in {:.2} s: DIC {:.3}, p_D {:.3}, {} grid points",
        spec.name,
        result.elapsed_seconds,
        dic_result.dic,
        dic_result.p_d,
        result.engine.exploration_points.len()
    );
    Ok(())
}

/// Fit several presets and emit the consolidated comparison table, sorted
/// ascending by DIC with the best row flagged. Presets whose covariates are
/// missing from the data are skipped with a warning row.
pub fn compare_command(
    data_path: &Path,
    adjacency_path: &Path,
    preset_names: &[String],
    out_dir: &Path,
    options: &FitOptions,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let (data, graph) = ingest(data_path, adjacency_path)?;

    enum Row {
        Fitted { name: String, p_d: f64, dic: f64 },
        Skipped { name: String, reason: String },
    }
    let mut rows = Vec::new();
    for name in preset_names {
        let missing: Vec<&str> = required_covariates(name)
            .into_iter()
            .filter(|c| !data.has_covariate(c))
            .collect();
        if !missing.is_empty() {
            eprintln!("skipping {name}: missing covariate(s) {}", missing.join(", "));
            rows.push(Row::Skipped {
                name: name.clone(),
                reason: format!("missing covariate {}", missing.join("+")),
            });
            continue;
        }
        let spec = preset(name)?;
        let result = fit(&spec, &data, &graph, options)?;
        let obs = BinomialObservations::new(data.rows.clone());
        let d = dic(&result.engine, &obs)?;
        eprintln!("{}: DIC {:.3}, p_D {:.3} ({:.2} s)", spec.name, d.dic, d.p_d, result.elapsed_seconds);
        rows.push(Row::Fitted { name: spec.name.clone(), p_d: d.p_d, dic: d.dic });
    }

    rows.sort_by(|a, b| {
        let key = |r: &Row| match r {
            Row::Fitted { dic, .. } => *dic,
            Row::Skipped { .. } => f64::INFINITY,
        };
        key(a).partial_cmp(&key(b)).unwrap()
    });
    let best_dic = rows
        .iter()
        .filter_map(|r| match r {
            Row::Fitted { dic, .. } => Some(*dic),
            _ => None,
        })
        .fold(f64::INFINITY, f64::min);

    let mut table = CsvBuilder::new(&["Model", "p_D", "DIC", "flag"]);
    for r in &rows {
        match r {
            Row::Fitted { name, p_d, dic } => {
                let flag = if *dic == best_dic { "best" } else { "" };
                table.row(&[name.clone(), fmt_float(*p_d), fmt_float(*dic), flag.into()]);
            }
            Row::Skipped { name, reason } => {
                table.row(&[name.clone(), String::new(), String::new(), format!("skipped: {reason}")]);
            }
        }
    }
    write_atomic(&out_dir.join("dic_table.csv"), &table.finish())?;

    let provenance = json!({
        "tool": "inla-lite",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "compare",
        "data_path": data_path.display().to_string(),
        "adjacency_path": adjacency_path.display().to_string(),
        "presets": preset_names,
        "options": options_provenance(options),
        "dic_convention": "plug_in_posterior_mean_linear_predictor",
    });
    write_atomic(&out_dir.join("provenance.json"), &format!("{}\n", serde_json::to_string_pretty(&provenance)?))?;
    Ok(())
}

fn write_region(region: &SyntheticRegion, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let cov_names: Vec<&String> = region.dataset.covariates.keys().collect();
    let mut header = vec!["unit_id", "y", "N"];
    for n in &cov_names {
        header.push(n.as_str());
    }
    let mut data_csv = CsvBuilder::new(&header);
    for (u, row) in region.dataset.rows.iter().enumerate() {
        let mut fields = vec![row.unit_id.to_string(), row.y.to_string(), row.n.to_string()];
        for n in &cov_names {
            fields.push(region.dataset.covariates[*n][u].clone());
        }
        data_csv.row(&fields);
    }
    write_atomic(&out_dir.join("data.csv"), &data_csv.finish())?;
    write_atomic(&out_dir.join("region.adj"), &region.graph.to_text())?;

    let mut truth = CsvBuilder::new(&["unit_id", "eta_true", "pi_true"]);
    for (u, (e, p)) in region.eta_true.iter().zip(&region.pi_true).enumerate() {
        truth.row(&[u.to_string(), fmt_float(*e), fmt_float(*p)]);
    }
    write_atomic(&out_dir.join("truth.csv"), &truth.finish())?;

    let provenance = json!({
        "tool": "inla-lite",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "simulate",
        "label": region.label,
        "seed": region.seed,
        "generator": GENERATOR_ID,
        "n_units": region.graph.n_units(),
    });
    write_atomic(&out_dir.join("provenance.json"), &format!("{}\n", serde_json::to_string_pretty(&provenance)?))?;
    Ok(())
}

/// Generate a synthetic dataset with known truth.
pub fn simulate_command(preset_name: Option<&str>, n_units: Option<usize>, seed: u64, out_dir: &Path) -> Result<()> {
    let region = match (preset_name, n_units) {
        (Some("region-like"), None) => region_like(seed)?,
        (Some(other), None) => {
            return Err(Error::Input(format!("unknown simulation preset {other:?}; available: region-like")))
        }
        (None, Some(k)) => {
            if k < 2 {
                return Err(Error::Input("--units must be at least 2".into()));
            }
            units(k, seed)?
        }
        _ => return Err(Error::Input("give exactly one of --preset or --units".into())),
    };
    write_region(&region, out_dir)?;
    eprintln!("simulated {} ({} units, seed {seed})", region.label, region.graph.n_units());
    Ok(())
}

/// Run a ground-truth engine on the model instead of the fast approximation.
#[allow(clippy::too_many_arguments)]
pub fn oracle_command(
    cfg: &RunConfig,
    method: &str,
    seed: Option<u64>,
    iterations: Option<usize>,
    force: bool,
) -> Result<()> {
    ensure_dir(&cfg.out_dir)?;
    let (data, graph) = ingest(&cfg.data_path, &cfg.adjacency_path)?;
    let spec = cfg.model.resolve()?;
    let layout = assemble_layout(&spec, &data, &graph)?;
    let inc = incidence(&layout, &data)?;
    let obs = BinomialObservations::new(data.rows.clone());
    let problem = Problem { layout: &layout, incidence: &inc, obs: &obs, hyperprior: spec.hyperprior };
    let labels = layout.component_labels();

    match method {
        "quadrature" => {
            let qs = QuadratureSpec::uniform(
                layout.n,
                -6.0,
                6.0,
                41,
                if layout.n_hyper == 1 { Some((-6.0, 8.0, 61)) } else { None },
            );
            let r = quadrature_posterior(&problem, &qs)?;
            let mut latent = CsvBuilder::new(&["index", "block", "component", "mean", "sd"]);
            for (i, m) in r.latent.iter().enumerate() {
                latent.row(&[
                    i.to_string(),
                    labels[i].0.clone(),
                    labels[i].1.clone(),
                    fmt_float(m.mean),
                    fmt_float(m.sd),
                ]);
            }
            write_atomic(&cfg.out_dir.join("oracle_latent.csv"), &latent.finish())?;
            let mut hyper = CsvBuilder::new(&["label", "tau_mean", "tau_sd"]);
            if let Some((m, s)) = r.hyper_natural_mean_sd {
                hyper.row(&[layout.hyper_labels[0].clone(), fmt_float(m), fmt_float(s)]);
            }
            write_atomic(&cfg.out_dir.join("oracle_hyper.csv"), &hyper.finish())?;
            let provenance = json!({
                "tool": "inla-lite",
                "version": env!("CARGO_PKG_VERSION"),
                "command": "oracle",
                "method": "quadrature",
                "model": cfg.model.provenance(),
                "log_evidence": r.log_evidence,
                "latent_grid": {"lo": -6.0, "hi": 6.0, "points": 41},
                "theta_grid": if layout.n_hyper == 1 { json!({"lo": -6.0, "hi": 8.0, "points": 61}) } else { json!(null) },
            });
            write_atomic(&cfg.out_dir.join("provenance.json"), &format!("{}\n", serde_json::to_string_pretty(&provenance)?))?;
        }
        "mcmc" => {
            let seed = seed.ok_or_else(|| Error::Input("--seed is required for the mcmc oracle".into()))?;
            let iterations = iterations.unwrap_or(50_000);
            let mut ms = McmcSpec::new(iterations, iterations / 5, seed);
            ms.force = force;
            let r = metropolis(&problem, &ms)?;
            let summary = r.latent_summary()?;
            let mut latent = CsvBuilder::new(&["index", "block", "component", "mean", "sd", "mcse"]);
            for i in 0..layout.n {
                latent.row(&[
                    i.to_string(),
                    labels[i].0.clone(),
                    labels[i].1.clone(),
                    fmt_float(summary.mean[i]),
                    fmt_float(summary.sd[i]),
                    fmt_float(summary.mcse[i]),
                ]);
            }
            write_atomic(&cfg.out_dir.join("oracle_latent.csv"), &latent.finish())?;
            let theta = r.theta_summary()?;
            let mut hyper = CsvBuilder::new(&["label", "log_tau_mean", "log_tau_sd", "log_tau_mcse"]);
            for h in 0..layout.n_hyper {
                hyper.row(&[
                    layout.hyper_labels[h].clone(),
                    fmt_float(theta.mean[h]),
                    fmt_float(theta.sd[h]),
                    fmt_float(theta.mcse[h]),
                ]);
            }
            write_atomic(&cfg.out_dir.join("oracle_hyper.csv"), &hyper.finish())?;
            let provenance = json!({
                "tool": "inla-lite",
                "version": env!("CARGO_PKG_VERSION"),
                "command": "oracle",
                "method": "mcmc",
                "model": cfg.model.provenance(),
                "seed": seed,
                "generator": r.generator,
                "iterations": iterations,
                "burn_in": iterations / 5,
                "n_chains": r.n_chains,
                "acceptance_latent": r.acceptance_latent,
                "acceptance_theta": r.acceptance_theta,
                "split_rhat_max": r.split_rhat_max,
                "forced": r.forced,
            });
            write_atomic(&cfg.out_dir.join("provenance.json"), &format!("{}\n", serde_json::to_string_pretty(&provenance)?))?;
        }
        other => return Err(Error::Input(format!("unknown oracle method {other:?}; use quadrature or mcmc"))),
    }
    Ok(())
}
