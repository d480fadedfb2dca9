use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use inla_cli::{compare_command, exit_code, fit_command, oracle_command, simulate_command, ModelSource, RunConfig};
use inla_core::engine::{FitOptions, MarginalPath};

#[derive(Parser)]
#[command(name = "inla-lite", version, about = "Approximate Bayesian inference for spatial binomial recruitment models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Unit-level CSV: unit_id,y,N,<covariates...>
    #[arg(long)]
    data: PathBuf,
    /// Adjacency list: one line per unit, `unit_id n_neighbors ids...`
    #[arg(long)]
    adjacency: PathBuf,
    /// JSON model configuration file
    #[arg(long, conflicts_with = "preset")]
    model: Option<PathBuf>,
    /// Named model preset
    #[arg(long)]
    preset: Option<String>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Grid step in standardized hyperparameter coordinates
    #[arg(long, default_value_t = 1.0)]
    delta_z: f64,
    /// Log-density drop at which grid exploration stops
    #[arg(long, default_value_t = 2.5)]
    delta_pi: f64,
    /// Latent marginal path: sla or la
    #[arg(long, default_value = "sla")]
    marginal: String,
}

impl ModelArgs {
    fn run_config(&self) -> Result<RunConfig, inla_core::Error> {
        let model = match (&self.model, &self.preset) {
            (Some(path), None) => ModelSource::ConfigFile(path.clone()),
            (None, Some(name)) => ModelSource::Preset(name.clone()),
            _ => {
                return Err(inla_core::Error::Input(
                    "give exactly one of --model or --preset".into(),
                ))
            }
        };
        let marginal_path = match self.marginal.as_str() {
            "sla" => MarginalPath::Sla,
            "la" => MarginalPath::La,
            other => {
                return Err(inla_core::Error::Input(format!(
                    "unknown marginal path {other:?}; use sla or la"
                )))
            }
        };
        let options = FitOptions {
            delta_z: self.delta_z,
            delta_pi: self.delta_pi,
            marginal_path,
            ..FitOptions::default()
        };
        Ok(RunConfig {
            data_path: self.data.clone(),
            adjacency_path: self.adjacency.clone(),
            model,
            out_dir: self.out.clone(),
            options,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model and emit marginal, effect, unit, and DIC tables
    Fit(ModelArgs),
    /// Fit several presets and emit a consolidated DIC table
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        adjacency: PathBuf,
        /// Comma-separated preset names
        #[arg(long, value_delimiter = ',')]
        presets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        delta_z: f64,
        #[arg(long, default_value_t = 2.5)]
        delta_pi: f64,
    },
    /// Generate a synthetic dataset with known truth
    Simulate {
        /// Named fixture (region-like)
        #[arg(long)]
        preset: Option<String>,
        /// Small lattice with this many units
        #[arg(long)]
        units: Option<usize>,
        /// Generator seed (mandatory)
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a brute-force ground-truth engine (quadrature or mcmc)
    Oracle {
        #[command(flatten)]
        model_args: ModelArgs,
        /// quadrature or mcmc
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Emit sampler summaries even when convergence diagnostics fail
        #[arg(long, default_value_t = false)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<(), inla_core::Error> {
    match cli.command {
        Command::Fit(args) => fit_command(&args.run_config()?),
        Command::Compare { data, adjacency, presets, out, delta_z, delta_pi } => {
            if presets.is_empty() {
                return Err(inla_core::Error::Input("--presets must name at least one preset".into()));
            }
            let options = FitOptions { delta_z, delta_pi, ..FitOptions::default() };
            compare_command(&data, &adjacency, &presets, &out, &options)
        }
        Command::Simulate { preset, units, seed, out } => {
            simulate_command(preset.as_deref(), units, seed, &out)
        }
        Command::Oracle { model_args, method, seed, iterations, force } => {
            oracle_command(&model_args.run_config()?, &method, seed, iterations, force)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap already formats usage errors; map them to the
            // configuration exit code unless it's help/version output
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
