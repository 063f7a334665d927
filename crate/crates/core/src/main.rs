use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hybrid_l96::config::{ExperimentConfig, Profile, SweepAxis};
use hybrid_l96::experiment::{self as exp, RunPaths};
use hybrid_l96::{par, Result};

/// Learn a Lorenz-96 surrogate from sparse noisy observations.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML file layered over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (overrides `output.dir`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "reference", value_parser = ["reference", "ci"])]
    profile: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the hidden truth.
    GenerateTruth,
    /// Sample noisy observations of the truth.
    Observe,
    /// Fill the observed field with cubic splines.
    Interp,
    /// Train the warm-start network on the interpolated field.
    Init {
        /// Retrain even if a matching network exists.
        #[arg(long)]
        fresh: bool,
    },
    /// Alternate assimilation and training.
    Hybrid {
        /// Ignore checkpoints from an earlier run.
        #[arg(long)]
        fresh: bool,
    },
    /// Compute metrics and plot data for the run directory.
    Evaluate,
    /// Assemble report.json from the run directory.
    Report,
    /// Every stage in order.
    Run {
        #[arg(long)]
        fresh: bool,
    },
    /// One full run per value of an axis.
    Sweep {
        /// sigma_obs, density, K or sigma_m.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        fresh: bool,
    },
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let profile: Profile = cli.profile.parse()?;
    let mut cfg = ExperimentConfig::load(profile, cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(dir) = &cli.output {
        cfg.output.dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &exp::ExperimentReport) {
    for m in &r.metrics {
        match m.std {
            Some(s) => println!("{:<32} {:>12.6}  (std {s:.6})", m.metric, m.value),
            None => println!("{:<32} {:>12.6}", m.metric, m.value),
        }
    }
    for f in &r.failures {
        println!("{:<32} failed: {}", f.metric, f.error);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load(&cli)?;
    let paths = RunPaths::new(&cfg.output.dir);
    match cli.command {
        Command::GenerateTruth => {
            let t = exp::generate_truth_stage(&cfg, &paths)?;
            println!("wrote {} states to {}", t.len(), paths.truth().display());
        }
        Command::Observe => exp::observe_stage(&cfg, &paths)?,
        Command::Interp => {
            let rmse = exp::interp_stage(&cfg, &paths)?;
            println!("interpolation RMSE {rmse:.4}");
        }
        Command::Init { fresh } => {
            exp::init_stage(&cfg, &paths, !fresh)?;
        }
        Command::Hybrid { fresh } => {
            let s = exp::hybrid_stage(&cfg, &paths, !fresh)?;
            println!("{} cycles, best {:?}", s.cycles_run, s.best_cycle);
        }
        Command::Evaluate => {
            exp::evaluate_stage(&cfg, &paths)?;
            exp::emit_plot_data(&paths)?;
        }
        Command::Report => print_report(&exp::report_stage(&cfg, &paths)?),
        Command::Run { fresh } => print_report(&exp::run_experiment(&cfg, !fresh)?),
        Command::Sweep { axis, values, fresh } => {
            let axis: SweepAxis = axis.parse()?;
            let points = exp::run_sweep(&cfg, axis, &values, &cfg.output.dir, !fresh)?;
            for p in &points {
                let v = p.report.as_ref().and_then(|r| r.value("rmse_f_lead1"));
                match (&p.error, v) {
                    (Some(e), _) => println!("{} = {}: failed: {e}", axis.name(), p.value),
                    (None, Some(v)) => println!("{} = {}: rmse_f(h) {v:.4}", axis.name(), p.value),
                    (None, None) => println!("{} = {}: no surrogate metrics", axis.name(), p.value),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    par::init_from_env();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                log::error!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
