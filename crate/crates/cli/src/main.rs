use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use cpsf::conformal::RadiusMethod;
use cpsf::harness::pipeline::{self, parse_controller};
use cpsf::harness::{ExperimentConfig, Layout};

#[derive(Parser, Debug)]
#[command(name = "cpsf", version, about = "Conformal predictive safety filter experiments")]
struct Cli {
    /// Experiment config (TOML). Defaults to <out>/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Conformal,
    Gaussian,
}

impl From<Method> for RadiusMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Conformal => RadiusMethod::Conformal,
            Method::Gaussian => RadiusMethod::Gaussian,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the training, calibration and test episode sets.
    GenData,
    /// Train the trajectory predictor.
    TrainPredictor,
    /// Compute conformal radii on the calibration set.
    Calibrate,
    /// Fit Gaussian radii on the calibration set.
    FitGaussian,
    /// Build the filter training set and train the safety filter.
    TrainFilter {
        #[arg(long, value_enum, default_value = "conformal")]
        method: Method,
    },
    /// Run a single episode and print its record as JSON.
    Run {
        #[arg(long, default_value = "cpsf")]
        controller: String,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
    },
    /// Paired-seed evaluation of the configured controllers.
    Evaluate,
    /// Per-step coverage table (CSV) and plot (SVG).
    CoverageReport {
        #[arg(long, value_enum, default_value = "conformal")]
        method: Method,
    },
    /// Prediction-error histograms by inter-agent distance.
    ShiftDiagnostic,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let stored = cli.out.join("config.toml");
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if stored.exists() => ExperimentConfig::load(&stored)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let layout = Layout::new(&cli.out);
    match &cli.command {
        Command::GenData => {
            let s = pipeline::gen_data(&cfg, &layout)?;
            println!("episodes: train_y {} train_sf {} cal {} test {}", s.train_y, s.train_sf, s.cal, s.test);
        }
        Command::TrainPredictor => {
            let o = pipeline::train_predictor_stage(&cfg, &layout)?;
            println!("predictor: best epoch {} val loss {:.6}{}", o.best_epoch, o.best_val_loss, if o.diverged { " (diverged)" } else { "" });
        }
        Command::Calibrate => {
            let r = pipeline::calibrate_stage(&cfg, &layout)?;
            println!("conformal radii (n = {}, p = {:?}, delta_bar = {}): {:?}", r.n, r.p, r.delta_bar, r.radii);
        }
        Command::FitGaussian => {
            let r = pipeline::fit_gaussian_stage(&cfg, &layout)?;
            println!("gaussian radii (n = {}, z = {:?}): {:?}", r.n, r.z, r.radii);
        }
        Command::TrainFilter { method } => {
            let o = pipeline::train_filter_stage(&cfg, &layout, (*method).into())?;
            println!(
                "filter: best epoch {} lambda {} imitation {:.6} hinge {:.6} violation rate {:.4}",
                o.best_epoch, o.final_lambda, o.validation.imitation, o.validation.hinge, o.validation.hinge_rate
            );
        }
        Command::Run { controller, episode_seed } => {
            let kind = parse_controller(controller)?;
            let (record, metrics) = pipeline::run_stage(&cfg, &layout, kind, *episode_seed)?;
            println!("{}", serde_json::json!({ "metrics": metrics, "record": record }));
        }
        Command::Evaluate => {
            let r = pipeline::evaluate_stage(&cfg, &layout)?;
            for c in &r.controllers {
                println!(
                    "{:<12} collisions {:>4} ({:.1}%) failures {:>4} ({:.1}%) min dist {} time to goal {}",
                    c.controller,
                    c.collisions,
                    c.collision_pct,
                    c.failures,
                    c.failure_pct,
                    c.mean_min_distance.map_or("-".into(), |v| format!("{v:.3}")),
                    c.mean_time_to_goal.map_or("-".into(), |v| format!("{v:.3}"))
                );
            }
        }
        Command::CoverageReport { method } => {
            let r = pipeline::coverage_stage(&cfg, &layout, (*method).into())?;
            for row in &r.rows {
                println!("h={} C={} coverage={:.4} mean error={:.4}", row.h, row.radius, row.coverage, row.mean_error);
            }
            println!("joint coverage {:.4}", r.joint);
        }
        Command::ShiftDiagnostic => {
            let r = pipeline::shift_stage(&cfg, &layout)?;
            for d in &r.distances {
                println!("categories {}-{} h={} ks={}", d.lower_category, d.lower_category + 1, d.step, d.ks.map_or("empty".into(), |v| format!("{v:.4}")));
            }
            println!("first three categories similar: {}", r.similar_first_three);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli).with_context(|| format!("cpsf {}", subcommand_name(&cli.command))) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::TrainPredictor => "train-predictor",
        Command::Calibrate => "calibrate",
        Command::FitGaussian => "fit-gaussian",
        Command::TrainFilter { .. } => "train-filter",
        Command::Run { .. } => "run",
        Command::Evaluate => "evaluate",
        Command::CoverageReport { .. } => "coverage-report",
        Command::ShiftDiagnostic => "shift-diagnostic",
    }
}
