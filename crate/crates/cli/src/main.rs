mod failure;
mod files;
mod invocation;
mod manifest;
mod model_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use sweetexit::eval::Metric;
use sweetexit::exit::PolicyKind;
use sweetexit::train::Regime;
use sweetexit::{Error, Result};

use invocation::Invocation;
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "sweetexit", version = manifest::VERSION, about = "Train and evaluate early-exit transformer classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/validation pair as TSV.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a model directory under one regime.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_regime)]
        regime: Regime,
        #[arg(long)]
        out: PathBuf,
    },
    /// Standalone score of every classifier.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "accuracy", value_parser = parse_metric)]
        metric: Metric,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Speed/accuracy curve over the threshold grid.
    Curve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_policy)]
        policy: PolicyKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "accuracy", value_parser = parse_metric)]
        metric: Metric,
        /// Defaults to `temperatures.json` in the model directory when present.
        #[arg(long)]
        temperatures: Option<PathBuf>,
        /// Gate training data; defaults to the model's training split.
        #[arg(long)]
        gate_data: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Also write one trace file per threshold.
        #[arg(long)]
        traces: bool,
    },
    /// Fit per-classifier temperatures.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient conflict between classifiers on one batch.
    Conflict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        batch_size: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        matrix: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every regime over several seeds and tabulate.
    Compare {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value = "compare-out")]
        out: PathBuf,
    },
    /// Replay the invocation stored in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Write to a different location than the original run.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse::<Regime>().map_err(|e| e.to_string())
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    s.parse::<Metric>().map_err(|e| e.to_string())
}

fn parse_policy(s: &str) -> std::result::Result<PolicyKind, String> {
    match s {
        "confidence" => Ok(PolicyKind::Confidence),
        "lte" => Ok(PolicyKind::LearnToExit),
        other => Err(format!("unknown policy {other:?}; expected confidence or lte")),
    }
}

fn resolve(command: Command) -> Result<Invocation> {
    match command {
        Command::GenData { spec, out } => Invocation::gen_data(&spec, &out),
        Command::Train { config, regime, out } => Invocation::train(&config, regime, &out),
        Command::Eval { model, data, metric, batch_size, out } => {
            Invocation::eval(&model, &data, metric, batch_size, &out)
        }
        Command::Curve { model, policy, data, out, metric, temperatures, gate_data, batch_size, traces } => {
            Invocation::curve(
                &model,
                &data,
                policy,
                metric,
                temperatures.as_deref(),
                gate_data.as_deref(),
                batch_size,
                traces,
                &out,
            )
        }
        Command::Calibrate { model, data, batch_size, out } => {
            Invocation::calibrate(&model, &data, batch_size, out.as_deref())
        }
        Command::Conflict { model, batch_size, data, seed, matrix, out } => {
            Invocation::conflict(&model, data.as_deref(), batch_size, seed, matrix.as_deref(), out.as_deref())
        }
        Command::Compare { configs, seeds, out } => Invocation::compare(&configs, seeds, &out),
        Command::Rerun { .. } => unreachable!("handled by the caller"),
    }
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let invocation = match cli.command {
        Command::Rerun { manifest, out } => {
            let recorded = Manifest::load(&manifest)?;
            recorded.check_inputs()?;
            let mut inv = recorded.invocation;
            if let Some(out) = out {
                inv.set_out(files::output_path(&out)?);
            }
            inv
        }
        command => resolve(command)?,
    };
    let manifest = Manifest::new(argv, invocation.clone(), invocation.seeds(), &invocation.inputs()?)?;
    invocation.execute()?;
    files::write_json(&invocation.manifest_path(), &manifest)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", failure::error_json("usage", &message.trim(), None));
            return ExitCode::from(failure::USAGE_STATUS as u8);
        }
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => report(&err),
    }
}

fn report(err: &Error) -> ExitCode {
    let (status, kind) = failure::classify(err);
    eprintln!("{}", failure::error_json(kind, err, failure::details(err)));
    ExitCode::from(status as u8)
}
