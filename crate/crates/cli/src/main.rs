use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jointflow::config::{ExperimentConfig, ExperimentKind};
use jointflow::experiment::{run_experiment, write_scene};
use jointflow::io::{load_flow, load_sequence};
use jointflow::metrics::{FlowRegion, Scores};
use jointflow::{Error, Result};

/// Environment variable holding the worker count for parallel experiments.
const WORKERS_ENV: &str = "JOINTFLOW_WORKERS";

#[derive(Parser)]
#[command(
    name = "jointflow",
    version,
    about = "Joint TV image reconstruction and optical flow"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one joint reconstruction (denoise_joint or single_solve).
    Solve(RunArgs),
    /// Compare joint and static flow over noise levels.
    Sweep(RunArgs),
    /// Produce the five-row comparison table.
    Compare(RunArgs),
    /// Insert and reconstruct unknown frames.
    Inpaint(RunArgs),
    /// Score a reconstruction against references.
    Metrics {
        /// Reference frames.
        #[arg(long, requires = "reconstruction")]
        reference: Option<PathBuf>,
        /// Reconstructed frames.
        #[arg(long, requires = "reference")]
        reconstruction: Option<PathBuf>,
        /// Estimated flow (.flo files).
        #[arg(long, requires = "flow_gt")]
        flow: Option<PathBuf>,
        /// Ground-truth flow (.flo files).
        #[arg(long, requires = "flow")]
        flow_gt: Option<PathBuf>,
        /// Pixels excluded at the border when scoring flow.
        #[arg(long, default_value_t = 0)]
        margin: usize,
    },
    /// Write the configured synthetic scene to disk.
    Genscene {
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment configuration file.
    config: PathBuf,
    /// Overrides the output directory of the configuration.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

fn workers() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{WORKERS_ENV} must be a positive integer, got {s:?}"
            ))),
        },
        Err(_) => Ok(None),
    }
}

fn load_config(args: &RunArgs, allowed: &[ExperimentKind]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if !allowed.contains(&cfg.experiment) {
        return Err(Error::Config(format!(
            "experiment {:?} cannot be run by this command (expected one of {allowed:?})",
            cfg.experiment
        )));
    }
    if let Some(o) = &args.output {
        cfg.output = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(args: &RunArgs, allowed: &[ExperimentKind]) -> Result<serde_json::Value> {
    let cfg = load_config(args, allowed)?;
    let out = run_experiment(&cfg, workers()?)?;
    Ok(serde_json::json!({
        "output": cfg.output,
        "files": out.files.len(),
        "summary": out.summary,
    }))
}

fn metrics(
    pair: Option<(&Path, &Path)>,
    flows: Option<(&Path, &Path)>,
    margin: usize,
) -> Result<Scores> {
    if pair.is_none() && flows.is_none() {
        return Err(Error::Config(
            "metrics needs --reference/--reconstruction or --flow/--flow-gt".into(),
        ));
    }
    let mut scores = Scores::default();
    if let Some((r, c)) = pair {
        scores = scores.merge(Scores::images(&load_sequence(r)?, &load_sequence(c)?)?);
    }
    if let Some((v, g)) = flows {
        scores = scores.merge(Scores::flows(
            &load_flow(v)?,
            &load_flow(g)?,
            FlowRegion { margin },
        )?);
    }
    Ok(scores)
}

fn execute(cli: Cli) -> Result<serde_json::Value> {
    use ExperimentKind::*;
    match cli.command {
        Command::Solve(a) => run(&a, &[DenoiseJoint, SingleSolve]),
        Command::Sweep(a) => run(&a, &[NoiseSweep]),
        Command::Compare(a) => run(&a, &[ComparisonTable]),
        Command::Inpaint(a) => run(&a, &[TemporalInpaint]),
        Command::Metrics {
            reference,
            reconstruction,
            flow,
            flow_gt,
            margin,
        } => {
            let pair = reference.as_deref().zip(reconstruction.as_deref());
            let flows = flow.as_deref().zip(flow_gt.as_deref());
            let s = metrics(pair, flows, margin)?;
            Ok(serde_json::to_value(s).expect("scores serialize"))
        }
        Command::Genscene { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let files = write_scene(&cfg, &out)?;
            Ok(serde_json::json!({ "output": out, "files": files.len() }))
        }
    }
}

fn error_record(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_record("usage", e.render().to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
