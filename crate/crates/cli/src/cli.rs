use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use srtc::data::{load_csv, normalize_rss};

use crate::checkpoint::{Artifact, Checkpoint};
use crate::config::RunConfig;
use crate::error::{config_err, Result};
use crate::metrics::MetricsWriter;
use crate::pipeline::{self, RunDir};

#[derive(Debug, Parser)]
#[command(
    name = "srtc",
    version,
    about = "Multi-teacher representation transfer for RSS fingerprint localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured datasets and the target split as CSV.
    GenData(RunArgs),
    /// Train one expert per source and save teacher checkpoints.
    TrainExperts(RunArgs),
    /// Distill a target model from teacher checkpoints.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        /// Teacher checkpoints, in order.
        #[arg(long, num_args = 1.., required = true)]
        teachers: Vec<PathBuf>,
        /// Target training CSV; defaults to the configured target's train split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a model checkpoint on a CSV of readings in dB.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Supplies the CSV schema and probe radii.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Generate, train experts, distill, evaluate and compare.
    Pipeline(RunArgs),
    /// Distill under each of the six constraint masks.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Reuse these teachers instead of training new ones.
        #[arg(long, num_args = 1..)]
        teachers: Option<Vec<PathBuf>>,
    },
}

/// Entry point: 0 on success, 1 on failure, 2 on a usage error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("SRTC_LOG_LEVEL", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    Ok(RunConfig::from_path(&args.config)?.with_seed(args.seed))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => {
            let cfg = load_config(&args)?;
            cfg.validate()?;
            let run = RunDir::create(&args.out, &cfg.digest()?)?;
            run.write_config(&cfg)?;
            for path in pipeline::gen_data(&cfg, &run)? {
                println!("{}", path.display());
            }
        }
        Command::TrainExperts(args) => {
            let cfg = load_config(&args)?;
            cfg.validate()?;
            let run = RunDir::create(&args.out, &cfg.digest()?)?;
            run.write_config(&cfg)?;
            for path in pipeline::train_experts(&cfg, &run)? {
                println!("{}", path.display());
            }
        }
        Command::Distill {
            run: args,
            teachers,
            data,
        } => {
            let cfg = load_config(&args)?;
            cfg.validate_distill()?;
            distill_command(&cfg, &args.out, &teachers, data.as_deref())?;
        }
        Command::Evaluate {
            model,
            data,
            config,
            out,
        } => evaluate_command(&model, &data, config.as_deref(), &out)?,
        Command::Pipeline(args) => {
            let cfg = load_config(&args)?;
            let output = pipeline::run_pipeline(&cfg, &args.out)?;
            println!("{}", output.run.root.display());
        }
        Command::Ablate { run: args, teachers } => {
            let cfg = load_config(&args)?;
            let (run, rows) = pipeline::run_ablation(&cfg, &args.out, teachers)?;
            for row in rows {
                println!("{:<16} {:.3}", row.constraints, row.mae_m);
            }
            println!("{}", run.root.display());
        }
    }
    Ok(())
}

fn distill_command(cfg: &RunConfig, out: &Path, teachers: &[PathBuf], data: Option<&Path>) -> Result<()> {
    let norm = cfg.data.normalization;
    let raw = match data {
        Some(path) => load_csv(path, &cfg.data.target.schema.clone().unwrap_or_default())?,
        None => pipeline::target_split(cfg)?.0,
    };
    let train = normalize_rss(&raw, norm)?;
    let run = RunDir::create(out, &cfg.digest()?)?;
    run.write_config(cfg)?;
    let mut w = MetricsWriter::create(&run.metrics()?.join("distill.jsonl"))?;
    let net = pipeline::distill_phase(teachers, &train, &cfg.model, &cfg.distill_config(), &mut w, "distill")?;
    let path = run.models()?.join("distilled.srtc");
    let ckpt = Checkpoint {
        config_digest: cfg.digest()?,
        normalization: Some(norm),
        artifact: Artifact::Model(net),
    };
    pipeline::save(&ckpt, cfg.checkpoint_dtype.into(), &path)?;
    println!("{}", path.display());
    Ok(())
}

fn evaluate_command(model: &Path, data: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = config.map(RunConfig::from_path).transpose()?;
    let ckpt = pipeline::load(model)?;
    let digest = ckpt.config_digest.clone();
    let normalization = ckpt.normalization;
    let net = ckpt
        .model()
        .ok_or_else(|| config_err(format!("{} is not a model checkpoint", model.display())))?;
    let schema = cfg
        .as_ref()
        .and_then(|c| c.data.target.schema.clone())
        .unwrap_or_default();
    let probes = cfg
        .as_ref()
        .map_or_else(|| srtc::eval::DEFAULT_PROBES.to_vec(), |c| c.eval.probes.clone());
    let raw = load_csv(data, &schema)?;
    let report = pipeline::evaluate_model(&net, normalization, &raw, &probes)?;
    let run_digest = match &cfg {
        Some(c) => c.digest()?,
        None if digest.len() >= 12 => digest,
        None => "unconfigured".into(),
    };
    let run = RunDir::create(out, &run_digest)?;
    let reports = run.reports()?;
    let path = pipeline::write_report(&report, &reports, "report")?;
    info!(
        "MAE {:.3} m, P75 {:.3} m, P95 {:.3} m over {} samples",
        report.mae_m, report.p75_m, report.p95_m, report.n_samples
    );
    println!("{}", path.display());
    Ok(())
}
