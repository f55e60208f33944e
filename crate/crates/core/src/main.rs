use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use int8_train::cli::{self, exit_code, SNAPSHOT_FILE};
use int8_train::config::{AnalysisSection, BenchSection, ExperimentConfig};
use int8_train::{Error, Result};

#[derive(Parser)]
#[command(name = "int8train", version, about = "INT8 training experiments")]
struct Args {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write trace, summary, checkpoint and snapshots.
    Train,
    /// Gradient-distribution report from a trace and its snapshots.
    Analyze {
        trace: PathBuf,
        /// Defaults to the snapshot file next to the trace, if present.
        #[arg(long)]
        snapshots: Option<PathBuf>,
    },
    /// Check the average-regret bound on the convex harness.
    VerifyBound,
    /// Time FP32 against INT8 kernels.
    Bench,
}

fn load(args: &Args) -> Result<Option<ExperimentConfig>> {
    let Some(path) = &args.config else { return Ok(None) };
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = args.seed {
        cfg.experiment.seed = seed;
    }
    Ok(Some(cfg))
}

fn require(args: &Args) -> Result<ExperimentConfig> {
    load(args)?.ok_or_else(|| Error::Config("this command needs --config PATH".into()))
}

fn run(args: &Args) -> Result<u8> {
    match &args.command {
        Command::Train => {
            let cfg = require(args)?;
            let out = args.out.clone().unwrap_or_else(|| cfg.experiment.out.join(&cfg.experiment.name));
            let o = cli::cmd_train(&cfg, &out)?;
            println!("{}", cli::summary_line(&cfg.experiment.name, cfg.experiment.mode, &o.summary));
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Analyze { trace, snapshots } => {
            let a = load(args)?.map(|c| c.analysis).unwrap_or_else(AnalysisSection::default);
            let dir = trace.parent().unwrap_or(Path::new("."));
            let snaps = snapshots.clone().or_else(|| Some(dir.join(SNAPSHOT_FILE)).filter(|p| p.exists()));
            let out = args.out.clone().unwrap_or_else(|| dir.join("analysis"));
            let o = cli::cmd_analyze(trace, snaps.as_deref(), a.bins, a.max_samples, &out)?;
            let rejected = o.ks.iter().filter(|r| r.rejects()).count();
            println!("{} KS fits, {rejected} rejected at the 0.05 level", o.ks.len());
            for (layer, dc) in &o.mean_dc {
                println!("layer {layer}: mean cosine distance {dc:.6}");
            }
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::VerifyBound => {
            let cfg = require(args)?;
            let out = args.out.clone().unwrap_or_else(|| cfg.experiment.out.join(&cfg.experiment.name));
            let r = cli::cmd_verify_bound(&cfg, &out)?;
            println!(
                "T={} avg regret {:.6e} <= bound {:.6e} (terms {:.6e} + {:.6e} + {:.6e}): {}",
                r.t, r.avg_regret, r.bound, r.terms.term1, r.terms.term2, r.terms.term3, r.holds
            );
            Ok(if r.holds { 0 } else { 1 })
        }
        Command::Bench => {
            let cfg = load(args)?;
            let seed = args.seed.or(cfg.as_ref().map(|c| c.experiment.seed)).unwrap_or(0);
            let bench = cfg.map(|c| c.bench).unwrap_or_else(BenchSection::default);
            let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs/bench"));
            let (conv, gemm) = cli::cmd_bench(&bench, seed, &out)?;
            println!("geometry,fp32_seconds,int8_seconds,ratio");
            for r in &conv {
                println!("{},{:.3e},{:.3e},{:.3}", r.geometry, r.baseline, r.int8, r.ratio());
            }
            println!("geometry,unfused_seconds,fused_seconds,ratio");
            for r in &gemm {
                println!("{},{:.3e},{:.3e},{:.3}", r.geometry, r.baseline, r.int8, r.ratio());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
