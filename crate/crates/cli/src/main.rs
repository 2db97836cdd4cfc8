use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rrnet_core::gradcheck::{format_table, run_suite};
use rrnet_core::par::Executor;
use rrnet_core::pipeline::{
    self, load_config, PipelineError, DATASET_FILE, DETECTIONS_FILE, LOSSES_FILE, REPORT_FILE,
};
use rrnet_core::trainer::{ablation_csv, TrainConfig};

const GRADCHECK_FAILED: u8 = 5;

#[derive(Parser)]
#[command(name = "rrnet", version, about = "Synthetic HOI detection: generate, train, infer, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. frame.use_iim=false.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_name = "N", default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset; writes losses and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file (defaults to OUT/dataset.jsonl).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Decode detections for every scene of a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Also write per-scene heatmaps as graymaps under OUT/heatmaps.
        #[arg(long)]
        dump_heatmaps: bool,
    },
    /// Score detections against a dataset's ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        detections: PathBuf,
    },
    /// Train and score every relation wiring on one corpus.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "N", default_value_t = 1)]
        workers: usize,
        /// Test hook: skew the backward pass of this op.
        #[arg(long, hide = true, value_name = "OP")]
        corrupt_op: Option<String>,
    },
}

fn setup(common: &Common) -> Result<(TrainConfig, Executor), PipelineError> {
    let cfg = load_config(common.config.as_deref(), &common.set)?;
    Ok((cfg, Executor::new(common.workers)))
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Gen { common } => {
            let (cfg, exec) = setup(&common)?;
            let g = pipeline::run_gen(&cfg, &common.out, &exec)?;
            println!("scenes {}", g.scenes);
            println!("sha256 {}", g.digest);
            println!("wrote {}", g.path.display());
        }
        Command::Train { common, data } => {
            let (cfg, exec) = setup(&common)?;
            let data = data.unwrap_or_else(|| common.out.join(DATASET_FILE));
            let record = pipeline::run_train(&cfg, &data, &common.out, &exec)?;
            if let (Some(first), Some(last)) = (record.history.first(), record.history.last()) {
                println!("loss {:.6} -> {:.6} over {} steps", first.total, last.total, record.history.len());
            }
            println!("wrote {}", common.out.join(LOSSES_FILE).display());
            if let Some(ckpt) = &record.final_checkpoint {
                println!("checkpoint {}", ckpt.display());
            }
        }
        Command::Infer { common, data, checkpoint, dump_heatmaps } => {
            let (cfg, exec) = setup(&common)?;
            let dets = pipeline::run_infer(&cfg, &checkpoint, &data, &common.out, dump_heatmaps, &exec)?;
            let n: usize = dets.iter().map(Vec::len).sum();
            println!("{n} detections over {} scenes", dets.len());
            println!("wrote {}", common.out.join(DETECTIONS_FILE).display());
        }
        Command::Eval { common, data, detections } => {
            let (cfg, _) = setup(&common)?;
            let report = pipeline::run_eval(&cfg, &detections, &data, &common.out)?;
            print!("{}", report.to_csv());
            println!("wrote {}", common.out.join(REPORT_FILE).display());
        }
        Command::Ablate { common, data } => {
            let (cfg, exec) = setup(&common)?;
            let rows = pipeline::run_ablate(&cfg, &data, &common.out, &exec)?;
            print!("{}", ablation_csv(&rows));
            println!("wrote {}", common.out.join(REPORT_FILE).display());
        }
        Command::Gradcheck { .. } => unreachable!("handled in main"),
    }
    Ok(())
}

fn gradcheck(seed: u64, workers: usize, corrupt: Option<&str>) -> ExitCode {
    let rows = run_suite(seed, corrupt, &Executor::new(workers));
    print!("{}", format_table(&rows));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("gradcheck failed: {}", failed.join(", "));
        ExitCode::from(GRADCHECK_FAILED)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Gradcheck { seed, workers, corrupt_op } = &cli.command {
        return gradcheck(*seed, *workers, corrupt_op.as_deref());
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
