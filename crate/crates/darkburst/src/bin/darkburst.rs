//! Command-line front end. All logic lives in the library; this file
//! only parses flags, wires files to the drivers and maps errors to
//! exit codes (2 configuration, 3 data, 4 numerics).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use darkburst::checkpoint::{load_checkpoint, save_checkpoint};
use darkburst::config::{load_config, RunConfig};
use darkburst::dataset::gen_dataset;
use darkburst::error::{Error, Result};
use darkburst::formats::write_ppm;
use darkburst::harness;

#[derive(Parser)]
#[command(name = "darkburst", version, about = "Burst low-light raw image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of dark bursts with ground truth
    GenDataset(GenDatasetArgs),
    /// Train one stage of the network on a generated dataset
    Train(TrainArgs),
    /// Enhance a stored burst into an RGB image
    Enhance(EnhanceArgs),
    /// Score a checkpoint on a dataset's held-out scenes
    Evaluate(EvaluateArgs),
    /// Run the built-in invariant battery
    Selftest,
}

#[derive(Args)]
struct GenDatasetArgs {
    /// Run configuration; built-in defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory the dataset is written into
    #[arg(long)]
    out: PathBuf,
    /// Scene count, overriding the config
    #[arg(long)]
    count: Option<usize>,
    /// Master seed, overriding the config
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration naming the stage and dataset
    #[arg(long)]
    config: PathBuf,
    /// Path the trained checkpoint is written to
    #[arg(long)]
    out: PathBuf,
    /// Stage override: coarse, fine or set
    #[arg(long)]
    stage: Option<String>,
    /// Seed override for the whole run
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Run configuration; built-in defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input burst container
    #[arg(long)]
    burst: PathBuf,
    /// Output image (binary PPM)
    #[arg(long)]
    out: PathBuf,
    /// Amplification ratio; derived from exposures when omitted
    #[arg(long)]
    ratio: Option<f64>,
    /// Cap on the number of frames fed to the network
    #[arg(long)]
    burst_limit: Option<usize>,
    /// Motion masking override: on or off
    #[arg(long)]
    motion: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run configuration; built-in defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to score against
    #[arg(long)]
    data: PathBuf,
    /// Report file; written to stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap on the number of frames fed per burst
    #[arg(long)]
    burst_limit: Option<usize>,
}

fn load_or_default(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenDataset(args) => {
            let config = load_or_default(&args.config)?;
            let count = args.count.unwrap_or(config.data.scenes);
            let seed = args.seed.unwrap_or(config.train.seed);
            let bursts = gen_dataset(&config, &args.out, count, seed)?;
            println!("wrote {count} scenes ({bursts} bursts) to {}", args.out.display());
        }
        Command::Train(args) => {
            let mut config = load_config(&args.config)?;
            if let Some(stage) = &args.stage {
                config.train.stage = Some(stage.parse()?);
            }
            if let Some(seed) = args.seed {
                config.train.seed = seed;
            }
            let outcome = harness::train(&config)?;
            save_checkpoint(&args.out, &outcome.checkpoint)?;
            let n = outcome.losses.len();
            let head = n.div_ceil(10);
            let first: f64 = outcome.losses[..head].iter().sum::<f64>() / head as f64;
            let last: f64 = outcome.losses[n - head..].iter().sum::<f64>() / head as f64;
            println!(
                "stage {} done: {n} steps, mean loss {first:.4} (first tenth) -> {last:.4} (last tenth)",
                outcome.checkpoint.stage
            );
            println!("checkpoint written to {}", args.out.display());
        }
        Command::Enhance(args) => {
            let config = load_or_default(&args.config)?;
            let checkpoint = load_checkpoint(&args.checkpoint)?;
            let motion = match args.motion.as_deref() {
                None => None,
                Some("on") => Some(true),
                Some("off") => Some(false),
                Some(other) => {
                    return Err(Error::config(format!(
                        "--motion takes on or off, got {other:?}"
                    )))
                }
            };
            let report = harness::enhance(
                &config,
                &checkpoint,
                &args.burst,
                args.ratio,
                args.burst_limit,
                motion,
            )?;
            write_ppm(&args.out, &report.output)?;
            println!(
                "enhanced {} of {} frames at ratio {:.1} ({} dropped by motion masking)",
                report.kept, report.frames_loaded, report.ratio, report.dropped
            );
            let t = &report.timings;
            println!(
                "timings: coarse {:.3}s, motion {:.3}s, fusion {:.3}s, total {:.3}s",
                t.coarse,
                t.motion,
                t.fusion,
                t.total()
            );
            println!("wrote {}", args.out.display());
        }
        Command::Evaluate(args) => {
            let config = load_or_default(&args.config)?;
            let checkpoint = load_checkpoint(&args.checkpoint)?;
            let report =
                harness::evaluate(&checkpoint.params, &config, &args.data, args.burst_limit)?;
            let text = report.render();
            match &args.out {
                Some(path) => {
                    std::fs::write(path, &text)?;
                    println!("report written to {}", path.display());
                }
                None => print!("{text}"),
            }
        }
        Command::Selftest => {
            let mut all_passed = true;
            for result in harness::selftest() {
                if result.passed {
                    println!("pass  {}", result.name);
                } else {
                    all_passed = false;
                    println!("FAIL  {}: {}", result.name, result.detail);
                }
            }
            if !all_passed {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
