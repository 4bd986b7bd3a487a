use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zsdet::bench::{self, AblationAxis, Overrides, RunConfig};
use zsdet::{Error, TaskMode, TransferVariant};

#[derive(Parser)]
#[command(name = "zsdet", version, about = "Zero-shot detection heads: synthesize, train, evaluate, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dataset directory (defaults to the config's `dataset_dir`, then `--out`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Checkpoint for `eval` (defaults to `<out>/checkpoint.json`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<TaskMode>,
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<TransferVariant>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Fine-tune the heads on the training partition.
    Train,
    /// Predict on the test partition and write reports.
    Eval,
    /// Sweep one component: background, regressor-transfer, segmentor-transfer,
    /// classifier-loss or beta-sweep.
    Ablate { axis: String },
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck,
}

fn parse_mode(s: &str) -> Result<TaskMode, String> {
    TaskMode::parse(s).ok_or_else(|| format!("expected one of zsd, gzsd, zsi, gzsi; got `{s}`"))
}

fn parse_variant(s: &str) -> Result<TransferVariant, String> {
    TransferVariant::parse(s)
        .ok_or_else(|| format!("expected one of learned, most-similar, linear-combination, no-transfer; got `{s}`"))
}

fn run(cli: Cli) -> zsdet::Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply(&Overrides {
        seed: cli.seed,
        beta: cli.beta,
        mode: cli.mode,
        variant: cli.variant,
    });
    if cli.data.is_some() {
        config.dataset_dir = cli.data.clone();
    }
    if cli.checkpoint.is_some() {
        config.checkpoint = cli.checkpoint.clone();
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Synth => {
            bench::cmd_synth(&config, out)?;
            println!("dataset written to {}", out.display());
        }
        Command::Train => {
            bench::cmd_train(&config, out)?;
            println!("checkpoint written to {}", out.join("checkpoint.json").display());
        }
        Command::Eval => {
            let (_, report) = bench::cmd_eval(&config, out)?;
            print!("{}", report.to_csv());
        }
        Command::Ablate { axis } => {
            let axis = AblationAxis::parse(&axis)?;
            let (_, entries) = bench::cmd_ablate(&config, axis, out)?;
            for e in entries {
                println!(
                    "{:<20} seen mAP {:>7} unseen mAP {:>7} seen dets {}",
                    e.row.variant,
                    pct(e.row.map_seen),
                    pct(e.row.map_unseen),
                    e.row.seen_detections
                );
            }
        }
        Command::Gradcheck => {
            let (_, results) = bench::cmd_gradcheck(&config, out)?;
            for r in results {
                println!("{:<14} max relative error {:.3e}", r.loss.name(), r.max_rel_error);
            }
        }
    }
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("zsdet: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
