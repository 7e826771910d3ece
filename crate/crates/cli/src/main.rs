use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use strokenet::model::Ablation;
use strokenet_cli::commands::{self, AblateArgs};
use strokenet_cli::configure_threads;

#[derive(Parser)]
#[command(name = "strokenet", version, about = "Stroke-assisted scene text detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblationArg {
    Tlp,
    TlpSlp,
    TlpTg,
    Full,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Tlp => Ablation::Tlp,
            AblationArg::TlpSlp => Ablation::TlpSlp,
            AblationArg::TlpTg => Ablation::TlpTg,
            AblationArg::Full => Ablation::Full,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Samples per configured subset.
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trains one ablation and writes a checkpoint and step log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablation: AblationArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs a checkpoint over a dataset and scores it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also writes overlay PNGs.
        #[arg(long)]
        overlays: bool,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Trains and scores all four ablations with a shared seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Held-out dataset; defaults to the tail of --data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        holdout: usize,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate { config, count, out, seed } => {
            let m = commands::generate(&config, count, &out, seed)?;
            println!("wrote {} samples to {}", m.total, out.display());
        }
        Command::Train { data, config, ablation, out } => {
            let o = commands::train(&data, config.as_deref(), ablation.into(), &out)?;
            let last = o.logs.last().map_or(f64::NAN, |l| l.total);
            println!("trained {} steps, final loss {last:.6}, checkpoint {}", o.logs.len(), commands::checkpoint_path(&out).display());
        }
        Command::Eval { checkpoint, data, out, overlays, iou } => {
            let r = commands::eval(&checkpoint, &data, &out, overlays, iou)?;
            println!("precision {:.6} recall {:.6} hmean {:.6}", r.precision, r.recall, r.hmean);
        }
        Command::Ablate { data, out, config, eval_data, holdout, iou } => {
            let rows = commands::ablate(&AblateArgs {
                data: &data,
                eval_data: eval_data.as_deref(),
                holdout,
                config: config.as_deref(),
                out: &out,
                iou,
            })?;
            println!("ablation,recall,precision,hmean");
            for r in rows {
                println!("{},{:.6},{:.6},{:.6}", r.ablation, r.recall, r.precision, r.hmean);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
