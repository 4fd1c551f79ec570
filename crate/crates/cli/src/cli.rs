use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::commands::{
    cmd_evaluate, cmd_phantom, cmd_report, cmd_synthesize, cmd_train, EvalArgs, SplitChoice, SynthArgs, TrainArgs,
};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "mafnet", version, about = "Unpaired T1ce synthesis and joint brain-tumor segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic BraTS-layout dataset.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Volume extents X,Y,Z.
        #[arg(long, value_delimiter = ',', default_values_t = [48, 48, 24])]
        dims: Vec<usize>,
    },
    /// Train (or resume) a model; writes checkpoints, logs and the resolved config.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML overrides on top of the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from the small CPU-sized defaults.
        #[arg(long)]
        desk_scale: bool,
        #[arg(long)]
        resume: bool,
        /// Stop (resumably) once this many epochs are complete.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Synthesize T1ce volumes, montages and attention dumps.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration; defaults to the one beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a split and write CSV, JSON and markdown tables.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
        split: SplitChoice,
    },
    /// Plot loss curves and attention maps.
    Report {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `attention.json` written by `synthesize`.
        #[arg(long)]
        attention: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { out, cases, seed, dims } => {
            let dims: [usize; 3] = dims
                .try_into()
                .map_err(|_| CliError::Usage("--dims takes three extents".into()))?;
            let dirs = cmd_phantom(&out, cases, seed, dims)?;
            println!("wrote {} cases to {}", dirs.len(), out.display());
        }
        Command::Train {
            data,
            config,
            out,
            desk_scale,
            resume,
            stop_after_epoch,
        } => {
            let flag = Arc::new(AtomicBool::new(false));
            let handler_flag = flag.clone();
            if let Err(e) = ctrlc::set_handler(move || handler_flag.store(true, Ordering::SeqCst)) {
                log::warn!("interrupt handler unavailable: {e}");
            }
            let args = TrainArgs {
                data,
                config,
                out,
                desk_scale,
                resume,
                stop_after_epoch,
            };
            let s = cmd_train(&args, Some(flag))?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            if !s.finished {
                println!("stopped early; continue with --resume");
            }
        }
        Command::Synthesize { ckpt, data, out, config } => {
            let s = cmd_synthesize(&SynthArgs { ckpt, data, out, config })?;
            println!("synthesized {} slices from {} cases", s.slices, s.cases.len());
        }
        Command::Evaluate {
            ckpt,
            data,
            out,
            config,
            split,
        } => {
            let (_, summary) = cmd_evaluate(&EvalArgs {
                ckpt,
                data,
                out,
                config,
                split,
            })?;
            print!("{}", crate::commands::markdown_tables(&summary));
        }
        Command::Report { history, out, attention } => {
            let s = cmd_report(&history, &out, attention.as_deref())?;
            println!(
                "wrote {} loss and {} attention figures",
                s.loss_figures.len(),
                s.attention_figures.len()
            );
        }
    }
    Ok(())
}
