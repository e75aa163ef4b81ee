use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use vlad_core::data::write_dataset;
use vlad_core::pipeline::{cmd_ablate, cmd_eval, cmd_sample, cmd_train, CHECKPOINT_FILE};
use vlad_core::train::records_for;
use vlad_core::{par, RunConfig};

#[derive(Parser)]
#[command(name = "vlad", version, about = "Layout-guided glyph diffusion: train, sample, evaluate, ablate")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the checkpoint and loss logs into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one PGM per prompt line.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the noise-free reverse process.
        #[arg(long)]
        deterministic: bool,
    },
    /// Score a checkpoint on a dataset file; writes a one-row CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train full, no_ccm and no_guidance variants and write a three-row CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset file.
    Gendata {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    par::init_threads(if cfg.threads == 0 { default_threads() } else { cfg.threads });
    Ok(cfg)
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let outcome = cmd_train(&cfg, &out)?;
            for e in &outcome.epochs {
                eprintln!(
                    "epoch {:>3}  total {:.4}  align {:.4}  diff {:.4}  tlg {:.4}",
                    e.epoch, e.mean_total, e.mean_align, e.mean_diff, e.mean_tlg
                );
            }
            println!("{}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Sample {
            ckpt,
            prompts,
            out,
            deterministic,
        } => {
            let files = cmd_sample(&ckpt, &prompts, &out, deterministic)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
        Command::Eval { ckpt, testset, out } => {
            let report = cmd_eval(&ckpt, &testset, &out)?;
            println!("{}", report.csv_row());
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(&config)?;
            for r in cmd_ablate(&cfg, &out)? {
                println!("{}", r.csv_row());
            }
        }
        Command::Gendata { seed, count, out } => {
            write_dataset(&out, &records_for(seed, count)?)?;
            println!("wrote {count} records to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
