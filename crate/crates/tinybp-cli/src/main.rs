//! `tinybp`: train, search, quantize, and compile compact 1-D CNN
//! blood-pressure estimators.
//!
//! Exit codes: 0 success, 1 usage or config problems, 2 numerical failures,
//! 3 storage budget violations.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod pipeline;
mod svg;

use commands::SplitName;
use config::{Overrides, PipelineConfig};

#[derive(Parser, Debug)]
#[command(
    name = "tinybp",
    version,
    about = "Train, search, quantize and compile 1-D CNN blood-pressure estimators"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train the seed network and report its held-out MAE.
    TrainSeed {
        #[command(flatten)]
        ov: Overrides,
    },
    /// Search once per cost weight; writes pareto.csv and child checkpoints.
    NasSweep {
        #[command(flatten)]
        ov: Overrides,
        /// Seed checkpoint; defaults to <out_dir>/seed.tbpg, trained in
        /// place when missing.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Quantize a checkpoint: QAT, int8 export, C emission, budget verdict.
    Quantize {
        #[command(flatten)]
        ov: Overrides,
        /// Float checkpoint; defaults to <out_dir>/seed.tbpg.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Emit portable C sources for an exported integer model.
    EmitC {
        /// Integer model container (.tbpi).
        model: PathBuf,
        #[arg(long, value_name = "DIR", default_value = ".")]
        out_dir: PathBuf,
    },
    /// Score a float checkpoint or integer model on a dataset split.
    Eval {
        /// Checkpoint (.tbpg) or integer model (.tbpi).
        model: PathBuf,
        #[command(flatten)]
        ov: Overrides,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Summarize sweep outputs: front table, report.csv, report.svg.
    Report {
        /// Directory holding pareto.csv (and optionally seed_eval.json).
        #[arg(default_value = ".")]
        dir: PathBuf,
    },
    /// Compile emitted C for random integer models and compare against the
    /// interpreter, bit for bit.
    Selftest {
        #[arg(long, default_value_t = 25)]
        graphs: usize,
        /// Inputs per graph.
        #[arg(long, default_value_t = 4)]
        inputs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep build artifacts here instead of a scratch directory.
        #[arg(long, value_name = "DIR")]
        keep_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainSeed { ov } => commands::train_seed(&PipelineConfig::load(&ov)?),
        Cmd::NasSweep { ov, checkpoint } => {
            commands::nas_sweep(&PipelineConfig::load(&ov)?, checkpoint.as_deref())
        }
        Cmd::Quantize { ov, checkpoint } => {
            commands::quantize(&PipelineConfig::load(&ov)?, checkpoint.as_deref())
        }
        Cmd::EmitC { model, out_dir } => commands::emit_c(&model, &out_dir),
        Cmd::Eval { model, ov, split } => {
            commands::eval(&PipelineConfig::load(&ov)?, &model, split)
        }
        Cmd::Report { dir } => commands::report(&dir),
        Cmd::Selftest { graphs, inputs, seed, keep_dir } => {
            commands::selftest(graphs, inputs, seed, keep_dir.as_deref())
        }
    }
}

/// Usage and config problems exit 1, numerical failures 2, budget
/// violations 3.
fn exit_code(err: &anyhow::Error) -> u8 {
    use tinybp::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::Budget { .. }) => 3,
        Some(Error::Numerical(_) | Error::Autodiff(_) | Error::Quant(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
