//! `gmner`: scoring, box perturbation, training-set construction, output
//! parsing and perturbation sweeps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 input error,
//! 4 internal invariant violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::GrbpOverrides;

#[derive(Debug, Parser)]
#[command(name = "gmner", version, about = "Grounded multimodal NER toolkit")]
pub struct Cli {
    /// Base seed (overrides `[grbp] seed` from the config file)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; outputs are identical for any value
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// TOML config file with `[grbp]` and `[scoring]` sections
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Frame {
    /// Absolute pixel coordinates
    #[default]
    Absolute,
    /// Coordinates on a 0-1000 grid, rescaled with the image size
    #[value(name = "normalized-1000")]
    Normalized1000,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score model generations against a gold dataset
    Score {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        generations: PathBuf,
        /// Acc@IoU thresholds (comma separated)
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// Machine-readable JSON report
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        frame: Frame,
        /// Entity type vocabulary, one label per line
        #[arg(long)]
        types: Option<PathBuf>,
        /// Use exhaustive pairing instead of greedy (small examples only)
        #[arg(long)]
        oracle: bool,
    },
    /// Replace gold boxes with GRBP perturbations
    Perturb {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grbp: GrbpOverrides,
    },
    /// Build an instruction-tuning set with perturbed box targets
    BuildTrain {
        #[arg(long)]
        dataset: PathBuf,
        /// Reasoning traces, one {"id", "reasoning"} object per line
        #[arg(long, conflicts_with_all = ["no_cot", "inline_reasoning"])]
        traces: Option<PathBuf>,
        /// Use the `reasoning` field of the dataset examples
        #[arg(long, conflicts_with = "no_cot")]
        inline_reasoning: bool,
        /// Targets contain only the record block
        #[arg(long)]
        no_cot: bool,
        /// Instruction template file containing one {text} placeholder
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grbp: GrbpOverrides,
    },
    /// Re-parse a training set and check it against gold
    ValidateTrain {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Manifest holding tau (defaults to <train>.manifest.json when present)
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Exit with code 4 when problems are found
        #[arg(long)]
        strict: bool,
    },
    /// Monte-Carlo characterization of GRBP over a (beta, gamma, tau) grid
    Sweep {
        /// Center jitter values
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.01, 0.03, 0.05, 0.1])]
        betas: Vec<f64>,
        /// Scale jitter values; when omitted gamma = beta, paired
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        /// Guard thresholds; defaults to the configured tau
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100_000)]
        n_samples: usize,
        /// Draw boxes from a dataset's gold boxes instead of uniformly
        #[arg(long, conflicts_with_all = ["image_size", "box_frac"])]
        dataset: Option<PathBuf>,
        /// Image size for uniform sampling, WxH
        #[arg(long, default_value = "640x480")]
        image_size: String,
        /// Box side as a fraction of the image side, MIN:MAX
        #[arg(long, default_value = "0.05:0.6")]
        box_frac: String,
        /// CSV output
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grbp: GrbpOverrides,
    },
    /// Parse raw generations into reasoning, records and diagnostics
    Parse {
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        frame: Frame,
        /// Dataset supplying image sizes (needed for normalized-1000)
        #[arg(long)]
        gold: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.inner());
            ExitCode::from(e.code())
        }
    }
}
