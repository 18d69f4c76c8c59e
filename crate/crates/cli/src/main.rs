//! `raddpo`: build SIDs, generate data, train, evaluate and compare.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use raddpo_core::train::Method;

#[derive(Parser, Debug)]
#[command(name = "raddpo", version, about = "Preference alignment for generative retrieval over semantic IDs")]
struct Cli {
    /// Config file (TOML) for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize item embeddings and fit residual K-means codebooks.
    BuildSids,
    /// Generate train and test sessions plus the hidden oracle.
    GenData {
        /// Catalog file written by build-sids.
        #[arg(long)]
        catalog: PathBuf,
    },
    /// Run the SFT or alignment stage.
    Train(TrainArgs),
    /// Decode test sessions and score them.
    Eval(EvalArgs),
    /// Tabulate several eval reports against a baseline.
    Compare {
        /// Report files written by eval.
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        /// Method label of the baseline row; defaults to the first report.
        #[arg(long)]
        baseline: Option<String>,
        /// Also write an SVG of recall against K.
        #[arg(long)]
        plot: bool,
    },
    /// Run every step of an experiment manifest, skipping up-to-date steps.
    RunManifest {
        manifest: PathBuf,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// sft or align; defaults to the config's stage.
    #[arg(long)]
    pub stage: Option<String>,
    #[arg(long)]
    pub method: Option<Method>,
    /// Starting checkpoint; required for alignment.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Frozen reference for dpo; defaults to the starting checkpoint.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub no_tlgd: bool,
    #[arg(long)]
    pub no_rdrw: bool,
    #[arg(long)]
    pub no_mlsft: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Restrict decoding to catalog SIDs.
    #[arg(long)]
    pub constrained: bool,
    /// Row label in reports; defaults to the checkpoint's directory name.
    #[arg(long)]
    pub label: Option<String>,
    /// Also write an SVG of recall against K.
    #[arg(long)]
    pub plot: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let ctx = commands::Context { config: cli.config, seed: cli.seed, out: cli.out };
    let result = match cli.command {
        Command::BuildSids => commands::build_sids(&ctx).map(|_| ()),
        Command::GenData { catalog } => commands::gen_data(&ctx, &catalog).map(|_| ()),
        Command::Train(args) => commands::train(&ctx, &args).map(|_| ()),
        Command::Eval(args) => commands::eval(&ctx, &args).map(|_| ()),
        Command::Compare { reports, baseline, plot } => commands::compare(&ctx, &reports, baseline.as_deref(), plot),
        Command::RunManifest { manifest } => manifest::run(&manifest, &ctx),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
