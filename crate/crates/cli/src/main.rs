use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfma_core::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "sfma",
    version,
    about = "Adapter-based image compression for machine and human vision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Flags shared by every verb.
#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for training and evaluation verbs; output file for
    /// compress and decompress.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// human, machine or scalable; overrides the configured mode.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Index into the configured lambda grid.
    #[arg(long = "lambda-id", global = true, default_value_t = 0)]
    pub lambda_id: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train (or import) the base codecs and the toy task model.
    PretrainBase,
    /// Train one adapter set (or scalable model) per lambda.
    TrainAdapters,
    /// Code an image into a .sfma stream.
    Compress {
        #[arg(long)]
        input: PathBuf,
    },
    /// Decode a .sfma stream into a PNG.
    Decompress {
        #[arg(long)]
        input: PathBuf,
    },
    /// Rate-accuracy and rate-PSNR curves plus BD report.
    EvalRd,
    /// Bit-allocation and PSD maps of an image's latent.
    AnalyzeLatent {
        #[arg(long)]
        input: PathBuf,
    },
    /// Middle-dimension, variant, placement and seed sweep.
    Ablate,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) | Error::Metric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| {
        let ctx = commands::Context::new(&cli.common)?;
        match &cli.command {
            Command::PretrainBase => commands::pretrain_base(&ctx),
            Command::TrainAdapters => commands::train_adapters(&ctx),
            Command::Compress { input } => commands::compress(&ctx, input),
            Command::Decompress { input } => commands::decompress(&ctx, input),
            Command::EvalRd => commands::eval_rd(&ctx),
            Command::AnalyzeLatent { input } => commands::analyze_latent(&ctx, input),
            Command::Ablate => commands::ablate(&ctx),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
