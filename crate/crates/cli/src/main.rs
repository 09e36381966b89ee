use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskbit::config::ExperimentConfig;
use maskbit::Error;

mod commands;

#[derive(Debug, Parser)]
#[command(name = "maskbit", version, about = "Train, sample and evaluate bit-token image models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML experiment file; the preset is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// `dotted.key=value` override applied after loading; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Floating-point precision of all models.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Desk,
    Toy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train the tokenizer; writes `stage1.ckpt` to the output directory.
    TrainStage1(TrainArgs),
    /// Encode the dataset into a bit-packed token file.
    Tokenize {
        /// Stage-I checkpoint; defaults to `<output_dir>/stage1.ckpt`.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Destination; defaults to `<output_dir>/tokens.bin`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the masked-bit generator; writes `stage2.ckpt`.
    TrainStage2 {
        #[command(flatten)]
        train: TrainArgs,
        /// Token file; defaults to `<output_dir>/tokens.bin`.
        #[arg(long)]
        tokens: Option<PathBuf>,
        /// Tokenize augmented images on the fly instead of reading a token file.
        #[arg(long)]
        online: bool,
        /// Stage-I checkpoint; defaults to `<output_dir>/stage1.ckpt`.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Generate class-conditional images.
    Sample {
        /// Class ids; defaults to every class.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<u32>,
        /// Images per class.
        #[arg(long, default_value_t = 1)]
        per_class: usize,
        /// Drop the class condition.
        #[arg(long)]
        unconditional: bool,
        /// Output directory; defaults to `<output_dir>/samples`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruction quality of the EMA tokenizer.
    EvalRecon {
        #[arg(long, default_value_t = 500)]
        limit: usize,
    },
    /// Generation quality against dataset features.
    EvalGen {
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        /// Real images used for the reference statistics.
        #[arg(long, default_value_t = 500)]
        limit: usize,
    },
    /// Decode one image with each bit flipped in every token.
    AnalyzeBitflip {
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Compare Hamming neighbors in token space with perceptual neighbors.
    AnalyzeNn {
        #[arg(long, default_value_t = 8)]
        queries: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Corpus size; defaults to the whole dataset.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train each tokenizer roadmap rung and report reconstruction quality.
    Roadmap {
        #[arg(long, default_value_t = 500)]
        iters: u64,
        #[arg(long, default_value_t = 200)]
        eval_images: usize,
        /// Comma-separated rung names; defaults to all.
        #[arg(long, value_delimiter = ',')]
        rungs: Vec<String>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Steps to run; defaults to the remaining scheduled iterations.
    #[arg(long)]
    iters: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 50)]
    log_every: u64,
    /// Checkpoint interval in steps; 0 saves only at the end.
    #[arg(long, default_value_t = 0)]
    save_every: u64,
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let base = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => match c.preset {
            Preset::Default => ExperimentConfig::default(),
            Preset::Desk => ExperimentConfig::desk(),
            Preset::Toy => ExperimentConfig::toy(),
        },
    };
    base.with_overrides(&c.overrides)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigMismatch { .. } => 3,
        Error::Config(_) => 4,
        Error::Corrupt { .. } | Error::Version { .. } => 5,
        Error::Io { .. } => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli.common).and_then(|cfg| match cli.common.precision {
        Precision::F32 => commands::run::<f32>(&cli.command, &cfg),
        Precision::F64 => commands::run::<f64>(&cli.command, &cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
