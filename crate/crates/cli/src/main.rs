mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use addit_core::eval::SweepParam;
use addit_core::pipeline::GammaSetting;

/// Training-free object insertion on a small seeded diffusion transformer.
///
/// Latents are rendered as 8-bit grayscale maps of per-token channel norms.
/// They are diagnostics of the latent grid, not photographs.
#[derive(Debug, Parser)]
#[command(name = "addit", version)]
pub struct Cli {
    #[command(flatten)]
    pub opts: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Generated,
    Real,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Source kind: sampled from a seed, or a given latent file.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// Time label the target is initialised at (933 generated, 867 real).
    #[arg(long, global = true)]
    pub t_struct: Option<u32>,
    /// Time label at which the subject mask is built and applied.
    #[arg(long, global = true)]
    pub t_blend: Option<u32>,
    /// Balance factor, a number or "auto".
    #[arg(long, global = true, value_parser = parse_gamma)]
    pub gamma: Option<GammaSetting>,
    /// Multi-stream blocks are extended while the time label is at least this.
    #[arg(long, global = true)]
    pub ext_multi_until: Option<u32>,
    /// Single-stream blocks are extended while the time label is at least this.
    #[arg(long, global = true)]
    pub ext_single_until: Option<u32>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Target noise seed.
    #[arg(long, global = true, env = "ADDIT_SEED")]
    pub seed: Option<u64>,
    /// Source noise seed.
    #[arg(long, global = true)]
    pub source_seed: Option<u64>,
    /// JSON file with optional "model" and "pipeline" sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "addit-out")]
    pub out: PathBuf,
}

fn parse_gamma(s: &str) -> Result<GammaSetting, String> {
    s.parse().map_err(|e: addit_core::Error| e.to_string())
}

fn parse_param(s: &str) -> Result<SweepParam, String> {
    s.parse().map_err(|e: addit_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Target prompt naming the object to add.
    #[arg(long)]
    pub prompt: String,
    /// Word of the target prompt naming the added object.
    #[arg(long)]
    pub subject: Option<String>,
    /// Defaults to the target prompt without the subject word.
    #[arg(long)]
    pub source_prompt: Option<String>,
    /// Latent file to edit (real mode).
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Keep the source everywhere by blending with an empty mask at every
    /// step from the blend step on.
    #[arg(long)]
    pub blend_all: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a latent from a prompt.
    Generate {
        #[arg(long)]
        prompt: String,
    },
    /// Insert an object into a generated or given source.
    Edit(EditArgs),
    /// Attention spread per block and the balance curve behind the automatic γ.
    Analyze(EditArgs),
    /// Affordance and inclusion over a parameter grid.
    Sweep {
        #[arg(long, value_parser = parse_param)]
        param: SweepParam,
        /// lo:hi:step
        #[arg(long)]
        grid: String,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long, default_value_t = addit_core::eval::DEFAULT_SCORE_THRESHOLD)]
        score_threshold: f64,
    },
    /// Affordance and inclusion over a benchmark file.
    Eval {
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long, default_value_t = addit_core::eval::DEFAULT_SCORE_THRESHOLD)]
        score_threshold: f64,
    },
}

/// Bad flag combinations found after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<addit_core::Error>() {
            return if e.is_data_error() { 2 } else { 3 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
