use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Unpaired CBCT to planning-CT translation.
#[derive(Debug, Parser)]
#[command(name = "ctxlate", version)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate phantom patients: a truth volume and a CBCT per patient plus a manifest.
    Phantom(PhantomArgs),
    /// Mask, clip and optionally crop a volume.
    Preprocess(PreprocessArgs),
    /// Train the four networks.
    Train(TrainArgs),
    /// Translate a volume with a trained generator.
    Translate(TranslateArgs),
    /// Compare truth, CBCT and translated volumes of a phantom dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub patients: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset seed; falls back to CTXLATE_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub slices: Option<usize>,
    /// Slice size as HEIGHTxWIDTH.
    #[arg(long, value_parser = parse_size)]
    pub canvas: Option<[usize; 2]>,
    /// JSON file overriding dataset settings (same fields as the manifest's `dataset`).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Center crop as HEIGHTxWIDTH.
    #[arg(long, value_parser = parse_size)]
    pub crop: Option<[usize; 2]>,
    #[arg(long, value_enum, default_value_t = MaskArg::PerSlice)]
    pub mask_mode: MaskArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config with nested or dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set weights.lambda_air=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Stop after this many epochs of the schedule.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Take both training sets from a phantom manifest (file or directory).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Patient ids of the manifest to train on (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub patients: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = DirectionArg::CToP)]
    pub direction: DirectionArg,
    /// Generator window as HEIGHTxWIDTH; the whole slice by default.
    #[arg(long, value_parser = parse_size)]
    pub crop: Option<[usize; 2]>,
    #[arg(long, value_enum, default_value_t = MaskArg::PerSlice)]
    pub mask_mode: MaskArg,
    /// Also write the cyclic reconstruction and its difference map.
    #[arg(long)]
    pub cycle: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Phantom manifest (file or directory).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Translate each CBCT with this checkpoint and include the result.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory holding `<patient>_synplanct` volumes from earlier runs.
    #[arg(long)]
    pub synplanct: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub patients: Vec<String>,
    #[arg(long, value_parser = parse_size)]
    pub crop: Option<[usize; 2]>,
    /// Output table formats; both when omitted.
    #[arg(long, value_enum)]
    pub format: Vec<FormatArg>,
    #[arg(long)]
    pub no_plots: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    PerSlice,
    PerVolume,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    CToP,
    PToC,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([parse(h)?, parse(w)?])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Translate(a) => commands::translate(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
