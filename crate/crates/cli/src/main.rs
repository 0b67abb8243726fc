//! `s2me` command-line driver.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "s2me", version, about = "Scribble-supervised spatial-spectral segmentation")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic scribble corpus.
    GenData(GenDataArgs),
    /// Train one or more seeds.
    Train(TrainArgs),
    /// Score trained checkpoints on a split.
    Eval(EvalArgs),
    /// Inspect pseudo-label fusion on one sample.
    Fuse(FuseArgs),
    /// Run an ablation grid and write CSV and markdown reports.
    Ablate(AblateArgs),
    /// Run the built-in correctness checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 50)]
    pub val: usize,
    #[arg(long, default_value_t = 50)]
    pub test: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Largest labeled fraction of an image.
    #[arg(long, default_value_t = 0.05)]
    pub max_fraction: f64,
    /// Write into a nonempty directory.
    #[arg(long)]
    pub force: bool,
}

/// Options shared by commands that build a training config.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Comma-separated seeds, run sequentially (default: the config's `seed`).
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Named configuration: s2me, scrib-pce, me-unet-unet or me-ynet-ynet.
    #[arg(long)]
    pub method: Option<String>,
    /// Pseudo-label fusion: entropy, equal or random.
    #[arg(long)]
    pub fusion: Option<String>,
    /// Continue from each seed's checkpoint if present.
    #[arg(long)]
    pub resume: bool,
    /// Allow a nonempty output directory and config changes on resume.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory of `train` (holds seed-N subdirectories).
    #[arg(long)]
    pub run: PathBuf,
    /// Seeds to score; defaults to every seed-N directory.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Method label for the report; defaults to the run directory name.
    #[arg(long)]
    pub method: Option<String>,
    /// Score the spectral branch instead of the spatial one.
    #[arg(long)]
    pub spectral: bool,
    /// Corrupt the split first, e.g. `blur:2`.
    #[arg(long, value_name = "KIND:SEVERITY")]
    pub corrupt: Option<String>,
    #[arg(long, default_value_t = s2me::eval::DEFAULT_PERCENTILE)]
    pub percentile: f64,
    /// Where to write metrics-<split>.csv and .json (default: the run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Position of the sample within the split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Directory for fuse.s2tf (maps of every fusion rule).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// network, fusion, loss or all.
    #[arg(long, default_value = "all")]
    pub grid: String,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = s2me::eval::DEFAULT_PERCENTILE)]
    pub percentile: f64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Run only checks whose name contains this text.
    #[arg(long)]
    pub filter: Option<String>,
    /// Corrupt one op's backward rule (test fixture).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Failure::Usage(e.into())
    }

    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Failure::Runtime(e.into())
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

/// Caps the matrix-multiply worker pool before first use.
fn apply_thread_cap() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("S2ME_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::usage(anyhow::anyhow!("S2ME_THREADS must be a positive integer, got `{v}`")))?;
        std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    let result = apply_thread_cap().and_then(|_| match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Selftest(a) => commands::selftest(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
