//! Command-line driver: prepare, train, synthesize, evaluate, ablate, plot.

pub mod commands;
pub mod layout;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxtts::corpus::CueLateral;
use ctxtts::training::Suite;

pub use layout::RunDir;

#[derive(Debug, Parser)]
#[command(name = "ctxtts", version, about = "Context-aware audiobook TTS pipeline")]
pub struct Cli {
    /// Run directory holding data, checkpoints, outputs and reports.
    #[arg(long, global = true, default_value = ".")]
    pub run_dir: PathBuf,
    /// Log at debug level.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build train/test manifests and speaker pitch statistics.
    Prepare(PrepareArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Synthesize test books with a trained checkpoint.
    Synthesize(SynthesizeArgs),
    /// Score synthesized outputs against ground truth.
    Evaluate(EvaluateArgs),
    /// Train, synthesize and evaluate a whole suite.
    Ablate(AblateArgs),
    /// Pitch contours of one utterance under random and true contexts.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CueArg {
    None,
    Preceding,
    Succeeding,
    Both,
}

impl From<CueArg> for CueLateral {
    fn from(c: CueArg) -> Self {
        match c {
            CueArg::None => CueLateral::None,
            CueArg::Preceding => CueLateral::Preceding,
            CueArg::Succeeding => CueLateral::Succeeding,
            CueArg::Both => CueLateral::Both,
        }
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Generate a synthetic corpus.
    #[arg(long, conflicts_with = "manifest")]
    pub synthetic: bool,
    /// Directory holding an existing `corpus.manifest` / `corpus.features` pair.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Generator spec (TOML); unspecified keys take defaults.
    #[arg(long, requires = "synthetic")]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Which lateral carries the planted pitch cue.
    #[arg(long, value_enum)]
    pub cue: Option<CueArg>,
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long)]
    pub books: Option<usize>,
    #[arg(long)]
    pub utterances: Option<usize>,
    /// Book to move into the test manifest; defaults to the last book of each speaker.
    #[arg(long = "hold-out")]
    pub hold_out: Vec<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Modality {
    /// No context encoders.
    None,
    /// Acoustic context only.
    Acoustic,
    /// Textual context only.
    Textual,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ablation id; overrides the config file.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long, value_enum)]
    pub modality: Option<Modality>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the run's saved model and optimizer state.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub id: String,
    /// Book to synthesize; defaults to every test book.
    #[arg(long)]
    pub book: Vec<String>,
    /// Character window used instead of the trained one.
    #[arg(long)]
    pub k_override: Option<usize>,
    /// `idx=N:from=idx M`, applied within each synthesized book.
    #[arg(long)]
    pub context_override: Vec<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run to score.
    #[arg(long, required_unless_present_any = ["compare", "ground_truth"])]
    pub id: Option<String>,
    /// Comma-separated runs merged into one table.
    #[arg(long, value_delimiter = ',')]
    pub compare: Vec<String>,
    /// Score the test manifest against itself.
    #[arg(long)]
    pub ground_truth: bool,
    /// Table path; defaults inside the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Table1,
    Table2,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Table1 => Suite::Table1,
            SuiteArg::Table2 => Suite::Table2,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub suite: SuiteArg,
    /// List the configurations without training.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, default_value = "atce-bi")]
    pub id: String,
    /// Book of the target; defaults to the first test book.
    #[arg(long)]
    pub book: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub index: usize,
    /// Number of random contexts.
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn init_logging(verbose: bool) {
    use tracing_subscriber::EnvFilter;
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(if verbose { "debug" } else { "info" }));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).with_target(false).try_init();
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            e.exit_code()
        }
    }
}
