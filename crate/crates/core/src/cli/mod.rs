//! Command-line front end (`alpha-pool`).
//!
//! Exit codes: 0 success, 1 computation error or failed verification, 2 usage
//! or file error. Structured output is one JSON object per line with stable
//! field names; text output is for people and may change.

mod commands;
mod ppm;
mod verify;

use std::fmt::Display;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::alphapool::{PoolConfig, DEFAULT_EPSILON};
use crate::featio::SynthMode;

pub use verify::{run_suites, SuiteOutcome, SUITES};

#[derive(Debug, Parser, Serialize)]
#[command(name = "alpha-pool", version, about = "Alpha-pooling of feature maps, kernels and decision explanations")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CommonArgs {
    /// Pooling exponent alpha (>= 1).
    #[arg(long, global = true, default_value_t = 1.5)]
    pub alpha: f64,
    /// Stabilizer added to |y| inside the signed power.
    #[arg(long, global = true, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    pub signed_sqrt: bool,
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    pub l2_normalize: bool,
    /// Compress descriptors with a tensor sketch of this length (exact when absent).
    #[arg(long, global = true)]
    pub sketch_dim: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker thread cap; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Text,
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Generic,
    FineGrained,
}

impl From<ModeArg> for SynthMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Generic => SynthMode::Generic,
            ModeArg::FineGrained => SynthMode::FineGrained,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKindArg {
    L2,
    Inner,
    InnerSquared,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset of feature maps and part masks.
    Synth(SynthArgs),
    /// Pool every image of a manifest into a descriptor file.
    Pool(PoolArgs),
    /// Kernel matrix between the images of one or two manifests.
    Kernel(KernelArgs),
    /// Train the one-vs-rest dual classifier.
    Train(TrainArgs),
    /// Explain test decisions through influential training regions.
    Explain(ExplainArgs),
    /// Part contribution matrix between test and training images.
    Parts(PartsArgs),
    /// Norm heatmaps and salient matches between two images.
    Norms(NormsArgs),
    /// Learn alpha jointly with a softmax head.
    FitAlpha(FitAlphaArgs),
    /// Run the invariant suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::FineGrained)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub images_per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Fraction of locations carrying the class signal.
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub signal: f64,
    #[arg(long, default_value_t = 1.5)]
    pub clutter: f64,
    #[arg(long, default_value_t = 0.1)]
    pub clutter_fraction: f64,
    #[arg(long, default_value_t = 2.0)]
    pub object: f64,
    /// Also write train.manifest and test.manifest (alternating per class).
    #[arg(long)]
    pub split: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PoolArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct KernelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Rows come from this manifest instead (cross kernel).
    #[arg(long)]
    pub against: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Ridge strength (default 1e-3 * trace(K) / N).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Where to write the classifier (default OUT/classifier.json).
    #[arg(long)]
    pub classifier: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub test_manifest: PathBuf,
    /// Training images per report.
    #[arg(long, default_value_t = crate::influence::DEFAULT_TOP_IMAGES)]
    pub images: usize,
    #[arg(long, default_value_t = crate::influence::NMS_RADIUS)]
    pub radius: f64,
    /// Explain this class (index or name) instead of each image's label.
    #[arg(long)]
    pub class: Option<String>,
    /// Skip the pairwise work guard.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PartsArgs {
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub test_manifest: PathBuf,
    #[arg(long, default_value_t = crate::influence::DEFAULT_PART_TOP_N)]
    pub top_n: usize,
    /// Accumulate plain rather than squared kernel summands.
    #[arg(long)]
    pub unsquared: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct NormsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Image id (or entry index) of the left image.
    #[arg(long)]
    pub left: String,
    #[arg(long)]
    pub right: String,
    #[arg(long, value_enum, default_value_t = MatchKindArg::Inner)]
    pub kind: MatchKindArg,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Pairs kept by the l2 kind.
    #[arg(long, default_value_t = 10)]
    pub top_m: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct FitAlphaArgs {
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub valid_manifest: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha_lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    /// Also run the fixed-alpha grid search over 1.0, 1.25, ..., 3.0.
    #[arg(long)]
    pub grid: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    /// Directory of .fmap fixtures (bundled fixtures when absent).
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Run only these suites.
    #[arg(long = "suite", value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
    pub suites: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    File(String),
    #[error("{0}")]
    Compute(String),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::File(_) => 2,
            CliError::Compute(_) | CliError::Verify(_) => 1,
        }
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        use crate::Error as E;
        match e {
            E::Fmap(_) | E::Manifest(_) => CliError::File(e.to_string()),
            other => CliError::Compute(other.to_string()),
        }
    }
}

macro_rules! compute_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::from(crate::Error::from(e))
            }
        }
    )*};
}

compute_from!(
    crate::featio::FmapError,
    crate::featio::ManifestError,
    crate::featio::SynthError,
    crate::alphapool::PoolError,
    crate::alphapool::FitError,
    crate::sketch::SketchError,
    crate::kernelview::KernelError,
    crate::dualclf::DualError,
    crate::influence::InfluenceError
);

/// Emits human or JSON-lines output.
pub struct Reporter {
    format: Format,
}

impl Reporter {
    pub fn new(format: Format) -> Self {
        Reporter { format }
    }

    /// Prints `text` in text mode or `{"record": kind, ...fields}` in structured mode.
    pub fn emit(&self, kind: &str, text: impl Display, fields: Value) {
        // a closed pipe downstream is not an error of ours
        let mut out = std::io::stdout().lock();
        match self.format {
            Format::Text => {
                let _ = writeln!(out, "{text}");
            }
            Format::Structured => {
                let mut obj = serde_json::Map::new();
                obj.insert("record".into(), Value::String(kind.into()));
                if let Value::Object(m) = fields {
                    obj.extend(m);
                }
                let _ = writeln!(out, "{}", Value::Object(obj));
            }
        }
    }
}

impl CommonArgs {
    pub fn pool_config(&self) -> PoolConfig {
        PoolConfig {
            alpha: self.alpha,
            epsilon: self.epsilon,
            signed_sqrt: self.signed_sqrt,
            l2_normalize: self.l2_normalize,
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        self.pool_config().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.sketch_dim == Some(0) {
            return Err(CliError::Usage("--sketch-dim must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        Ok(())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CliError::File(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    fs::write(path, bytes).map_err(|e| CliError::File(format!("cannot write {}: {e}", path.display())))
}

fn write_run_record(cli: &Cli) -> Result<(), CliError> {
    let record = json!({
        "tool": "alpha-pool",
        "version": env!("CARGO_PKG_VERSION"),
        "command": &cli.command,
        "options": &cli.common,
    });
    let text = serde_json::to_string_pretty(&record).expect("run record serializes") + "\n";
    write_file(&cli.common.out.join("run.json"), text.as_bytes())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    cli.common.validate()?;
    if let Some(n) = cli.common.threads {
        // Ignore the error when a global pool already exists (repeated calls in one process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    fs::create_dir_all(&cli.common.out).map_err(|e| CliError::File(format!("cannot create {}: {e}", cli.common.out.display())))?;
    write_run_record(cli)?;
    let rep = Reporter::new(cli.common.format);
    let c = &cli.common;
    match &cli.command {
        Command::Synth(a) => commands::synth(c, a, &rep),
        Command::Pool(a) => commands::pool(c, a, &rep),
        Command::Kernel(a) => commands::kernel(c, a, &rep),
        Command::Train(a) => commands::train(c, a, &rep),
        Command::Explain(a) => commands::explain(c, a, &rep),
        Command::Parts(a) => commands::parts(c, a, &rep),
        Command::Norms(a) => commands::norms(c, a, &rep),
        Command::FitAlpha(a) => commands::fit_alpha_cmd(c, a, &rep),
        Command::Verify(a) => verify::command(c, a, &rep),
    }
}

/// Parses `args` (program name first), runs, prints a one-line diagnostic on
/// failure and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
