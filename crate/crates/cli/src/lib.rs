//! Command line front end: every stage of the segment quality workflow as a
//! subcommand, plus a cached end-to-end `pipeline`.

mod commands;
mod config;
mod error;
mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

pub use error::{CliError, Kind};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_VAR: &str = "SEGMETA_THREADS";

#[derive(Parser, Debug)]
#[command(name = "segmeta", version, about = "Segment-wise false positive detection and decision rules for segmentation outputs")]
struct Cli {
    /// File of `key = value` lines supplying defaults for the subcommand's options.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with manifest.
    Synth(SynthArgs),
    /// Turn a probability volume into a segmentation mask.
    Predict(PredictArgs),
    /// List the segments of a mask, with overlap against ground truth.
    Segments(SegmentsArgs),
    /// Aggregate per-segment metrics of one frame into a CSV table.
    Metrics(MetricsArgs),
    /// Fit a meta model on a metrics table.
    TrainMeta(TrainArgs),
    /// Resampled evaluation of a meta model configuration.
    EvalMeta(EvalArgs),
    /// Track segments through the sequences of a corpus.
    Track(TrackArgs),
    /// SMOTE rows for the rare part of a metrics table.
    Augment(AugmentArgs),
    /// Concatenate real, augmented and pseudo rows.
    Compose(ComposeArgs),
    /// Estimate position-specific class priors from ground truth.
    Priors(PriorsArgs),
    /// Empirical CDF of segment-wise precision or recall.
    Cdf(CdfArgs),
    /// Label and IoU heatmap images of one frame.
    Render(RenderArgs),
    /// Run all stages from corpus to evaluation report, with caching.
    Pipeline(PipelineArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    Bayes,
    Cost,
    Ml,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskArg {
    Fp,
    Iou,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelArg {
    Linear,
    Logistic,
    Gbt,
    Mlp,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyArg {
    None,
    L1,
    L2,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeaturesArg {
    All,
    EntropyOnly,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum KindArg {
    Precision,
    Recall,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    Panels,
    IouTrue,
    IouPred,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftArg {
    None,
    Linear,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene spec file of `key = value` lines, applied on top of the preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// default, noiseless, imbalanced or flickering.
    #[arg(long, default_value = "default")]
    pub preset: String,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    /// Overrides the seed of the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sequence_length: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long, value_enum, default_value = "bayes")]
    pub rule: Rule,
    #[arg(long)]
    pub probs: PathBuf,
    /// Prior map (npy, H x W x q) for the ml rule.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Cost matrix CSV for the cost rule.
    #[arg(long)]
    pub cost: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SegmentsArgs {
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, default_value = "frame")]
    pub frame_id: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    #[arg(long)]
    pub probs: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, default_value = "frame")]
    pub frame_id: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ModelChoice {
    #[arg(long, value_enum, default_value = "fp")]
    pub task: TaskArg,
    /// Defaults to logistic for fp and linear for iou.
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Defaults to l2 for the network and none otherwise.
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyArg>,
    /// Penalty weight; the default depends on the penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum, default_value = "all")]
    pub features: FeaturesArg,
    /// Network epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Boosting stages.
    #[arg(long)]
    pub stages: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelChoice,
    /// One or more metrics tables with the same columns.
    #[arg(long = "in", num_args = 1.., required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model file whose configuration is retrained in every run.
    #[arg(long)]
    pub model: PathBuf,
    /// One or more metrics tables with the same columns.
    #[arg(long = "in", num_args = 1.., required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Run `i` splits with seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.2")]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrackArgs {
    /// Corpus directory or its manifest file.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "bayes")]
    pub rule: Rule,
    #[arg(long)]
    pub priors: Option<PathBuf>,
    #[arg(long)]
    pub cost: Option<PathBuf>,
    /// Number of previous frames in the time series.
    #[arg(long, default_value_t = 0)]
    pub depth: usize,
    #[arg(long, value_enum, default_value = "linear")]
    pub shift: ShiftArg,
    #[arg(long, default_value_t = 1)]
    pub min_overlap: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the time-series metrics table.
    #[arg(long)]
    pub series: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// One or more metrics tables with the same columns.
    #[arg(long = "in", num_args = 1.., required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 2.0)]
    pub factor: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.1)]
    pub rare_mass: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ComposeArgs {
    /// R, RA, RAP, RP or P.
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub real: Option<PathBuf>,
    #[arg(long)]
    pub aug: Option<PathBuf>,
    #[arg(long)]
    pub pseudo: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PriorsArgs {
    /// Ground-truth label maps.
    #[arg(long, num_args = 1..)]
    pub gt: Vec<PathBuf>,
    /// Corpus directory or manifest; its training frames are used.
    #[arg(long, conflicts_with = "gt")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Block-average the map by this factor.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.2")]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CdfArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub gt: Vec<PathBuf>,
    #[arg(long = "class", num_args = 1.., required = true)]
    pub classes: Vec<u8>,
    #[arg(long, default_value = "bayes")]
    pub rule_tag: String,
    #[arg(long, value_enum, default_value = "recall")]
    pub kind: KindArg,
    /// Masks of a second rule to test for dominance against.
    #[arg(long, num_args = 1..)]
    pub against_pred: Vec<PathBuf>,
    #[arg(long, default_value = "other")]
    pub against_tag: String,
    #[arg(long, default_value_t = 0.0)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long, value_enum, default_value = "panels")]
    pub mode: RenderMode,
    #[arg(long)]
    pub probs: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Meta model for predicted IoU; adds the fourth panel.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output file, or directory for the panels.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// Existing corpus; without it a corpus is synthesized into the work directory.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub work: PathBuf,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    pub preset: String,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long, value_enum, default_value = "bayes")]
    pub rule: Rule,
    #[arg(long)]
    pub cost: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[command(flatten)]
    pub model: ModelChoice,
    /// Time-series depth; without it the single-frame table is used.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, value_enum, default_value = "linear")]
    pub shift: ShiftArg,
    /// Training composition R, RA, RAP, RP or P.
    #[arg(long, default_value = "R")]
    pub composition: String,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// The one seed behind splits, models and augmentation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to 0.8,0.2, or 0.7,0.1,0.2 with a depth.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Ignore cached stages.
    #[arg(long)]
    pub force: bool,
    /// Report file; defaults to `report.json` in the work directory.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// What a command reports back: the result object, echoed with the
/// effective configuration on standard output.
pub(crate) type Outcome = Result<Value, CliError>;

/// Effective option values of the chosen subcommand, defaults included.
fn effective_config(cmd: &clap::Command, matches: &clap::ArgMatches, config_file: Option<&PathBuf>) -> Value {
    let mut map = Map::new();
    if let Some((name, sub_m)) = matches.subcommand() {
        if let Some(sub) = cmd.find_subcommand(name) {
            for arg in sub.get_arguments() {
                let id = arg.get_id().as_str();
                if matches!(id, "help" | "version" | "config" | "verbose") {
                    continue;
                }
                if let Ok(Some(raw)) = sub_m.try_get_raw(id) {
                    let values: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
                    let key = arg.get_long().unwrap_or(id).to_string();
                    map.insert(key, Value::String(values.join(" ")));
                }
            }
        }
    }
    if let Some(path) = config_file {
        map.insert("config-file".into(), Value::String(path.display().to_string()));
    }
    map.insert(
        "threads".into(),
        Value::from(std::env::var(THREADS_VAR).unwrap_or_else(|_| "all".into())),
    );
    Value::Object(map)
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let threads = match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::validation("CONFIG", format!("{THREADS_VAR} must be a positive integer, got '{v}'")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::validation("CONFIG", format!("thread pool: {e}")))
}

fn try_run(argv: Vec<OsString>) -> Result<(), CliError> {
    let cmd = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    let (argv, config_file) = config::expand(argv, &cmd)?;
    let matches = match cmd.clone().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    Ok(())
                }
                ErrorKind::InvalidSubcommand
                | ErrorKind::MissingSubcommand
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    Err(CliError::validation("BADCMD", first_line(&e.to_string())))
                }
                _ => Err(CliError::validation("BADARG", first_line(&e.to_string()))),
            };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::validation("BADARG", first_line(&e.to_string())))?;
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_env("SEGMETA_LOG").try_init();

    let config = effective_config(&cmd, &matches, config_file.as_ref());
    let name = matches.subcommand_name().unwrap_or_default().to_string();
    let pool = thread_pool()?;
    let result = pool.install(|| match &cli.command {
        Command::Synth(a) => commands::synth(a, &config),
        Command::Predict(a) => commands::predict(a, &config),
        Command::Segments(a) => commands::segments(a, &config),
        Command::Metrics(a) => commands::metrics(a, &config),
        Command::TrainMeta(a) => commands::train_meta(a, &config),
        Command::EvalMeta(a) => commands::eval_meta(a, &config),
        Command::Track(a) => commands::track(a, &config),
        Command::Augment(a) => commands::augment(a, &config),
        Command::Compose(a) => commands::compose(a, &config),
        Command::Priors(a) => commands::priors(a, &config),
        Command::Cdf(a) => commands::cdf(a, &config),
        Command::Render(a) => commands::render(a, &config),
        Command::Pipeline(a) => pipeline::run(a, &config),
    })?;
    let echo = serde_json::json!({
        "command": name,
        "version": VERSION,
        "config": config,
        "result": result,
    });
    println!("{}", serde_json::to_string_pretty(&echo).expect("json"));
    Ok(())
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or_default().trim_start_matches("error: ").to_string()
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code: 0 on success, 1 for invalid input, 2 for I/O failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    match try_run(argv.into_iter().map(Into::into).collect()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
