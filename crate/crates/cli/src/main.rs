//! `facelr` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use facelr::calibration::DEFAULT_LAMBDA;
use facelr::evaluation::DEFAULT_TIPPETT_POINTS;
use facelr::protocols::{DEFAULT_EDGE_THRESHOLD, DEFAULT_ENCOUNTER_GAP, DEFAULT_MIN_COMPONENT};
use facelr::{CvScheme, Strategy, SyntheticConfig, WeightScheme};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "facelr", version, about = "Calibrated likelihood ratios from face embeddings")]
struct Cli {
    /// Seed for synthetic data and k-fold identity shuffling.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// L2 penalty on the calibration slope.
    #[arg(long, global = true, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a JSON Lines embedding file.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Required embedding dimension.
        #[arg(long)]
        dim: Option<usize>,
        /// Drop invalid records instead of failing.
        #[arg(long)]
        skip_invalid: bool,
        /// Write the accepted records here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic embedding store.
    Synth {
        #[arg(long, default_value_t = SyntheticConfig::default().dim)]
        dim: usize,
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long, default_value = "synth.jsonl")]
        out: PathBuf,
    },
    /// Split each subject's traces into encounters.
    Encounters {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        encounter: EncounterArgs,
        #[arg(long, default_value = "encounters.json")]
        out: PathBuf,
    },
    /// Mark each subject's best-quality image as its reference.
    SelectRefs {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "references.jsonl")]
        out: PathBuf,
    },
    /// Relabel or drop images by similarity-graph components.
    Clean {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EDGE_THRESHOLD)]
        edge_threshold: f64,
        #[arg(long, default_value_t = DEFAULT_MIN_COMPONENT)]
        min_component: usize,
        #[arg(long, default_value = "cleaning.json")]
        report: PathBuf,
        #[arg(long, default_value = "cleaned.jsonl")]
        out: PathBuf,
    },
    /// Remove bitwise-identical vectors within each subject.
    Dedupe {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "deduped.jsonl")]
        out: PathBuf,
    },
    /// Pool each trace set into one descriptor.
    Aggregate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_scheme)]
        strategy: WeightScheme,
        #[arg(long, value_enum, default_value_t = Pairs::PerSubjectAll)]
        pairs: Pairs,
        #[command(flatten)]
        encounter: EncounterArgs,
        #[arg(long)]
        fallback_uniform: bool,
        #[arg(long, default_value = "aggregated.jsonl")]
        out: PathBuf,
    },
    /// Score reference/trace-set comparisons.
    Score {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        strategies: StrategyArgs,
        #[arg(long, value_enum, default_value_t = Pairs::PerSubjectAll)]
        pairs: Pairs,
        #[command(flatten)]
        encounter: EncounterArgs,
        #[arg(long)]
        fallback_uniform: bool,
        #[arg(long, default_value = "scores.csv")]
        out: PathBuf,
    },
    /// Fit a score-to-LR calibrator.
    Calibrate {
        #[arg(long)]
        scores: PathBuf,
        /// Strategy to fit when the file holds several.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[arg(long, default_value = "calibrator.json")]
        out: PathBuf,
    },
    /// Convert scores to log10 LRs with a fitted calibrator.
    ApplyLr {
        #[arg(long)]
        calibrator: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "lrs.csv")]
        out: PathBuf,
    },
    /// Cross-validate calibrated LRs and report Cllr.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[command(flatten)]
        cv: CvArgs,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Export Tippett curves from a report.
    Tippett {
        #[arg(long)]
        report: PathBuf,
        /// Strategy to plot when the report holds several.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[arg(long, default_value_t = DEFAULT_TIPPETT_POINTS)]
        points: usize,
        #[arg(long, default_value = "tippett.svg")]
        svg: PathBuf,
        #[arg(long, default_value = "tippett.csv")]
        csv: PathBuf,
    },
    /// Histogram of traces per identity.
    Stats {
        #[arg(long)]
        input: PathBuf,
        /// Also write the histogram as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: ingest or generate, score, cross-validate, export.
    Run {
        /// Embedding file; a synthetic store is generated when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Expected dimension of `--input`, or the synthetic dimension.
        #[arg(long)]
        dim: Option<usize>,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        strategies: StrategyArgs,
        #[command(flatten)]
        cv: CvArgs,
        #[arg(long, value_enum, default_value_t = RunGrouping::PerSubjectAll)]
        grouping: RunGrouping,
        #[command(flatten)]
        encounter: EncounterArgs,
        #[arg(long)]
        fallback_uniform: bool,
        #[arg(long, default_value_t = DEFAULT_TIPPETT_POINTS)]
        tippett_points: usize,
        /// Dataset column label in the report table.
        #[arg(long)]
        label: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
#[allow(clippy::enum_variant_names)]
enum Pairs {
    PerImage,
    PerSubjectAll,
    PerGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum RunGrouping {
    PerSubjectAll,
    Encounters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scheme {
    Loio,
    Ltio,
    Kfold,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = SyntheticConfig::default().n_identities)]
    ids: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().traces_per_identity)]
    traces: usize,
    /// Noise scale at quality 0.
    #[arg(long, default_value_t = SyntheticConfig::default().noise_at_q0)]
    noise_far: f64,
    /// Noise scale at quality 1.
    #[arg(long, default_value_t = SyntheticConfig::default().noise_at_q1)]
    noise_near: f64,
}

#[derive(Debug, Args)]
struct EncounterArgs {
    /// Largest gap, in seconds, within one encounter.
    #[arg(long, default_value_t = DEFAULT_ENCOUNTER_GAP)]
    threshold: f64,
    /// Treat a subject's untimed traces as one encounter.
    #[arg(long)]
    untimed_single_group: bool,
}

#[derive(Debug, Args)]
struct StrategyArgs {
    /// Comma-separated or repeated.
    #[arg(long = "strategy", required = true, num_args = 1.., value_delimiter = ',', value_parser = parse_strategy)]
    list: Vec<Strategy>,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[arg(long, value_enum, default_value_t = Scheme::Kfold)]
    scheme: Scheme,
    /// Fold count for kfold.
    #[arg(long, default_value_t = 10)]
    k: usize,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

fn parse_scheme(s: &str) -> Result<WeightScheme, String> {
    s.parse()
}

impl CvArgs {
    fn scheme(&self, seed: u64) -> CvScheme {
        match self.scheme {
            Scheme::Loio => CvScheme::Loio,
            Scheme::Ltio => CvScheme::Ltio,
            Scheme::Kfold => CvScheme::Kfold { k: self.k, seed },
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
