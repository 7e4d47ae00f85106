//! End-to-end runs: load or generate a store, score every strategy,
//! cross-validate the calibrated LRs and write the artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{self, CvScheme, EvaluationReport, DEFAULT_TIPPETT_POINTS};
use crate::protocols;
use crate::report::{self, ReportFile};
use crate::scoring::{self, ScoreOptions, ScoredPair, Strategy};
use crate::store::{self, EmbeddingStore, Grouping, IngestOptions, TraceSet};
use crate::synthetic::{self, SyntheticConfig};

pub const SCORES_FILE: &str = "scores.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Ingest,
    Protocols,
    Scoring,
    Evaluation,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Protocols => "protocols",
            Stage::Scoring => "scoring",
            Stage::Evaluation => "evaluation",
            Stage::Output => "output",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl PipelineError {
    fn at<E>(stage: Stage) -> impl FnOnce(E) -> Self
    where
        E: Into<Box<dyn std::error::Error + Send + Sync>>,
    {
        move |e| Self {
            stage,
            source: e.into(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("at least one strategy is required")]
    NoStrategies,
    #[error("strategy {0} is listed twice")]
    DuplicateStrategy(Strategy),
    #[error("lambda must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("input {0} would be overwritten by an output")]
    PathClash(PathBuf),
}

/// Where the embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Jsonl { path: PathBuf, expected_dim: Option<usize> },
    Synthetic(SyntheticConfig),
}

/// Trace grouping for every strategy except the single-image baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SetGrouping {
    PerSubjectAll,
    Encounters {
        threshold_seconds: f64,
        untimed_single_group: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub source: DataSource,
    /// Label for the report table column.
    pub dataset_label: String,
    pub strategies: Vec<Strategy>,
    pub grouping: SetGrouping,
    pub cv: CvScheme,
    pub lambda: f64,
    pub fallback_uniform: bool,
    pub tippett_points: usize,
    /// Not embedded in reports, so identical runs in different directories
    /// produce identical files.
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl PipelineConfig {
    pub fn new(source: DataSource, strategies: Vec<Strategy>, cv: CvScheme, out_dir: impl Into<PathBuf>) -> Self {
        let dataset_label = match &source {
            DataSource::Synthetic(_) => synthetic::DATASET_ID.to_owned(),
            DataSource::Jsonl { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".to_owned()),
        };
        Self {
            source,
            dataset_label,
            strategies,
            grouping: SetGrouping::PerSubjectAll,
            cv,
            lambda: crate::calibration::DEFAULT_LAMBDA,
            fallback_uniform: false,
            tippett_points: DEFAULT_TIPPETT_POINTS,
            out_dir: out_dir.into(),
        }
    }

    pub fn output_paths(&self) -> Vec<PathBuf> {
        let mut paths = vec![
            self.out_dir.join(SCORES_FILE),
            self.out_dir.join(REPORT_FILE),
            self.out_dir.join(TABLE_FILE),
        ];
        for s in &self.strategies {
            paths.push(self.out_dir.join(format!("tippett_{s}.csv")));
            paths.push(self.out_dir.join(format!("tippett_{s}.svg")));
        }
        paths
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.strategies.is_empty() {
            return Err(ConfigError::NoStrategies);
        }
        let mut seen = BTreeSet::new();
        for &s in &self.strategies {
            if !seen.insert(s) {
                return Err(ConfigError::DuplicateStrategy(s));
            }
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(ConfigError::InvalidLambda(self.lambda));
        }
        if let DataSource::Jsonl { path, .. } = &self.source {
            if path == &self.out_dir || self.output_paths().contains(path) {
                return Err(ConfigError::PathClash(path.clone()));
            }
        }
        Ok(())
    }
}

pub fn load_source(source: &DataSource) -> Result<EmbeddingStore, PipelineError> {
    match source {
        DataSource::Jsonl { path, expected_dim } => {
            let options = IngestOptions {
                expected_dim: *expected_dim,
                skip_invalid: false,
            };
            store::ingest(path, options)
                .map(|(s, _)| s)
                .map_err(PipelineError::at(Stage::Ingest))
        }
        DataSource::Synthetic(config) => synthetic::generate(config).map_err(PipelineError::at(Stage::Ingest)),
    }
}

/// Trace sets for the pooled and score-level strategies.
pub fn grouped_sets(store: &EmbeddingStore, grouping: SetGrouping) -> Result<Vec<TraceSet>, PipelineError> {
    match grouping {
        SetGrouping::PerSubjectAll => {
            store::trace_sets(store, Grouping::PerSubjectAll).map_err(PipelineError::at(Stage::Protocols))
        }
        SetGrouping::Encounters {
            threshold_seconds,
            untimed_single_group,
        } => protocols::group_encounters(store, threshold_seconds, untimed_single_group)
            .and_then(|e| protocols::encounter_trace_sets(store, &e))
            .map_err(PipelineError::at(Stage::Protocols)),
    }
}

/// Scores every strategy. The baseline uses single-image pairs; all other
/// strategies compare references against `sets`. Output is sorted by
/// `(reference_id, trace_group, strategy)`.
pub fn score_strategies(
    store: &EmbeddingStore,
    strategies: &[Strategy],
    sets: &[TraceSet],
    options: ScoreOptions,
) -> Result<Vec<ScoredPair>, PipelineError> {
    let mut grouped = None;
    let mut singles = None;
    let mut all = Vec::new();
    for &strategy in strategies {
        let pairs = if strategy == Strategy::Baseline {
            singles.get_or_insert_with(|| store::enumerate_pairs(store, Grouping::PerImage))
        } else {
            grouped.get_or_insert_with(|| store::enumerate_pairs(store, Grouping::PerGroup(sets)))
        };
        let pairs = pairs.as_ref().map_err(|e| PipelineError {
            stage: Stage::Scoring,
            source: e.to_string().into(),
        })?;
        all.extend(scoring::score_pairs(pairs, strategy, store, options).map_err(PipelineError::at(Stage::Scoring))?);
    }
    scoring::sort_scored(&mut all);
    Ok(all)
}

/// Cross-validates each strategy present in `scored`, in strategy order.
pub fn evaluate_scores(
    scored: &[ScoredPair],
    cv: CvScheme,
    lambda: f64,
) -> Result<Vec<EvaluationReport>, evaluation::EvaluationError> {
    let present: BTreeSet<Strategy> = scored.iter().map(|p| p.strategy).collect();
    if present.is_empty() {
        return Err(evaluation::EvaluationError::NoPairs);
    }
    present
        .into_iter()
        .map(|s| {
            let subset: Vec<ScoredPair> = scored.iter().filter(|p| p.strategy == s).cloned().collect();
            evaluation::cross_validate(&subset, cv, lambda).map(|cv| cv.report)
        })
        .collect()
}

/// Everything a run produced, also written under `out_dir`.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub scores: Vec<ScoredPair>,
    pub report: ReportFile,
    pub written: Vec<PathBuf>,
}

/// Runs the full pipeline in memory without touching the filesystem.
pub fn compute(config: &PipelineConfig) -> Result<(Vec<ScoredPair>, ReportFile), PipelineError> {
    config.validate().map_err(PipelineError::at(Stage::Config))?;
    let store = load_source(&config.source)?;
    let sets = grouped_sets(&store, config.grouping)?;
    let options = ScoreOptions {
        fallback_uniform: config.fallback_uniform,
    };
    let scores = score_strategies(&store, &config.strategies, &sets, options)?;
    let evaluations = evaluate_scores(&scores, config.cv, config.lambda).map_err(PipelineError::at(Stage::Evaluation))?;
    let config_json = serde_json::to_value(config).map_err(PipelineError::at(Stage::Config))?;
    let report = ReportFile::new(config_json, &config.dataset_label, evaluations);
    Ok((scores, report))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|e| PipelineError {
        stage: Stage::Output,
        source: format!("{}: {e}", path.display()).into(),
    })
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    let (scores, report) = compute(config)?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(PipelineError::at(Stage::Output))?;
    let mut written = Vec::new();

    let mut csv = Vec::new();
    scoring::write_scores_csv(&scores, &mut csv).map_err(PipelineError::at(Stage::Output))?;
    let path = out.join(SCORES_FILE);
    write_file(&path, &csv)?;
    written.push(path);

    let path = out.join(REPORT_FILE);
    write_file(&path, report.to_json().map_err(PipelineError::at(Stage::Output))?.as_bytes())?;
    written.push(path);
    let path = out.join(TABLE_FILE);
    write_file(&path, report.render_table().as_bytes())?;
    written.push(path);

    for e in &report.evaluations {
        let curves = evaluation::tippett(&e.lrs_same, &e.lrs_different, config.tippett_points)
            .map_err(PipelineError::at(Stage::Evaluation))?;
        let mut buf = Vec::new();
        report::write_tippett_csv(&curves, &mut buf).map_err(PipelineError::at(Stage::Output))?;
        let path = out.join(format!("tippett_{}.csv", e.strategy));
        write_file(&path, &buf)?;
        written.push(path);
        let title = format!("{} ({})", e.strategy.display_name(), config.dataset_label);
        let path = out.join(format!("tippett_{}.svg", e.strategy));
        write_file(&path, report::tippett_svg(&curves, &title).as_bytes())?;
        written.push(path);
    }
    Ok(PipelineOutcome {
        scores,
        report,
        written,
    })
}

/// Number of identities per trace count. Subjects with references only
/// land in bin 0.
pub fn stats(store: &EmbeddingStore) -> Result<BTreeMap<usize, usize>, protocols::ProtocolError> {
    if store.is_empty() {
        return Err(protocols::ProtocolError::EmptyStore);
    }
    let mut per_subject: BTreeMap<&str, usize> = store.subjects().into_iter().map(|s| (s, 0)).collect();
    for (_, e) in store.traces() {
        *per_subject.entry(e.subject_id.as_str()).or_default() += 1;
    }
    let mut bins = BTreeMap::new();
    for count in per_subject.into_values() {
        *bins.entry(count).or_default() += 1;
    }
    Ok(bins)
}

/// Histogram as CSV with a `traces,identities` header.
pub fn render_stats(bins: &BTreeMap<usize, usize>) -> String {
    let mut out = String::from("traces,identities\n");
    for (traces, identities) in bins {
        out.push_str(&format!("{traces},{identities}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticConfig {
        SyntheticConfig {
            dim: 16,
            n_identities: 8,
            traces_per_identity: 3,
            noise_at_q1: 0.3,
            noise_at_q0: 1.0,
            seed: 5,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = PipelineConfig::new(DataSource::Synthetic(tiny()), vec![], CvScheme::Loio, "out");
        assert_eq!(c.validate(), Err(ConfigError::NoStrategies));
        c.strategies = vec![Strategy::AvgPool, Strategy::AvgPool];
        assert_eq!(c.validate(), Err(ConfigError::DuplicateStrategy(Strategy::AvgPool)));
        c.strategies = vec![Strategy::AvgPool];
        c.lambda = -1.0;
        assert_eq!(c.validate(), Err(ConfigError::InvalidLambda(-1.0)));
        let c = PipelineConfig::new(
            DataSource::Jsonl {
                path: "out/scores.csv".into(),
                expected_dim: None,
            },
            vec![Strategy::Baseline],
            CvScheme::Loio,
            "out",
        );
        assert!(matches!(c.validate(), Err(ConfigError::PathClash(_))));
        assert_eq!(c.dataset_label, "scores");
    }

    #[test]
    fn compute_reports_every_strategy() {
        let config = PipelineConfig::new(
            DataSource::Synthetic(tiny()),
            vec![Strategy::SerfiqPool, Strategy::Baseline],
            CvScheme::Kfold { k: 4, seed: 1 },
            "unused",
        );
        let (scores, report) = compute(&config).unwrap();
        // 8 refs x 24 traces for the baseline, 8 x 8 sets pooled
        assert_eq!(scores.len(), 8 * 24 + 8 * 8);
        let strategies: Vec<Strategy> = report.evaluations.iter().map(|e| e.strategy).collect();
        assert_eq!(strategies, vec![Strategy::Baseline, Strategy::SerfiqPool]);
        assert!(report.config.get("out_dir").is_none());
        assert_eq!(report.config["lambda"], 1.0);
    }

    #[test]
    fn stage_named_errors() {
        let config = PipelineConfig::new(
            DataSource::Jsonl {
                path: "/nonexistent/embeddings.jsonl".into(),
                expected_dim: None,
            },
            vec![Strategy::Baseline],
            CvScheme::Loio,
            "out",
        );
        let err = compute(&config).unwrap_err();
        assert_eq!(err.stage, Stage::Ingest);
        assert!(err.to_string().starts_with("ingest stage failed"));
    }

    #[test]
    fn stats_bins() {
        use crate::store::{Embedding, Role};
        let make = |subject: &str, image: &str, role| Embedding {
            dataset_id: "d".into(),
            subject_id: subject.into(),
            image_id: image.into(),
            role,
            vector: vec![1.0, 0.0],
            quality_serfiq: None,
            quality_cs: None,
            capture_time: None,
        };
        let mut images = vec![make("a", "a_r", Role::Reference), make("b", "b_r", Role::Reference)];
        images.extend((0..3).map(|i| make("a", &format!("a{i}"), Role::Trace)));
        images.extend((0..5).map(|i| make("b", &format!("b{i}"), Role::Trace)));
        let store = EmbeddingStore::from_embeddings(images, None).unwrap();
        let bins = stats(&store).unwrap();
        assert_eq!(bins, BTreeMap::from([(3, 1), (5, 1)]));
        assert_eq!(render_stats(&bins), "traces,identities\n3,1\n5,1\n");

        let synth = synthetic::generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(stats(&synth).unwrap(), BTreeMap::from([(10, 200)]));

        let empty = EmbeddingStore::from_embeddings(vec![], None).unwrap();
        assert!(stats(&empty).is_err());
    }
}
