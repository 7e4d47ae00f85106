//! Calibrated likelihood ratios for forensic facial comparison.
//!
//! The crate takes pre-computed face embeddings (one JSON Lines record per
//! image) and turns reference-versus-trace comparisons into likelihood
//! ratios:
//!
//! * [`store`] ingests and validates embeddings and enumerates comparison pairs.
//! * [`aggregation`] pools the descriptors of a trace set with average,
//!   Ser-Fiq or Confusion-Score weights.
//! * [`scoring`] computes cosine scores under the baseline, score-level
//!   (AvgScore, MaxScore) and pooled strategies.
//! * [`calibration`] maps scores to log-LRs with L2-penalized logistic regression.
//! * [`evaluation`] computes Cllr and Tippett curves and runs the
//!   identity-aware cross-validation regimes.
//! * [`protocols`] holds the dataset preparation steps: encounter grouping,
//!   reference selection, identity cleaning and de-duplication.
//! * [`synthetic`] generates seeded embedding sets with quality-dependent noise.
//! * [`pipeline`] wires everything together and writes reports and plots.

pub mod aggregation;
pub mod calibration;
pub mod evaluation;
pub mod pipeline;
pub mod protocols;
pub mod report;
pub mod scoring;
pub mod store;
pub mod synthetic;

pub use aggregation::{AggregatedDescriptor, WeightScheme, WeightVector};
pub use calibration::{Calibrator, LikelihoodRatio};
pub use evaluation::{CvScheme, EvaluationReport, TippettCurves};
pub use pipeline::{PipelineConfig, PipelineError};
pub use scoring::{ScoredPair, Strategy};
pub use store::{
    ComparisonPair, Embedding, EmbeddingStore, GroundTruth, Grouping, Role, TraceSet,
};
pub use synthetic::SyntheticConfig;
