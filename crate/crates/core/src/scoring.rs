//! Cosine comparison scores for reference-versus-trace-set pairs.

use std::cmp::Ordering;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{self, AggregationError, WeightScheme};
use crate::store::{l2_norm, ComparisonPair, EmbeddingStore, GroundTruth};

/// Scoring strategy. Pooled strategies aggregate first and score once;
/// `AvgScore`/`MaxScore` score every trace and combine the scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    AvgScore,
    MaxScore,
    AvgPool,
    CsPool,
    SerfiqPool,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Baseline,
        Strategy::AvgScore,
        Strategy::MaxScore,
        Strategy::AvgPool,
        Strategy::CsPool,
        Strategy::SerfiqPool,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::AvgScore => "avg_score",
            Strategy::MaxScore => "max_score",
            Strategy::AvgPool => "avg_pool",
            Strategy::CsPool => "cs_pool",
            Strategy::SerfiqPool => "serfiq_pool",
        }
    }

    /// Name used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::Baseline => "Baseline",
            Strategy::AvgScore => "AvgScore",
            Strategy::MaxScore => "MaxScore",
            Strategy::AvgPool => "AvgPool",
            Strategy::CsPool => "CSPool",
            Strategy::SerfiqPool => "SerFiqPool",
        }
    }

    pub fn pool_scheme(self) -> Option<WeightScheme> {
        match self {
            Strategy::AvgPool => Some(WeightScheme::Avg),
            Strategy::CsPool => Some(WeightScheme::Cs),
            Strategy::SerfiqPool => Some(WeightScheme::Serfiq),
            _ => None,
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown strategy `{s}` (expected one of: {})",
                    Strategy::ALL.map(Strategy::as_str).join(", ")
                )
            })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("cosine score of a zero-norm vector")]
    ZeroNorm,
    #[error("cannot compare vectors of dimension {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("baseline strategy needs a single-trace set, `{group}` has {size}")]
    NotSingleton { group: String, size: usize },
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64, ScoringError> {
    if a.len() != b.len() {
        return Err(ScoringError::DimensionMismatch(a.len(), b.len()));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(ScoringError::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// One scored comparison, the unit that calibration and evaluation consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub reference_id: String,
    pub trace_group: String,
    pub strategy: Strategy,
    pub score: f64,
    pub ground_truth: GroundTruth,
    pub reference_subject: String,
    pub trace_subject: String,
}

impl ScoredPair {
    fn sort_key_cmp(&self, other: &Self) -> Ordering {
        (&self.reference_id, &self.trace_group, self.strategy).cmp(&(
            &other.reference_id,
            &other.trace_group,
            other.strategy,
        ))
    }
}

/// Options that change how quality-weighted strategies treat degenerate input.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreOptions {
    pub fallback_uniform: bool,
}

/// Raw score of one pair under `strategy`.
pub fn pair_score(
    pair: &ComparisonPair,
    strategy: Strategy,
    store: &EmbeddingStore,
    options: ScoreOptions,
) -> Result<f64, ScoringError> {
    let reference = &store.embeddings()[pair.reference].vector;
    let set = &pair.trace_set;
    let trace = |m: usize| store.embeddings()[m].vector.as_slice();
    match strategy {
        Strategy::Baseline => match set.members() {
            [only] => cosine_score(reference, trace(*only)),
            members => Err(ScoringError::NotSingleton {
                group: set.qualified_label(),
                size: members.len(),
            }),
        },
        Strategy::AvgScore | Strategy::MaxScore => {
            let scores = set
                .members()
                .iter()
                .map(|&m| cosine_score(reference, trace(m)))
                .collect::<Result<Vec<f64>, _>>()?;
            Ok(if strategy == Strategy::AvgScore {
                scores.iter().sum::<f64>() / scores.len() as f64
            } else {
                scores.into_iter().fold(f64::NEG_INFINITY, f64::max)
            })
        }
        Strategy::AvgPool | Strategy::CsPool | Strategy::SerfiqPool => {
            let scheme = strategy.pool_scheme().expect("pooled strategy");
            let weights = aggregation::weights_for(set, scheme, store, options.fallback_uniform)?;
            let pooled = aggregation::aggregate(set, &weights, store)?;
            cosine_score(reference, &pooled.vector)
        }
    }
}

pub fn score_pair(
    pair: &ComparisonPair,
    strategy: Strategy,
    store: &EmbeddingStore,
    options: ScoreOptions,
) -> Result<ScoredPair, ScoringError> {
    let score = pair_score(pair, strategy, store, options)?;
    let reference = &store.embeddings()[pair.reference];
    Ok(ScoredPair {
        reference_id: reference.image_id.clone(),
        trace_group: pair.trace_set.qualified_label(),
        strategy,
        score,
        ground_truth: pair.ground_truth,
        reference_subject: reference.subject_id.clone(),
        trace_subject: pair.trace_set.subject_id().to_owned(),
    })
}

/// Scores all pairs in parallel. Output is sorted by
/// `(reference_id, trace_group, strategy)` regardless of thread scheduling.
pub fn score_pairs(
    pairs: &[ComparisonPair],
    strategy: Strategy,
    store: &EmbeddingStore,
    options: ScoreOptions,
) -> Result<Vec<ScoredPair>, ScoringError> {
    let mut scored = pairs
        .par_iter()
        .map(|p| score_pair(p, strategy, store, options))
        .collect::<Result<Vec<_>, _>>()?;
    sort_scored(&mut scored);
    Ok(scored)
}

pub fn sort_scored(scored: &mut [ScoredPair]) {
    scored.sort_by(ScoredPair::sort_key_cmp);
}

// ─── CSV ────────────────────────────────────────────────────────────────────

/// Column order of score files. The first five columns are the public
/// contract; the subject columns let evaluation recover identities.
pub const SCORE_COLUMNS: [&str; 7] = [
    "reference_id",
    "trace_group",
    "strategy",
    "score",
    "ground_truth",
    "reference_subject",
    "trace_subject",
];

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
}

pub fn write_scores_csv<W: Write>(scored: &[ScoredPair], out: W) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCORE_COLUMNS)?;
    for p in scored {
        w.write_record([
            p.reference_id.as_str(),
            p.trace_group.as_str(),
            p.strategy.as_str(),
            &p.score.to_string(),
            p.ground_truth.as_str(),
            p.reference_subject.as_str(),
            p.trace_subject.as_str(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a score file. Subject columns are optional; when absent the
/// reference subject is unknown and cross-validation is impossible, so the
/// identity fields are left empty.
pub fn read_scores_csv<R: Read>(input: R) -> Result<Vec<ScoredPair>, CsvError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let col = |name: &'static str| headers.iter().position(|h| h == name);
    let required = |name: &'static str| col(name).ok_or(CsvError::MissingColumn(name));
    let (ri, gi, si, sc, gt) = (
        required("reference_id")?,
        required("trace_group")?,
        required("strategy")?,
        required("score")?,
        required("ground_truth")?,
    );
    let (rs, ts) = (col("reference_subject"), col("trace_subject"));
    let mut out = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let field = |c: usize| record.get(c).unwrap_or("");
        let bad = |message: String| CsvError::Row { row, message };
        let score: f64 = field(sc)
            .parse()
            .map_err(|e| bad(format!("score `{}`: {e}", field(sc))))?;
        if !score.is_finite() {
            return Err(bad(format!("non-finite score {score}")));
        }
        out.push(ScoredPair {
            reference_id: field(ri).to_owned(),
            trace_group: field(gi).to_owned(),
            strategy: field(si).parse().map_err(bad)?,
            score,
            ground_truth: field(gt).parse().map_err(bad)?,
            reference_subject: rs.map(field).unwrap_or("").to_owned(),
            trace_subject: ts.map(field).unwrap_or("").to_owned(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{enumerate_pairs, Embedding, Grouping, Role, TraceSet};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as ValueStrategy;

    fn emb(subject: &str, image: &str, role: Role, vector: Vec<f64>, q: Option<f64>) -> Embedding {
        Embedding {
            dataset_id: "d".into(),
            subject_id: subject.into(),
            image_id: image.into(),
            role,
            vector,
            quality_serfiq: q,
            quality_cs: q.map(|q| 1.0 - q),
            capture_time: None,
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_score(&[2.0, 3.0, 6.0], &[2.0, 3.0, 6.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            cosine_score(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-15
        );
        assert_eq!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]), Err(ScoringError::ZeroNorm));
        assert_eq!(cosine_score(&[1.0], &[1.0, 0.0]), Err(ScoringError::DimensionMismatch(1, 2)));
    }

    fn three_trace_store() -> (EmbeddingStore, ComparisonPair) {
        // traces chosen so the per-trace cosines are 0.2, 0.5, 0.3
        let at = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let store = EmbeddingStore::from_embeddings(
            vec![
                emb("s", "r", Role::Reference, vec![1.0, 0.0], Some(1.0)),
                emb("s", "t0", Role::Trace, at(0.2), Some(0.5)),
                emb("s", "t1", Role::Trace, at(0.5), Some(0.9)),
                emb("s", "t2", Role::Trace, at(0.3), Some(0.1)),
            ],
            None,
        )
        .unwrap();
        let pair = enumerate_pairs(&store, Grouping::PerSubjectAll).unwrap().remove(0);
        (store, pair)
    }

    #[test]
    fn score_level_strategies() {
        let (store, pair) = three_trace_store();
        let opts = ScoreOptions::default();
        let avg = pair_score(&pair, Strategy::AvgScore, &store, opts).unwrap();
        let max = pair_score(&pair, Strategy::MaxScore, &store, opts).unwrap();
        assert_abs_diff_eq!(avg, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(max, 0.5, epsilon = 1e-12);
        assert!(matches!(
            pair_score(&pair, Strategy::Baseline, &store, opts),
            Err(ScoringError::NotSingleton { size: 3, .. })
        ));
    }

    #[test]
    fn avg_pool_example() {
        let store = EmbeddingStore::from_embeddings(
            vec![
                emb("s", "r", Role::Reference, vec![1.0, 0.0], None),
                emb("s", "t0", Role::Trace, vec![1.0, 0.0], None),
                emb("s", "t1", Role::Trace, vec![0.0, 1.0], None),
            ],
            None,
        )
        .unwrap();
        let pair = enumerate_pairs(&store, Grouping::PerSubjectAll).unwrap().remove(0);
        let s = pair_score(&pair, Strategy::AvgPool, &store, ScoreOptions::default()).unwrap();
        assert_abs_diff_eq!(s, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert!(matches!(
            pair_score(&pair, Strategy::CsPool, &store, ScoreOptions::default()),
            Err(ScoringError::Aggregation(AggregationError::MissingQuality { .. }))
        ));
    }

    #[test]
    fn singleton_sets_collapse() {
        let store = EmbeddingStore::from_embeddings(
            vec![
                emb("s", "r", Role::Reference, vec![0.3, -1.2, 2.0], Some(1.0)),
                emb("s", "t", Role::Trace, vec![1.1, 0.4, 0.9], Some(0.4)),
            ],
            None,
        )
        .unwrap();
        let pair = enumerate_pairs(&store, Grouping::PerImage).unwrap().remove(0);
        let scores: Vec<f64> = Strategy::ALL
            .iter()
            .map(|&s| pair_score(&pair, s, &store, ScoreOptions::default()).unwrap())
            .collect();
        assert!(scores.iter().all(|&s| s == scores[0]), "{scores:?}");
    }

    #[test]
    fn batch_output_is_sorted() {
        let (store, _) = three_trace_store();
        let pairs = enumerate_pairs(&store, Grouping::PerImage).unwrap();
        let scored = score_pairs(&pairs, Strategy::Baseline, &store, ScoreOptions::default()).unwrap();
        let groups: Vec<_> = scored.iter().map(|p| p.trace_group.as_str()).collect();
        assert_eq!(groups, ["s/t0", "s/t1", "s/t2"]);
    }

    #[test]
    fn csv_roundtrip() {
        let (store, _) = three_trace_store();
        let pairs = enumerate_pairs(&store, Grouping::PerImage).unwrap();
        let scored = score_pairs(&pairs, Strategy::Baseline, &store, ScoreOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_scores_csv(&scored, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("reference_id,trace_group,strategy,score,ground_truth,"));
        assert_eq!(read_scores_csv(buf.as_slice()).unwrap(), scored);
    }

    #[test]
    fn csv_rejects_bad_rows() {
        let text = "reference_id,trace_group,strategy,score,ground_truth\nr,g,baseline,abc,same_source\n";
        assert!(matches!(read_scores_csv(text.as_bytes()), Err(CsvError::Row { row: 2, .. })));
        let text = "reference_id,trace_group,strategy,score\n";
        assert!(matches!(read_scores_csv(text.as_bytes()), Err(CsvError::MissingColumn("ground_truth"))));
    }

    fn nonzero_vec(dim: usize) -> impl ValueStrategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim).prop_filter("nonzero", |v| l2_norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_scale_invariant(a in nonzero_vec(8), b in nonzero_vec(8), c in 1e-3f64..1e3) {
            let ab = cosine_score(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine_score(&b, &a).unwrap());
            let scaled: Vec<f64> = a.iter().map(|x| c * x).collect();
            prop_assert!((cosine_score(&scaled, &b).unwrap() - ab).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn avg_score_never_exceeds_max(
            reference in nonzero_vec(6),
            traces in prop::collection::vec(nonzero_vec(6), 1..8),
        ) {
            let mut embeddings = vec![emb("s", "r", Role::Reference, reference, None)];
            embeddings.extend(traces.into_iter().enumerate().map(|(i, v)| emb("s", &format!("t{i}"), Role::Trace, v, None)));
            let store = EmbeddingStore::from_embeddings(embeddings, None).unwrap();
            let pair = enumerate_pairs(&store, Grouping::PerSubjectAll).unwrap().remove(0);
            let avg = pair_score(&pair, Strategy::AvgScore, &store, ScoreOptions::default()).unwrap();
            let max = pair_score(&pair, Strategy::MaxScore, &store, ScoreOptions::default()).unwrap();
            prop_assert!(avg <= max + 1e-15);
        }

        #[test]
        fn concentrated_pool_equals_baseline(
            reference in nonzero_vec(5),
            traces in prop::collection::vec(nonzero_vec(5), 2..6),
            pick in 0usize..6,
        ) {
            let pick = pick % traces.len();
            let mut embeddings = vec![emb("s", "r", Role::Reference, reference, None)];
            for (i, v) in traces.into_iter().enumerate() {
                let mut e = emb("s", &format!("t{i}"), Role::Trace, v, None);
                e.quality_cs = Some(if i == pick { 0.25 } else { 1.0 });
                embeddings.push(e);
            }
            let store = EmbeddingStore::from_embeddings(embeddings, None).unwrap();
            let set = TraceSet::new(&store, "s", (1..store.len()).collect(), "all").unwrap();
            let pooled = ComparisonPair { reference: 0, trace_set: set, ground_truth: GroundTruth::SameSource };
            let single = ComparisonPair {
                reference: 0,
                trace_set: TraceSet::new(&store, "s", vec![pick + 1], "one").unwrap(),
                ground_truth: GroundTruth::SameSource,
            };
            let a = pair_score(&pooled, Strategy::CsPool, &store, ScoreOptions::default()).unwrap();
            let b = pair_score(&single, Strategy::Baseline, &store, ScoreOptions::default()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
