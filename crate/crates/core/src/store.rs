//! Embedding data model, JSON Lines ingestion and comparison-pair enumeration.
//!
//! An [`EmbeddingStore`] is built once (from a file, a generator or a protocol
//! step) and never mutated afterwards. Protocol steps that change roles or
//! labels produce a new store.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Wire format of capture timestamps.
pub const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reference,
    Trace,
}

/// Which hypothesis a comparison belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    SameSource,
    DifferentSource,
}

impl GroundTruth {
    pub fn from_subjects(reference_subject: &str, trace_subject: &str) -> Self {
        if reference_subject == trace_subject {
            GroundTruth::SameSource
        } else {
            GroundTruth::DifferentSource
        }
    }

    pub fn is_same_source(self) -> bool {
        self == GroundTruth::SameSource
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroundTruth::SameSource => "same_source",
            GroundTruth::DifferentSource => "different_source",
        }
    }
}

impl std::str::FromStr for GroundTruth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "same_source" => Ok(GroundTruth::SameSource),
            "different_source" => Ok(GroundTruth::DifferentSource),
            other => Err(format!("unknown ground truth `{other}`")),
        }
    }
}

/// One face descriptor with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub dataset_id: String,
    pub subject_id: String,
    pub image_id: String,
    pub role: Role,
    pub vector: Vec<f64>,
    pub quality_serfiq: Option<f64>,
    pub quality_cs: Option<f64>,
    pub capture_time: Option<DateTime<Utc>>,
}

impl Embedding {
    pub fn norm(&self) -> f64 {
        l2_norm(&self.vector)
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.vector.is_empty() {
            return Err(StoreError::EmptyVector {
                image: self.image_id.clone(),
            });
        }
        if self.vector.iter().any(|x| !x.is_finite()) {
            return Err(StoreError::NonFinite {
                image: self.image_id.clone(),
            });
        }
        if self.norm() <= 0.0 {
            return Err(StoreError::ZeroNorm {
                image: self.image_id.clone(),
            });
        }
        for (field, value) in [("serfiq", self.quality_serfiq), ("cs", self.quality_cs)] {
            if let Some(q) = value {
                if !(0.0..=1.0).contains(&q) {
                    return Err(StoreError::InvalidQuality {
                        image: self.image_id.clone(),
                        field,
                        value: q,
                    });
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("image `{image}`: vector is empty")]
    EmptyVector { image: String },
    #[error("image `{image}`: vector has non-finite entries")]
    NonFinite { image: String },
    #[error("image `{image}`: vector has zero norm")]
    ZeroNorm { image: String },
    #[error("image `{image}`: dimension {found} does not match store dimension {expected}")]
    DimensionMismatch {
        image: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate image `{image}` in dataset `{dataset}`")]
    Duplicate { dataset: String, image: String },
    #[error("image `{image}`: {field} quality {value} outside [0, 1]")]
    InvalidQuality {
        image: String,
        field: &'static str,
        value: f64,
    },
}

/// Validated, immutable collection of embeddings sharing one dimension.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    embeddings: Vec<Embedding>,
    dim: usize,
    by_key: HashMap<(String, String), usize>,
}

impl EmbeddingStore {
    /// Builds a store, checking every embedding invariant. The dimension is
    /// taken from `expected_dim` when given, otherwise from the first record.
    pub fn from_embeddings(
        embeddings: Vec<Embedding>,
        expected_dim: Option<usize>,
    ) -> Result<Self, StoreError> {
        let mut builder = StoreBuilder::new(expected_dim);
        for e in embeddings {
            builder.push(e)?;
        }
        Ok(builder.finish())
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    /// Shared vector dimension (0 for an empty store).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn get(&self, index: usize) -> Option<&Embedding> {
        self.embeddings.get(index)
    }

    pub fn index_of(&self, dataset_id: &str, image_id: &str) -> Option<usize> {
        self.by_key
            .get(&(dataset_id.to_owned(), image_id.to_owned()))
            .copied()
    }

    /// Distinct subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.embeddings
            .iter()
            .map(|e| e.subject_id.as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    }

    pub fn references(&self) -> impl Iterator<Item = (usize, &Embedding)> {
        self.embeddings
            .iter()
            .enumerate()
            .filter(|(_, e)| e.role == Role::Reference)
    }

    pub fn traces(&self) -> impl Iterator<Item = (usize, &Embedding)> {
        self.embeddings
            .iter()
            .enumerate()
            .filter(|(_, e)| e.role == Role::Trace)
    }

    /// Returns a new store with `f` applied to every embedding; embeddings for
    /// which `f` returns `None` are dropped.
    pub fn filter_map<F>(&self, f: F) -> Result<Self, StoreError>
    where
        F: FnMut(&Embedding) -> Option<Embedding>,
    {
        let kept: Vec<Embedding> = self.embeddings.iter().filter_map(f).collect();
        let dim = if kept.is_empty() { None } else { Some(self.dim) };
        Self::from_embeddings(kept, dim)
    }

    /// Serializes the store as JSON Lines, one record per embedding.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.embeddings {
            let record = EmbeddingRecord::from(e);
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

struct StoreBuilder {
    embeddings: Vec<Embedding>,
    dim: Option<usize>,
    by_key: HashMap<(String, String), usize>,
}

impl StoreBuilder {
    fn new(dim: Option<usize>) -> Self {
        Self {
            embeddings: Vec::new(),
            dim,
            by_key: HashMap::new(),
        }
    }

    fn push(&mut self, e: Embedding) -> Result<(), StoreError> {
        e.validate()?;
        match self.dim {
            Some(d) if d != e.vector.len() => {
                return Err(StoreError::DimensionMismatch {
                    image: e.image_id,
                    expected: d,
                    found: e.vector.len(),
                })
            }
            Some(_) => {}
            None => self.dim = Some(e.vector.len()),
        }
        let key = (e.dataset_id.clone(), e.image_id.clone());
        if self.by_key.contains_key(&key) {
            return Err(StoreError::Duplicate {
                dataset: e.dataset_id,
                image: e.image_id,
            });
        }
        self.by_key.insert(key, self.embeddings.len());
        self.embeddings.push(e);
        Ok(())
    }

    fn finish(self) -> EmbeddingStore {
        EmbeddingStore {
            embeddings: self.embeddings,
            dim: self.dim.unwrap_or(0),
            by_key: self.by_key,
        }
    }
}

// ─── JSON Lines ─────────────────────────────────────────────────────────────

/// On-disk record, one per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub dataset: String,
    pub subject: String,
    pub image: String,
    pub role: Role,
    pub vector: Vec<f64>,
    #[serde(default)]
    pub serfiq: Option<f64>,
    #[serde(default)]
    pub cs: Option<f64>,
    #[serde(default)]
    pub time: Option<String>,
}

impl From<&Embedding> for EmbeddingRecord {
    fn from(e: &Embedding) -> Self {
        Self {
            dataset: e.dataset_id.clone(),
            subject: e.subject_id.clone(),
            image: e.image_id.clone(),
            role: e.role,
            vector: e.vector.clone(),
            serfiq: e.quality_serfiq,
            cs: e.quality_cs,
            time: e.capture_time.map(format_time),
        }
    }
}

impl EmbeddingRecord {
    fn into_embedding(self) -> Result<Embedding, String> {
        let capture_time = match self.time {
            Some(t) => Some(parse_time(&t).ok_or_else(|| {
                format!("image `{}`: bad timestamp `{t}`, expected YYYY-MM-DDThh:mm:ssZ", self.image)
            })?),
            None => None,
        };
        Ok(Embedding {
            dataset_id: self.dataset,
            subject_id: self.subject,
            image_id: self.image,
            role: self.role,
            vector: self.vector,
            quality_serfiq: self.serfiq,
            quality_cs: self.cs,
            capture_time,
        })
    }
}

pub fn parse_time(s: &str) -> Option<DateTime<Utc>> {
    NaiveDateTime::parse_from_str(s, TIME_FORMAT)
        .ok()
        .map(|t| t.and_utc())
}

pub fn format_time(t: DateTime<Utc>) -> String {
    t.format(TIME_FORMAT).to_string()
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read input: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: StoreError,
    },
}

impl IngestError {
    pub fn line(&self) -> Option<usize> {
        match self {
            IngestError::Io(_) => None,
            IngestError::Malformed { line, .. } | IngestError::Invalid { line, .. } => Some(*line),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    /// Required vector dimension; inferred from the first record when absent.
    pub expected_dim: Option<usize>,
    /// Skip bad records instead of failing on the first one.
    pub skip_invalid: bool,
}

/// Bookkeeping for an ingest run.
#[derive(Debug, Default)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: Vec<IngestError>,
}

pub fn ingest(
    path: impl AsRef<Path>,
    options: IngestOptions,
) -> Result<(EmbeddingStore, IngestSummary), IngestError> {
    let file = File::open(path)?;
    read_jsonl(BufReader::new(file), options)
}

/// Parses JSON Lines from any reader. Blank lines are ignored; line numbers
/// in errors are 1-based.
pub fn read_jsonl<R: BufRead>(
    reader: R,
    options: IngestOptions,
) -> Result<(EmbeddingStore, IngestSummary), IngestError> {
    let mut builder = StoreBuilder::new(options.expected_dim);
    let mut summary = IngestSummary::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let outcome = serde_json::from_str::<EmbeddingRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(EmbeddingRecord::into_embedding)
            .map_err(|message| IngestError::Malformed {
                line: line_no,
                message,
            })
            .and_then(|e| {
                builder.push(e).map_err(|source| IngestError::Invalid {
                    line: line_no,
                    source,
                })
            });
        match outcome {
            Ok(()) => summary.accepted += 1,
            Err(e) if options.skip_invalid => summary.rejected.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok((builder.finish(), summary))
}

// ─── Trace sets and pairs ───────────────────────────────────────────────────

/// Ordered set of trace embeddings compared as one unit. Members are indices
/// into the owning store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceSet {
    subject_id: String,
    members: Vec<usize>,
    group_label: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum PairError {
    #[error("subject `{0}` has trace images but no reference")]
    MissingReference(String),
    #[error("trace set `{0}` is empty")]
    EmptyTraceSet(String),
    #[error("trace set `{group}`: index {index} is not in the store")]
    UnknownMember { group: String, index: usize },
    #[error("trace set `{group}`: image `{image}` is not a trace")]
    NotATrace { group: String, image: String },
    #[error("trace set `{group}`: image `{image}` belongs to subject `{found}`, not `{expected}`")]
    WrongSubject {
        group: String,
        image: String,
        expected: String,
        found: String,
    },
    #[error("trace set `{group}`: image `{image}` appears twice")]
    DuplicateMember { group: String, image: String },
}

impl TraceSet {
    /// Checks the set against `store`: non-empty, every member an existing
    /// trace of `subject_id`, no repeats.
    pub fn new(
        store: &EmbeddingStore,
        subject_id: impl Into<String>,
        members: Vec<usize>,
        group_label: impl Into<String>,
    ) -> Result<Self, PairError> {
        let subject_id = subject_id.into();
        let group_label = group_label.into();
        if members.is_empty() {
            return Err(PairError::EmptyTraceSet(group_label));
        }
        let mut seen = HashSet::new();
        for &m in &members {
            let e = store.get(m).ok_or_else(|| PairError::UnknownMember {
                group: group_label.clone(),
                index: m,
            })?;
            if e.role != Role::Trace {
                return Err(PairError::NotATrace {
                    group: group_label.clone(),
                    image: e.image_id.clone(),
                });
            }
            if e.subject_id != subject_id {
                return Err(PairError::WrongSubject {
                    group: group_label.clone(),
                    image: e.image_id.clone(),
                    expected: subject_id.clone(),
                    found: e.subject_id.clone(),
                });
            }
            if !seen.insert(m) {
                return Err(PairError::DuplicateMember {
                    group: group_label.clone(),
                    image: e.image_id.clone(),
                });
            }
        }
        Ok(Self {
            subject_id,
            members,
            group_label,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn group_label(&self) -> &str {
        &self.group_label
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member_ids<'s>(&self, store: &'s EmbeddingStore) -> Vec<&'s str> {
        self.members
            .iter()
            .map(|&m| store.embeddings()[m].image_id.as_str())
            .collect()
    }

    /// Unique label used in score tables: the subject and the group.
    pub fn qualified_label(&self) -> String {
        format!("{}/{}", self.subject_id, self.group_label)
    }
}

/// A reference compared against a trace set.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonPair {
    pub reference: usize,
    pub trace_set: TraceSet,
    pub ground_truth: GroundTruth,
}

/// How traces are bundled into sets before comparison.
#[derive(Debug, Clone, Copy)]
pub enum Grouping<'a> {
    /// Every trace on its own (the single-image baseline).
    PerImage,
    /// All traces of a subject in one set, labelled `all`.
    PerSubjectAll,
    /// Caller-supplied sets, e.g. encounters.
    PerGroup(&'a [TraceSet]),
}

/// Builds the trace sets for a grouping, ordered by subject first appearance
/// and then store order.
pub fn trace_sets(store: &EmbeddingStore, grouping: Grouping<'_>) -> Result<Vec<TraceSet>, PairError> {
    match grouping {
        Grouping::PerImage => store
            .traces()
            .map(|(i, e)| TraceSet::new(store, e.subject_id.clone(), vec![i], e.image_id.clone()))
            .collect(),
        Grouping::PerSubjectAll => {
            let mut order: Vec<&str> = Vec::new();
            let mut members: HashMap<&str, Vec<usize>> = HashMap::new();
            for (i, e) in store.traces() {
                members
                    .entry(e.subject_id.as_str())
                    .or_insert_with(|| {
                        order.push(e.subject_id.as_str());
                        Vec::new()
                    })
                    .push(i);
            }
            order
                .into_iter()
                .map(|s| TraceSet::new(store, s, members.remove(s).unwrap_or_default(), "all"))
                .collect()
        }
        Grouping::PerGroup(sets) => {
            for set in sets {
                TraceSet::new(store, set.subject_id.clone(), set.members.clone(), set.group_label.clone())?;
            }
            Ok(sets.to_vec())
        }
    }
}

/// Pairs every reference with every trace set. Same-source exactly when the
/// subjects match.
pub fn enumerate_pairs(
    store: &EmbeddingStore,
    grouping: Grouping<'_>,
) -> Result<Vec<ComparisonPair>, PairError> {
    let sets = trace_sets(store, grouping)?;
    let with_reference: HashSet<&str> = store.references().map(|(_, e)| e.subject_id.as_str()).collect();
    if let Some(orphan) = sets
        .iter()
        .find(|s| !with_reference.contains(s.subject_id()))
    {
        return Err(PairError::MissingReference(orphan.subject_id.clone()));
    }
    let mut pairs = Vec::with_capacity(with_reference.len() * sets.len());
    for (r, reference) in store.references() {
        for set in &sets {
            pairs.push(ComparisonPair {
                reference: r,
                trace_set: set.clone(),
                ground_truth: GroundTruth::from_subjects(&reference.subject_id, set.subject_id()),
            });
        }
    }
    Ok(pairs)
}
