//! Dataset preparation: encounter grouping, quality-ranked reference
//! selection, identity-label cleaning and duplicate removal.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use petgraph::unionfind::UnionFind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::cosine_score;
use crate::store::{EmbeddingStore, PairError, Role, StoreError, TraceSet};

/// Default gap, in seconds, that separates two encounters.
pub const DEFAULT_ENCOUNTER_GAP: f64 = 120.0;
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_COMPONENT: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("encounter threshold must be positive and finite, got {0}")]
    InvalidThreshold(f64),
    #[error("trace `{0}` has no capture time")]
    MissingTime(String),
    #[error("subject `{0}` has no image with both quality scores")]
    NoScoredImage(String),
    #[error("unknown subject `{0}`")]
    UnknownSubject(String),
    #[error("the store is empty")]
    EmptyStore,
    #[error("minimum component size must be at least 1")]
    InvalidMinComponent,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pair(#[from] PairError),
}

// ─── Encounters ─────────────────────────────────────────────────────────────

/// A maximal run of one subject's traces with no gap above the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Encounter {
    pub subject_id: String,
    /// Store indices in capture order.
    pub members: Vec<usize>,
    pub start_time: Option<DateTime<Utc>>,
    pub end_time: Option<DateTime<Utc>>,
    /// Position among the subject's encounters, from 0.
    pub index: usize,
}

impl Encounter {
    pub fn to_trace_set(&self, store: &EmbeddingStore) -> Result<TraceSet, PairError> {
        TraceSet::new(store, self.subject_id.clone(), self.members.clone(), self.index.to_string())
    }
}

/// Splits each subject's traces into encounters: sorted by time, a new
/// encounter starts whenever the gap to the previous capture exceeds
/// `threshold_seconds`. Subjects whose traces lack timestamps are an error
/// unless `untimed_single_group` is set, in which case all of that subject's
/// traces form one encounter.
pub fn group_encounters(
    store: &EmbeddingStore,
    threshold_seconds: f64,
    untimed_single_group: bool,
) -> Result<Vec<Encounter>, ProtocolError> {
    if !(threshold_seconds.is_finite() && threshold_seconds > 0.0) {
        return Err(ProtocolError::InvalidThreshold(threshold_seconds));
    }
    let mut by_subject: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, e) in store.traces() {
        let s = *slot.entry(e.subject_id.as_str()).or_insert_with(|| {
            by_subject.push((e.subject_id.as_str(), Vec::new()));
            by_subject.len() - 1
        });
        by_subject[s].1.push(i);
    }

    let mut encounters = Vec::new();
    for (subject, members) in by_subject {
        let missing = members
            .iter()
            .find(|&&m| store.embeddings()[m].capture_time.is_none());
        if let Some(&m) = missing {
            if !untimed_single_group {
                return Err(ProtocolError::MissingTime(store.embeddings()[m].image_id.clone()));
            }
            encounters.push(Encounter {
                subject_id: subject.to_owned(),
                members,
                start_time: None,
                end_time: None,
                index: 0,
            });
            continue;
        }
        let mut timed: Vec<(DateTime<Utc>, &str, usize)> = members
            .iter()
            .map(|&m| {
                let e = &store.embeddings()[m];
                (e.capture_time.expect("checked above"), e.image_id.as_str(), m)
            })
            .collect();
        timed.sort();
        let mut current: Vec<(DateTime<Utc>, usize)> = Vec::new();
        let flush = |current: &mut Vec<(DateTime<Utc>, usize)>, encounters: &mut Vec<Encounter>, index: usize| {
            encounters.push(Encounter {
                subject_id: subject.to_owned(),
                members: current.iter().map(|&(_, m)| m).collect(),
                start_time: current.first().map(|&(t, _)| t),
                end_time: current.last().map(|&(t, _)| t),
                index,
            });
            current.clear();
        };
        let mut index = 0;
        for (t, _, m) in timed {
            if let Some(&(prev, _)) = current.last() {
                let gap = (t - prev).num_milliseconds() as f64 / 1000.0;
                if gap > threshold_seconds {
                    flush(&mut current, &mut encounters, index);
                    index += 1;
                }
            }
            current.push((t, m));
        }
        flush(&mut current, &mut encounters, index);
    }
    Ok(encounters)
}

/// Encounters as trace sets labelled by encounter index.
pub fn encounter_trace_sets(
    store: &EmbeddingStore,
    encounters: &[Encounter],
) -> Result<Vec<TraceSet>, ProtocolError> {
    encounters
        .iter()
        .map(|e| e.to_trace_set(store).map_err(ProtocolError::from))
        .collect()
}

// ─── Reference selection ────────────────────────────────────────────────────

/// Picks the subject image with the best combined quality rank: rank by
/// Ser-Fiq descending plus rank by Confusion Score ascending (competition
/// ranking, 1 = best), smallest sum wins, ties go to the smallest image id.
/// Only images carrying both scores compete.
pub fn select_reference(store: &EmbeddingStore, subject_id: &str) -> Result<usize, ProtocolError> {
    let images: Vec<usize> = store
        .embeddings()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.subject_id == subject_id)
        .map(|(i, _)| i)
        .collect();
    if images.is_empty() {
        return Err(ProtocolError::UnknownSubject(subject_id.to_owned()));
    }
    let scored: Vec<(usize, f64, f64)> = images
        .iter()
        .filter_map(|&i| {
            let e = &store.embeddings()[i];
            Some((i, e.quality_serfiq?, e.quality_cs?))
        })
        .collect();
    if scored.is_empty() {
        return Err(ProtocolError::NoScoredImage(subject_id.to_owned()));
    }
    let combined = |&(_, sf, cs): &(usize, f64, f64)| {
        let serfiq_rank = 1 + scored.iter().filter(|o| o.1 > sf).count();
        let cs_rank = 1 + scored.iter().filter(|o| o.2 < cs).count();
        serfiq_rank + cs_rank
    };
    let best = scored
        .iter()
        .min_by(|a, b| {
            combined(a)
                .cmp(&combined(b))
                .then_with(|| store.embeddings()[a.0].image_id.cmp(&store.embeddings()[b.0].image_id))
        })
        .expect("non-empty");
    Ok(best.0)
}

/// Re-assigns roles for every subject: the selected image becomes the
/// reference, all other images become traces.
pub fn assign_references(store: &EmbeddingStore) -> Result<(EmbeddingStore, Vec<usize>), ProtocolError> {
    let mut chosen = Vec::new();
    let mut reference_of: HashMap<String, usize> = HashMap::new();
    for subject in store.subjects() {
        let r = select_reference(store, subject)?;
        reference_of.insert(subject.to_owned(), r);
        chosen.push(r);
    }
    let mut index = 0;
    let relabelled = store.filter_map(|e| {
        let role = if reference_of[&e.subject_id] == index {
            Role::Reference
        } else {
            Role::Trace
        };
        index += 1;
        let mut e = e.clone();
        e.role = role;
        Some(e)
    })?;
    Ok((relabelled, chosen))
}

// ─── Identity cleaning ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reassignment {
    pub image_id: String,
    pub old_subject: String,
    pub new_subject: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub edge_threshold: f64,
    pub min_component: usize,
    pub components: usize,
    pub reassigned: Vec<Reassignment>,
    pub discarded: Vec<String>,
}

impl CleaningReport {
    pub fn is_noop(&self) -> bool {
        self.reassigned.is_empty() && self.discarded.is_empty()
    }
}

/// Similarity-graph label cleaning. Images are joined when their cosine score
/// reaches `edge_threshold`; each connected component takes the plurality
/// subject label. Components with a tied plurality or fewer than
/// `min_component` images are discarded. Returns the report and the cleaned
/// store.
pub fn clean_identities(
    store: &EmbeddingStore,
    edge_threshold: f64,
    min_component: usize,
) -> Result<(CleaningReport, EmbeddingStore), ProtocolError> {
    if store.is_empty() {
        return Err(ProtocolError::EmptyStore);
    }
    if min_component == 0 {
        return Err(ProtocolError::InvalidMinComponent);
    }
    let n = store.len();
    let vectors: Vec<&[f64]> = store.embeddings().iter().map(|e| e.vector.as_slice()).collect();
    let edges: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let vectors = &vectors;
            (i + 1..n).filter_map(move |j| {
                let s = cosine_score(vectors[i], vectors[j]).expect("store vectors are valid");
                (s >= edge_threshold).then_some((i, j))
            })
        })
        .collect();
    let mut uf = UnionFind::<usize>::new(n);
    for (i, j) in edges {
        uf.union(i, j);
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        components.entry(uf.find(i)).or_default().push(i);
    }

    let mut new_subject: Vec<Option<String>> = vec![None; n];
    let mut reassigned = Vec::new();
    let mut discarded = Vec::new();
    for members in components.values() {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &m in members {
            *counts.entry(store.embeddings()[m].subject_id.as_str()).or_default() += 1;
        }
        let top = counts.values().copied().max().unwrap_or(0);
        let leaders: Vec<&str> = counts.iter().filter(|(_, &c)| c == top).map(|(&s, _)| s).collect();
        if members.len() < min_component || leaders.len() > 1 {
            discarded.extend(members.iter().map(|&m| store.embeddings()[m].image_id.clone()));
            continue;
        }
        let label = leaders[0];
        for &m in members {
            let e = &store.embeddings()[m];
            if e.subject_id != label {
                reassigned.push(Reassignment {
                    image_id: e.image_id.clone(),
                    old_subject: e.subject_id.clone(),
                    new_subject: label.to_owned(),
                });
            }
            new_subject[m] = Some(label.to_owned());
        }
    }
    reassigned.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    discarded.sort();

    let mut index = 0;
    let cleaned = store.filter_map(|e| {
        let label = new_subject[index].clone();
        index += 1;
        label.map(|subject_id| {
            let mut e = e.clone();
            e.subject_id = subject_id;
            e
        })
    })?;
    let report = CleaningReport {
        edge_threshold,
        min_component,
        components: components.len(),
        reassigned,
        discarded,
    };
    Ok((report, cleaned))
}

// ─── De-duplication ─────────────────────────────────────────────────────────

/// Removes, within each subject, images whose vector is bitwise identical to
/// one with a smaller image id. Returns removed image ids (sorted) and the
/// reduced store. Identical vectors across subjects are kept.
pub fn dedupe(store: &EmbeddingStore) -> Result<(Vec<String>, EmbeddingStore), ProtocolError> {
    let mut order: Vec<usize> = (0..store.len()).collect();
    order.sort_by(|&a, &b| store.embeddings()[a].image_id.cmp(&store.embeddings()[b].image_id));
    let mut seen: HashMap<(&str, Vec<u64>), usize> = HashMap::new();
    let mut drop = vec![false; store.len()];
    for i in order {
        let e = &store.embeddings()[i];
        let bits: Vec<u64> = e.vector.iter().map(|x| x.to_bits()).collect();
        if seen.insert((e.subject_id.as_str(), bits), i).is_some() {
            drop[i] = true;
        }
    }
    let mut removed: Vec<String> = (0..store.len())
        .filter(|&i| drop[i])
        .map(|i| store.embeddings()[i].image_id.clone())
        .collect();
    removed.sort();
    let mut index = 0;
    let kept = store.filter_map(|e| {
        let keep = !drop[index];
        index += 1;
        keep.then(|| e.clone())
    })?;
    Ok((removed, kept))
}
