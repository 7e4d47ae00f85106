//! Weighted pooling of trace descriptors into one aggregated descriptor.
//!
//! `v* = Σ wᵢ vᵢ` with weights from one of three schemes:
//!
//! * `avg`: every trace gets `1/N`.
//! * `serfiq`: `wᵢ = sᵢ / Σ sⱼ` where `s` is the Ser-Fiq quality (higher is better).
//! * `cs`: `wᵢ = (1 − csᵢ) / Σ (1 − csⱼ)` where `cs` is the Confusion Score
//!   (lower is better).
//!
//! The pooled vector is not re-normalized.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{EmbeddingStore, TraceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    Avg,
    Serfiq,
    Cs,
}

impl WeightScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightScheme::Avg => "avg",
            WeightScheme::Serfiq => "serfiq",
            WeightScheme::Cs => "cs",
        }
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg" => Ok(WeightScheme::Avg),
            "serfiq" => Ok(WeightScheme::Serfiq),
            "cs" => Ok(WeightScheme::Cs),
            other => Err(format!("unknown weighting scheme `{other}` (avg, serfiq, cs)")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("cannot build weights for an empty trace set")]
    Empty,
    #[error("trace `{image}` has no {scheme} quality score")]
    MissingQuality { image: String, scheme: &'static str },
    #[error("{scheme} quality score {value} is outside [0, 1]")]
    InvalidQuality { scheme: &'static str, value: f64 },
    #[error("{scheme} weights are undefined: normalizing sum is zero")]
    ZeroSum { scheme: &'static str },
    #[error("{weights} weights for a trace set of {traces}")]
    LengthMismatch { weights: usize, traces: usize },
    #[error("trace dimension {found} differs from {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Non-negative weights summing to one, one per trace.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
    scheme: WeightScheme,
}

impl WeightVector {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Normalizes raw non-negative masses. Fails when they sum to zero.
    fn from_masses(masses: Vec<f64>, scheme: WeightScheme) -> Result<Self, AggregationError> {
        if masses.is_empty() {
            return Err(AggregationError::Empty);
        }
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            return Err(AggregationError::ZeroSum {
                scheme: scheme.as_str(),
            });
        }
        Ok(Self {
            weights: masses.into_iter().map(|m| m / total).collect(),
            scheme,
        })
    }
}

pub fn avg_weights(n: usize) -> Result<WeightVector, AggregationError> {
    if n == 0 {
        return Err(AggregationError::Empty);
    }
    Ok(WeightVector {
        weights: vec![1.0 / n as f64; n],
        scheme: WeightScheme::Avg,
    })
}

fn check_unit(scheme: &'static str, scores: &[f64]) -> Result<(), AggregationError> {
    match scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        Some(&value) => Err(AggregationError::InvalidQuality { scheme, value }),
        None => Ok(()),
    }
}

pub fn serfiq_weights(scores: &[f64]) -> Result<WeightVector, AggregationError> {
    check_unit("serfiq", scores)?;
    WeightVector::from_masses(scores.to_vec(), WeightScheme::Serfiq)
}

pub fn cs_weights(scores: &[f64]) -> Result<WeightVector, AggregationError> {
    check_unit("cs", scores)?;
    WeightVector::from_masses(scores.iter().map(|cs| 1.0 - cs).collect(), WeightScheme::Cs)
}

/// Weights for a trace set under `scheme`, reading quality scores from the
/// store. With `fallback_uniform`, degenerate quality inputs (all-zero
/// Ser-Fiq, all-one CS) fall back to uniform weights; missing scores are
/// still an error.
pub fn weights_for(
    trace_set: &TraceSet,
    scheme: WeightScheme,
    store: &EmbeddingStore,
    fallback_uniform: bool,
) -> Result<WeightVector, AggregationError> {
    let quality = |pick: fn(&crate::store::Embedding) -> Option<f64>| {
        trace_set
            .members()
            .iter()
            .map(|&m| {
                let e = &store.embeddings()[m];
                pick(e).ok_or_else(|| AggregationError::MissingQuality {
                    image: e.image_id.clone(),
                    scheme: scheme.as_str(),
                })
            })
            .collect::<Result<Vec<f64>, _>>()
    };
    let result = match scheme {
        WeightScheme::Avg => return avg_weights(trace_set.len()),
        WeightScheme::Serfiq => serfiq_weights(&quality(|e| e.quality_serfiq)?),
        WeightScheme::Cs => cs_weights(&quality(|e| e.quality_cs)?),
    };
    match result {
        Err(AggregationError::ZeroSum { .. }) if fallback_uniform => {
            let uniform = avg_weights(trace_set.len())?;
            Ok(WeightVector {
                weights: uniform.weights,
                scheme,
            })
        }
        other => other,
    }
}

/// Pooled descriptor of a trace set.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedDescriptor {
    pub vector: Vec<f64>,
    pub subject_id: String,
    pub group_label: String,
    pub scheme: WeightScheme,
}

/// Linear combination of raw vectors with the given weights.
pub fn combine<'v>(
    vectors: impl IntoIterator<Item = &'v [f64]>,
    weights: &[f64],
) -> Result<Vec<f64>, AggregationError> {
    let mut out: Option<Vec<f64>> = None;
    let mut count = 0;
    for (v, &w) in vectors.into_iter().zip(weights) {
        count += 1;
        let acc = out.get_or_insert_with(|| vec![0.0; v.len()]);
        if acc.len() != v.len() {
            return Err(AggregationError::DimensionMismatch {
                expected: acc.len(),
                found: v.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * x;
        }
    }
    if count != weights.len() {
        return Err(AggregationError::LengthMismatch {
            weights: weights.len(),
            traces: count,
        });
    }
    out.ok_or(AggregationError::Empty)
}

pub fn aggregate(
    trace_set: &TraceSet,
    weights: &WeightVector,
    store: &EmbeddingStore,
) -> Result<AggregatedDescriptor, AggregationError> {
    if weights.len() != trace_set.len() {
        return Err(AggregationError::LengthMismatch {
            weights: weights.len(),
            traces: trace_set.len(),
        });
    }
    let vectors = trace_set
        .members()
        .iter()
        .map(|&m| store.embeddings()[m].vector.as_slice());
    Ok(AggregatedDescriptor {
        vector: combine(vectors, weights.weights())?,
        subject_id: trace_set.subject_id().to_owned(),
        group_label: trace_set.group_label().to_owned(),
        scheme: weights.scheme(),
    })
}
