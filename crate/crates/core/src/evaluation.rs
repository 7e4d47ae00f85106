//! Validation of LR systems: Cllr, Tippett curves and identity-aware
//! cross-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{self, CalibrationError, Calibrator};
use crate::scoring::{ScoredPair, Strategy};
use crate::store::GroundTruth;

/// Default number of Tippett grid points.
pub const DEFAULT_TIPPETT_POINTS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum EvaluationError {
    #[error("Cllr needs at least one LR per hypothesis ({same} same-source, {different} different-source)")]
    EmptyClass { same: usize, different: usize },
    #[error("log10 LR {0} is not finite")]
    NonFinite(f64),
    #[error("a Tippett grid needs at least 2 points, got {0}")]
    GridTooSmall(usize),
    #[error("no scored pairs to evaluate")]
    NoPairs,
    #[error("pairs mix strategies {0} and {1}")]
    MixedStrategies(Strategy, Strategy),
    #[error("pair {reference_id} vs {trace_group} has no subject identities")]
    MissingIdentity {
        reference_id: String,
        trace_group: String,
    },
    #[error("pair {reference_id} vs {trace_group}: label {label} contradicts subjects")]
    InconsistentLabel {
        reference_id: String,
        trace_group: String,
        label: &'static str,
    },
    #[error("cross-validation needs at least 3 identities, found {0}")]
    TooFewIdentities(usize),
    #[error("k = {k} folds is invalid for {identities} identities")]
    InvalidFoldCount { k: usize, identities: usize },
    #[error("fold {fold}: training data has a single class")]
    SingleClassFold { fold: String },
    #[error("fold {fold}: {source}")]
    Calibration {
        fold: String,
        #[source]
        source: CalibrationError,
    },
}

// ─── Cllr ───────────────────────────────────────────────────────────────────

/// `log2(1 + e^x)` computed without overflow.
fn log2_1p_exp(x: f64) -> f64 {
    let softplus = if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    };
    softplus / std::f64::consts::LN_2
}

/// Log-likelihood-ratio cost in bits, from base-10 log LRs:
///
/// ```text
/// Cllr = ½ · [ mean_same log2(1 + 1/LR) + mean_different log2(1 + LR) ]
/// ```
pub fn cllr(log10_same: &[f64], log10_different: &[f64]) -> Result<f64, EvaluationError> {
    if log10_same.is_empty() || log10_different.is_empty() {
        return Err(EvaluationError::EmptyClass {
            same: log10_same.len(),
            different: log10_different.len(),
        });
    }
    if let Some(&bad) = log10_same.iter().chain(log10_different).find(|x| !x.is_finite()) {
        return Err(EvaluationError::NonFinite(bad));
    }
    let ln10 = std::f64::consts::LN_10;
    let penalty_same: f64 = log10_same.iter().map(|&l| log2_1p_exp(-l * ln10)).sum::<f64>()
        / log10_same.len() as f64;
    let penalty_different: f64 = log10_different
        .iter()
        .map(|&l| log2_1p_exp(l * ln10))
        .sum::<f64>()
        / log10_different.len() as f64;
    Ok(0.5 * (penalty_same + penalty_different))
}

// ─── Tippett ────────────────────────────────────────────────────────────────

/// Proportion of LRs at or above each threshold, per hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TippettCurves {
    pub grid: Vec<f64>,
    pub p_same_geq: Vec<f64>,
    pub p_different_geq: Vec<f64>,
}

/// Fraction of `sorted` values `>= threshold`.
pub fn proportion_geq(sorted: &[f64], threshold: f64) -> f64 {
    let below = sorted.partition_point(|&x| x < threshold);
    (sorted.len() - below) as f64 / sorted.len() as f64
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Tippett curves over an evenly spaced log10-LR grid that brackets every LR
/// and zero. When zero is not a grid node it is inserted, so the grid may
/// hold `grid_points + 1` values.
pub fn tippett(
    log10_same: &[f64],
    log10_different: &[f64],
    grid_points: usize,
) -> Result<TippettCurves, EvaluationError> {
    if grid_points < 2 {
        return Err(EvaluationError::GridTooSmall(grid_points));
    }
    if log10_same.is_empty() || log10_different.is_empty() {
        return Err(EvaluationError::EmptyClass {
            same: log10_same.len(),
            different: log10_different.len(),
        });
    }
    if let Some(&bad) = log10_same.iter().chain(log10_different).find(|x| !x.is_finite()) {
        return Err(EvaluationError::NonFinite(bad));
    }
    let same = sorted_copy(log10_same);
    let different = sorted_copy(log10_different);
    let lo = same[0].min(different[0]).min(0.0);
    let hi = same[same.len() - 1].max(different[different.len() - 1]).max(0.0);
    let margin = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    let (lo, hi) = (lo - margin, hi + margin);
    let step = (hi - lo) / (grid_points - 1) as f64;
    let mut grid: Vec<f64> = (0..grid_points).map(|i| lo + step * i as f64).collect();
    grid[grid_points - 1] = hi;
    if let Err(pos) = grid.binary_search_by(|x| x.total_cmp(&0.0)) {
        grid.insert(pos, 0.0);
    }
    Ok(TippettCurves {
        p_same_geq: grid.iter().map(|&x| proportion_geq(&same, x)).collect(),
        p_different_geq: grid.iter().map(|&x| proportion_geq(&different, x)).collect(),
        grid,
    })
}

// ─── Cross-validation ───────────────────────────────────────────────────────

/// Cross-validation regime.
///
/// `Loio` and `Ltio` run the same leakage-free pass: a same-source pair of
/// identity `i` is validated by a calibrator trained on pairs not involving
/// `i`, and a different-source pair `(i, j)` by one trained on pairs involving
/// neither `i` nor `j`. The two names are kept so reports record what was
/// requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum CvScheme {
    Loio,
    Ltio,
    Kfold { k: usize, seed: u64 },
}

impl fmt::Display for CvScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CvScheme::Loio => f.write_str("loio"),
            CvScheme::Ltio => f.write_str("ltio"),
            CvScheme::Kfold { k, seed } => write!(f, "kfold({k}, seed={seed})"),
        }
    }
}

/// Summary of one validated LR system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub strategy: Strategy,
    pub cv_scheme: CvScheme,
    pub lambda: f64,
    /// Cllr in bits.
    pub cllr: f64,
    pub n_same: usize,
    pub n_different: usize,
    pub n_folds: usize,
    pub lrs_same: Vec<f64>,
    pub lrs_different: Vec<f64>,
}

/// Where a pair was validated and the LR it received.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedPair {
    /// Index into the evaluated pair slice.
    pub pair: usize,
    pub fold: String,
    pub log10_lr: f64,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub report: EvaluationReport,
    /// One entry per input pair, in input order.
    pub validated: Vec<ValidatedPair>,
    /// Calibrator of every fold, keyed by fold label.
    pub calibrators: BTreeMap<String, Calibrator>,
}

/// Pair view used by the fold logic: identities and label only.
struct PairIdentity<'a> {
    reference: &'a str,
    trace: &'a str,
    score: f64,
    truth: GroundTruth,
}

fn check_pairs(pairs: &[ScoredPair]) -> Result<(Strategy, Vec<PairIdentity<'_>>), EvaluationError> {
    let first = pairs.first().ok_or(EvaluationError::NoPairs)?;
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.strategy != first.strategy {
            return Err(EvaluationError::MixedStrategies(first.strategy, p.strategy));
        }
        if p.reference_subject.is_empty() || p.trace_subject.is_empty() {
            return Err(EvaluationError::MissingIdentity {
                reference_id: p.reference_id.clone(),
                trace_group: p.trace_group.clone(),
            });
        }
        if GroundTruth::from_subjects(&p.reference_subject, &p.trace_subject) != p.ground_truth {
            return Err(EvaluationError::InconsistentLabel {
                reference_id: p.reference_id.clone(),
                trace_group: p.trace_group.clone(),
                label: p.ground_truth.as_str(),
            });
        }
        out.push(PairIdentity {
            reference: &p.reference_subject,
            trace: &p.trace_subject,
            score: p.score,
            truth: p.ground_truth,
        });
    }
    Ok((first.strategy, out))
}

/// A fold: the identities it withholds from training and the pairs it validates.
struct Fold<'a> {
    label: String,
    held_out: BTreeSet<&'a str>,
    validates: Vec<usize>,
}

fn leave_out_folds<'a>(pairs: &[PairIdentity<'a>]) -> Vec<Fold<'a>> {
    let mut folds: BTreeMap<(&'a str, &'a str), Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let key = if p.reference <= p.trace {
            (p.reference, p.trace)
        } else {
            (p.trace, p.reference)
        };
        folds.entry(key).or_default().push(i);
    }
    folds
        .into_iter()
        .map(|((a, b), validates)| Fold {
            label: if a == b { a.to_owned() } else { format!("{a}|{b}") },
            held_out: [a, b].into_iter().collect(),
            validates,
        })
        .collect()
}

fn kfold_folds<'a>(
    pairs: &[PairIdentity<'a>],
    identities: &BTreeSet<&'a str>,
    k: usize,
    seed: u64,
) -> Result<Vec<Fold<'a>>, EvaluationError> {
    if k < 2 || k > identities.len() {
        return Err(EvaluationError::InvalidFoldCount {
            k,
            identities: identities.len(),
        });
    }
    let mut order: Vec<&str> = identities.iter().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, &id)| (id, i % k)).collect();
    let mut folds: Vec<Fold<'a>> = (0..k)
        .map(|f| Fold {
            label: format!("fold{f}"),
            held_out: BTreeSet::new(),
            validates: Vec::new(),
        })
        .collect();
    for (&id, &f) in &fold_of {
        folds[f].held_out.insert(id);
    }
    for (i, p) in pairs.iter().enumerate() {
        folds[fold_of[p.trace]].validates.push(i);
    }
    Ok(folds)
}

/// Cross-validates a calibrated LR system over one strategy's scored pairs.
/// Every pair receives exactly one LR from a calibrator that never saw either
/// of its identities.
pub fn cross_validate(
    pairs: &[ScoredPair],
    scheme: CvScheme,
    lambda: f64,
) -> Result<CrossValidation, EvaluationError> {
    let (strategy, ids) = check_pairs(pairs)?;
    let identities: BTreeSet<&str> = ids.iter().flat_map(|p| [p.reference, p.trace]).collect();
    if identities.len() < 3 {
        return Err(EvaluationError::TooFewIdentities(identities.len()));
    }
    let folds = match scheme {
        CvScheme::Loio | CvScheme::Ltio => leave_out_folds(&ids),
        CvScheme::Kfold { k, seed } => kfold_folds(&ids, &identities, k, seed)?,
    };

    let fitted: Vec<Result<Calibrator, EvaluationError>> = folds
        .par_iter()
        .map(|fold| {
            let training: Vec<(f64, GroundTruth)> = ids
                .iter()
                .filter(|p| !fold.held_out.contains(p.reference) && !fold.held_out.contains(p.trace))
                .map(|p| (p.score, p.truth))
                .collect();
            calibration::fit(&training, lambda).map_err(|source| match source {
                CalibrationError::SingleClass { .. } => EvaluationError::SingleClassFold {
                    fold: fold.label.clone(),
                },
                source => EvaluationError::Calibration {
                    fold: fold.label.clone(),
                    source,
                },
            })
        })
        .collect();

    let mut validated: Vec<Option<ValidatedPair>> = vec![None; pairs.len()];
    let mut calibrators = BTreeMap::new();
    for (fold, cal) in folds.iter().zip(fitted) {
        let cal = cal?;
        for &i in &fold.validates {
            validated[i] = Some(ValidatedPair {
                pair: i,
                fold: fold.label.clone(),
                log10_lr: cal.apply(ids[i].score).expect("scores are finite").log10_lr,
            });
        }
        calibrators.insert(fold.label.clone(), cal);
    }
    let validated: Vec<ValidatedPair> = validated
        .into_iter()
        .map(|v| v.expect("every pair belongs to exactly one fold"))
        .collect();

    let (mut lrs_same, mut lrs_different) = (Vec::new(), Vec::new());
    for v in &validated {
        if ids[v.pair].truth.is_same_source() {
            lrs_same.push(v.log10_lr);
        } else {
            lrs_different.push(v.log10_lr);
        }
    }
    let report = EvaluationReport {
        strategy,
        cv_scheme: scheme,
        lambda,
        cllr: cllr(&lrs_same, &lrs_different)?,
        n_same: lrs_same.len(),
        n_different: lrs_different.len(),
        n_folds: folds.len(),
        lrs_same,
        lrs_different,
    };
    Ok(CrossValidation {
        report,
        validated,
        calibrators,
    })
}
