//! Score-to-LR calibration with L2-penalized logistic regression.
//!
//! The fitted model is `logit P(same | s) = slope·s + intercept`. Subtracting
//! the training prior log-odds `ln(N_same / N_different)` turns the posterior
//! log-odds into a log likelihood ratio:
//!
//! ```text
//! ln LR(s) = slope·s + intercept − prior_log_odds
//! ```
//!
//! The objective is the summed Bernoulli log-likelihood minus
//! `(lambda / 2)·slope²`; the intercept is not penalized. For `lambda > 0` the
//! objective is strictly concave and the damped Newton iteration below finds
//! its unique maximizer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::GroundTruth;

/// Default L2 penalty on the slope.
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Gradient-norm convergence threshold.
pub const GRADIENT_TOLERANCE: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 200;
/// Slope magnitude treated as divergence in the unpenalized case.
const DIVERGENCE_SLOPE: f64 = 1e8;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("calibration needs both classes: {same} same-source and {different} different-source scores")]
    SingleClass { same: usize, different: usize },
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("regularization strength {0} must be finite and non-negative")]
    InvalidLambda(f64),
    #[error("classes are separable and lambda = 0: the maximum-likelihood slope is infinite")]
    Divergent,
    #[error("no convergence after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NotConverged { iterations: usize, gradient_norm: f64 },
}

/// Fitted affine log-LR map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub slope: f64,
    pub intercept: f64,
    pub prior_log_odds: f64,
    pub lambda: f64,
}

/// A likelihood ratio, stored as its base-10 logarithm.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LikelihoodRatio {
    pub log10_lr: f64,
}

impl LikelihoodRatio {
    pub fn from_ln(ln_lr: f64) -> Self {
        Self {
            log10_lr: ln_lr / std::f64::consts::LN_10,
        }
    }

    pub fn ln(self) -> f64 {
        self.log10_lr * std::f64::consts::LN_10
    }

    pub fn value(self) -> f64 {
        10f64.powf(self.log10_lr)
    }
}

impl Calibrator {
    /// Neutral calibrator: LR = 1 for every score.
    pub fn neutral() -> Self {
        Self {
            slope: 0.0,
            intercept: 0.0,
            prior_log_odds: 0.0,
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn ln_lr(&self, score: f64) -> f64 {
        self.slope * score + (self.intercept - self.prior_log_odds)
    }

    pub fn apply(&self, score: f64) -> Result<LikelihoodRatio, CalibrationError> {
        if !score.is_finite() {
            return Err(CalibrationError::NonFinite(score));
        }
        Ok(LikelihoodRatio::from_ln(self.ln_lr(score)))
    }
}

/// Convergence details of a fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitInfo {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub objective: f64,
}

pub fn fit(samples: &[(f64, GroundTruth)], lambda: f64) -> Result<Calibrator, CalibrationError> {
    fit_with_info(samples, lambda).map(|(c, _)| c)
}

/// Softplus `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    samples: &'a [(f64, GroundTruth)],
    lambda: f64,
}

impl Problem<'_> {
    fn objective(&self, slope: f64, intercept: f64) -> f64 {
        let ll: f64 = self
            .samples
            .iter()
            .map(|&(s, y)| {
                let z = slope * s + intercept;
                if y.is_same_source() {
                    -softplus(-z)
                } else {
                    -softplus(z)
                }
            })
            .sum();
        ll - 0.5 * self.lambda * slope * slope
    }

    /// Gradient and the negated (positive semi-definite) Hessian.
    fn derivatives(&self, slope: f64, intercept: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let (mut ga, mut gb) = (0.0, 0.0);
        let (mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0);
        for &(s, y) in self.samples {
            let p = sigmoid(slope * s + intercept);
            let r = if y.is_same_source() { 1.0 - p } else { -p };
            ga += r * s;
            gb += r;
            let w = p * (1.0 - p);
            haa += w * s * s;
            hab += w * s;
            hbb += w;
        }
        ga -= self.lambda * slope;
        haa += self.lambda;
        ([ga, gb], [[haa, hab], [hab, hbb]])
    }
}

fn norm2(g: [f64; 2]) -> f64 {
    g[0].hypot(g[1])
}

/// Fits a calibrator and reports how the optimizer converged.
pub fn fit_with_info(
    samples: &[(f64, GroundTruth)],
    lambda: f64,
) -> Result<(Calibrator, FitInfo), CalibrationError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(CalibrationError::InvalidLambda(lambda));
    }
    let mut same = 0usize;
    let (mut min_same, mut max_same) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_diff, mut max_diff) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(s, y) in samples {
        if !s.is_finite() {
            return Err(CalibrationError::NonFinite(s));
        }
        if y.is_same_source() {
            same += 1;
            min_same = min_same.min(s);
            max_same = max_same.max(s);
        } else {
            min_diff = min_diff.min(s);
            max_diff = max_diff.max(s);
        }
    }
    let different = samples.len() - same;
    if same == 0 || different == 0 {
        return Err(CalibrationError::SingleClass { same, different });
    }
    // Without a penalty, (quasi-)complete separation sends the slope to ±∞.
    if lambda == 0.0 && (max_diff <= min_same || max_same <= min_diff) {
        return Err(CalibrationError::Divergent);
    }

    let prior_log_odds = (same as f64 / different as f64).ln();
    let problem = Problem { samples, lambda };
    // At slope 0 the optimal intercept is the prior log-odds.
    let (mut slope, mut intercept) = (0.0, prior_log_odds);
    let mut objective = problem.objective(slope, intercept);

    for iteration in 0..=MAX_ITERATIONS {
        let (g, h) = problem.derivatives(slope, intercept);
        let gradient_norm = norm2(g);
        if gradient_norm < GRADIENT_TOLERANCE {
            let cal = Calibrator {
                slope,
                intercept,
                prior_log_odds,
                lambda,
            };
            return Ok((
                cal,
                FitInfo {
                    iterations: iteration,
                    gradient_norm,
                    objective,
                },
            ));
        }
        if iteration == MAX_ITERATIONS {
            return Err(CalibrationError::NotConverged {
                iterations: iteration,
                gradient_norm,
            });
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
        let step = if det > 0.0 && det.is_finite() {
            [
                (h[1][1] * g[0] - h[0][1] * g[1]) / det,
                (h[0][0] * g[1] - h[0][1] * g[0]) / det,
            ]
        } else {
            // Singular curvature (saturated probabilities): plain gradient ascent.
            g
        };
        // Backtracking with the Armijo condition.
        let slope_ascent = g[0] * step[0] + g[1] * step[1];
        if slope_ascent <= 1e-12 * (1.0 + objective.abs()) {
            // Predicted gain is below the objective's rounding noise: the
            // quadratic model is exact enough, take the full Newton step.
            slope += step[0];
            intercept += step[1];
            objective = problem.objective(slope, intercept);
            continue;
        }
        let mut t = 1.0;
        loop {
            let (a, b) = (slope + t * step[0], intercept + t * step[1]);
            let candidate = problem.objective(a, b);
            if candidate >= objective + 1e-4 * t * slope_ascent {
                slope = a;
                intercept = b;
                objective = candidate;
                break;
            }
            t *= 0.5;
            if t < 1e-16 {
                return Err(CalibrationError::NotConverged {
                    iterations: iteration,
                    gradient_norm,
                });
            }
        }
        if slope.abs() > DIVERGENCE_SLOPE {
            return Err(CalibrationError::Divergent);
        }
    }
    unreachable!("loop returns on its last iteration")
}
