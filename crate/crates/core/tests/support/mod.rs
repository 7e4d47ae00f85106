//! Test-only oracles, independent of the library's optimizers.

#![allow(dead_code)]

use facelr::GroundTruth;

/// The 200-point score set used by the calibration oracle checks: 100
/// same-source and 100 different-source scores from fixed trigonometric
/// sequences, overlapping so the unpenalized optimum is finite.
pub fn oracle_scores() -> Vec<(f64, GroundTruth)> {
    let mut v = Vec::with_capacity(200);
    for i in 0..100 {
        let i = i as f64;
        v.push((0.30 + 0.25 * (1.3 * i + 0.2).sin() + 0.1 * (0.17 * i * i).cos(), GroundTruth::SameSource));
    }
    for i in 0..100 {
        let i = i as f64;
        v.push((-0.05 + 0.25 * (0.7 * i + 1.1).sin() + 0.1 * (0.23 * i * i + 0.5).cos(), GroundTruth::DifferentSource));
    }
    v
}

/// Maximizer of the penalized likelihood for `oracle_scores` at lambda = 1,
/// frozen from an external solver run.
pub const FROZEN_SLOPE: f64 = 4.64894833423897;
pub const FROZEN_INTERCEPT: f64 = -0.6252407722682654;

/// Summed Bernoulli log-likelihood minus `(lambda/2)·slope²`, written directly
/// from the definition.
pub fn penalized_log_likelihood(samples: &[(f64, GroundTruth)], slope: f64, intercept: f64, lambda: f64) -> f64 {
    let mut total = 0.0;
    for &(s, y) in samples {
        let z = slope * s + intercept;
        // ln σ(z) = −ln(1 + e^{−z}), ln(1 − σ(z)) = −ln(1 + e^{z})
        let t = if y == GroundTruth::SameSource { -z } else { z };
        total -= if t > 30.0 { t + (-t).exp() } else { t.exp().ln_1p() };
    }
    total - 0.5 * lambda * slope * slope
}

/// Brute-force maximizer: a coarse grid over (slope, intercept) followed by
/// compass search, halving the step until it falls below `1e-11`. Uses
/// objective values only.
pub fn grid_oracle(samples: &[(f64, GroundTruth)], lambda: f64) -> (f64, f64) {
    let f = |a: f64, b: f64| penalized_log_likelihood(samples, a, b, lambda);
    let (mut best_a, mut best_b, mut best) = (0.0, 0.0, f64::NEG_INFINITY);
    for i in -100..=100 {
        for j in -80..=80 {
            let (a, b) = (i as f64 * 0.25, j as f64 * 0.0625);
            let v = f(a, b);
            if v > best {
                (best_a, best_b, best) = (a, b, v);
            }
        }
    }
    let mut step = 0.25;
    while step > 1e-11 {
        let mut improved = false;
        for (da, db) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step), (step, step), (-step, -step), (step, -step), (-step, step)] {
            let v = f(best_a + da, best_b + db);
            if v > best {
                (best_a, best_b, best) = (best_a + da, best_b + db, v);
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (best_a, best_b)
}

/// Stopwatch that reports elapsed seconds.
pub struct Timer(std::time::Instant);

impl Timer {
    pub fn start() -> Self {
        Self(std::time::Instant::now())
    }

    pub fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
