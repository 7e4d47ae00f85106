//! Seeded synthetic embedding sets with quality-dependent noise.
//!
//! Each identity gets a mean direction drawn uniformly on the unit sphere.
//! The reference is `mean + noise_at_q1·g`; every trace draws a quality
//! `q ~ U[0, 1]` and is `mean + σ(q)·g` with
//! `σ(q) = noise_at_q0 + q·(noise_at_q1 − noise_at_q0)`, where `g` has
//! independent standard normal components. All vectors are unit-normalized.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{Embedding, EmbeddingStore, Role};

pub const DATASET_ID: &str = "synth";
/// Spacing between consecutive trace captures of one identity.
pub const TRACE_INTERVAL_SECONDS: i64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub n_identities: usize,
    pub traces_per_identity: usize,
    /// Noise scale at quality 1 (near, sharp captures).
    pub noise_at_q1: f64,
    /// Noise scale at quality 0 (far, degraded captures).
    pub noise_at_q0: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            n_identities: 200,
            traces_per_identity: 10,
            noise_at_q1: 0.2,
            noise_at_q0: 1.2,
            seed: 42,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("dim, identities and traces per identity must all be positive")]
    EmptyShape,
    #[error("noise scales must satisfy noise_at_q0 ({q0}) >= noise_at_q1 ({q1}) >= 0")]
    NoiseOrder { q0: f64, q1: f64 },
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.dim == 0 || self.n_identities == 0 || self.traces_per_identity == 0 {
            return Err(SyntheticError::EmptyShape);
        }
        let (q0, q1) = (self.noise_at_q0, self.noise_at_q1);
        if !(q1.is_finite() && q0.is_finite() && q1 >= 0.0 && q0 >= q1) {
            return Err(SyntheticError::NoiseOrder { q0, q1 });
        }
        Ok(())
    }

    /// Noise scale for a capture of quality `q`.
    pub fn noise_scale(&self, q: f64) -> f64 {
        self.noise_at_q0 + q * (self.noise_at_q1 - self.noise_at_q0)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = crate::store::l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn noisy(rng: &mut ChaCha8Rng, mean: &[f64], sigma: f64) -> Vec<f64> {
    let noise = gaussian(rng, mean.len());
    normalized(mean.iter().zip(noise).map(|(m, g)| m + sigma * g).collect())
}

fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("valid date")
}

/// Generates the store. Identical configs give bitwise-identical stores.
pub fn generate(config: &SyntheticConfig) -> Result<EmbeddingStore, SyntheticError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = config.n_identities.to_string().len().max(4);
    let mut embeddings = Vec::with_capacity(config.n_identities * (config.traces_per_identity + 1));
    for id in 0..config.n_identities {
        let subject = format!("id{id:0width$}");
        let mean = normalized(gaussian(&mut rng, config.dim));
        // Each identity is captured on its own day.
        let start = epoch() + Duration::days(id as i64);
        embeddings.push(Embedding {
            dataset_id: DATASET_ID.into(),
            subject_id: subject.clone(),
            image_id: format!("{subject}_ref"),
            role: Role::Reference,
            vector: noisy(&mut rng, &mean, config.noise_at_q1),
            quality_serfiq: Some(1.0),
            quality_cs: Some(0.0),
            capture_time: None,
        });
        for t in 0..config.traces_per_identity {
            let q: f64 = rng.gen();
            embeddings.push(Embedding {
                dataset_id: DATASET_ID.into(),
                subject_id: subject.clone(),
                image_id: format!("{subject}_t{t:03}"),
                role: Role::Trace,
                vector: noisy(&mut rng, &mean, config.noise_scale(q)),
                quality_serfiq: Some(q),
                quality_cs: Some(1.0 - q),
                capture_time: Some(start + Duration::seconds(TRACE_INTERVAL_SECONDS * t as i64)),
            });
        }
    }
    Ok(EmbeddingStore::from_embeddings(embeddings, Some(config.dim)).expect("generated vectors are valid"))
}
