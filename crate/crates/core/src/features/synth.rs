use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::FrameSequence;
use crate::error::{Error, Result};

/// Generator settings for a corpus of Gaussian-process "speakers".
///
/// Every class owns a mean vector. Frames are that mean plus AR(1)
/// temporal noise whose parameters are shared across classes, plus an
/// optional per-utterance offset modelling session variability. With
/// `latent_dim` set, class means are drawn from a shared random
/// `dim x latent_dim` subspace, so held-out classes live in the same
/// subspace as training ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub utts_per_class: usize,
    pub dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub latent_dim: Option<usize>,
    pub class_spread: f64,
    pub ar_coeff: f64,
    pub noise_std: f64,
    pub session_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 8,
            utts_per_class: 20,
            dim: 64,
            min_len: 100,
            max_len: 300,
            latent_dim: None,
            class_spread: 1.0,
            ar_coeff: 0.5,
            noise_std: 1.0,
            session_std: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_classes < 2 {
            problems.push("n_classes must be at least 2".to_string());
        }
        if self.utts_per_class == 0 {
            problems.push("utts_per_class must be positive".into());
        }
        if self.dim == 0 {
            problems.push("dim must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            problems.push(format!(
                "length range [{}, {}] is empty",
                self.min_len, self.max_len
            ));
        }
        if !(0.0..1.0).contains(&self.ar_coeff.abs()) {
            problems.push("ar_coeff must lie in (-1, 1)".into());
        }
        if self.noise_std < 0.0 || self.session_std < 0.0 || self.class_spread < 0.0 {
            problems.push("standard deviations must be non-negative".into());
        }
        if self.latent_dim == Some(0) {
            problems.push("latent_dim must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Class means in generation order; exposed for tests of the generator.
pub(crate) fn class_means(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    match cfg.latent_dim {
        Some(k) => {
            let loading: Vec<f64> = (0..cfg.dim * k).map(|_| normal(rng) / (k as f64).sqrt()).collect();
            (0..cfg.n_classes)
                .map(|_| {
                    let z: Vec<f64> = (0..k).map(|_| normal(rng) * cfg.class_spread).collect();
                    (0..cfg.dim)
                        .map(|d| (0..k).map(|j| loading[d * k + j] * z[j]).sum())
                        .collect()
                })
                .collect()
        }
        None => (0..cfg.n_classes)
            .map(|_| (0..cfg.dim).map(|_| normal(rng) * cfg.class_spread).collect())
            .collect(),
    }
}

/// Generates `n_classes * utts_per_class` labelled utterances, grouped by
/// class. Identical configs give bit-identical corpora.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<FrameSequence>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = class_means(cfg, &mut rng);
    let innovation = (1.0 - cfg.ar_coeff * cfg.ar_coeff).sqrt() * cfg.noise_std;
    let mut corpus = Vec::with_capacity(cfg.n_classes * cfg.utts_per_class);
    for (class, mean) in means.iter().enumerate() {
        for u in 0..cfg.utts_per_class {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let session: Vec<f64> = (0..cfg.dim).map(|_| normal(&mut rng) * cfg.session_std).collect();
            let mut state: Vec<f64> = (0..cfg.dim).map(|_| normal(&mut rng) * cfg.noise_std).collect();
            let mut features = vec![0.0f32; cfg.dim * len];
            for t in 0..len {
                if t > 0 {
                    for z in state.iter_mut() {
                        *z = cfg.ar_coeff * *z + innovation * normal(&mut rng);
                    }
                }
                for d in 0..cfg.dim {
                    features[d * len + t] = (mean[d] + session[d] + state[d]) as f32;
                }
            }
            let seq = FrameSequence::new(cfg.dim, len, features)?
                .with_id(format!("c{class:03}_u{u:03}"))
                .with_label(class);
            corpus.push(seq);
        }
    }
    Ok(corpus)
}
