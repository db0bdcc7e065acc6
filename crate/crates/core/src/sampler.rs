//! Per-image minibatch phrase sampling: ground-truth subsampling plus
//! inverse frequency sampling over augmented phrases.

use crate::datamodel::{DatasetMode, GroundTruthDataset, Phrase};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// How the augmented tail of a batch is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugSampling {
    /// Weighted toward globally rare phrases.
    InverseFrequency,
    /// Uniform random subsample.
    Uniform,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    /// Budget for augmented phrases per image batch.
    pub budget: usize,
    /// Ground-truth phrases kept per image.
    pub gt_subsample: usize,
    pub strategy: AugSampling,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            budget: 30,
            gt_subsample: 5,
            strategy: AugSampling::InverseFrequency,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Per-mode defaults: ReferIt-like data subsamples two ground-truth
    /// phrases, others five.
    pub fn for_mode(mode: DatasetMode) -> Self {
        Self {
            gt_subsample: match mode {
                DatasetMode::ReferItLike => 2,
                _ => 5,
            },
            ..Self::default()
        }
    }
}

/// One phrase attached to an image, with its global likelihood (share of
/// all phrase-region pairs in the training set).
#[derive(Debug, Clone)]
pub struct ImagePhrase {
    pub phrase: Phrase,
    pub augmented: bool,
    pub likelihood: f64,
}

/// Inverse-frequency weights for one image's phrases.
///
/// The likelihoods are renormalized to sum to one, inverted as
/// `1 - p_i / sum(p)`, and renormalized again into a probability vector.
/// A single phrase gets weight 1. Likelihoods must be positive.
pub fn ifs_weights(likelihoods: &[f64]) -> Vec<f64> {
    assert!(
        likelihoods.iter().all(|&p| p > 0.0),
        "likelihoods must be positive"
    );
    let n = likelihoods.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![1.0];
    }
    let total: f64 = likelihoods.iter().sum();
    // sum of (1 - p_i/total) over i is exactly n - 1
    likelihoods
        .iter()
        .map(|&p| (1.0 - p / total) / (n as f64 - 1.0))
        .collect()
}

/// Weighted draw without replacement by cumulative inversion.
fn draw_without_replacement(
    items: &mut Vec<(Phrase, f64)>,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Phrase> {
    let mut out = Vec::new();
    while out.len() < budget && !items.is_empty() {
        let total: f64 = items.iter().map(|(_, w)| w).sum();
        let mut chosen = items.len() - 1;
        if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            for (i, (_, w)) in items.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
        } else {
            chosen = rng.random_range(0..items.len());
        }
        out.push(items.remove(chosen).0);
    }
    out
}

/// Build one image's phrase batch: all (or `gt_subsample`-limited)
/// ground-truth phrases, then augmented phrases drawn without replacement
/// until the budget is exhausted.
pub fn sample_image_batch(
    phrases: &[ImagePhrase],
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Phrase> {
    // Distinct ground-truth phrases in first-seen order.
    let mut gt: Vec<Phrase> = Vec::new();
    for p in phrases.iter().filter(|p| !p.augmented) {
        if !gt.contains(&p.phrase) {
            gt.push(p.phrase.clone());
        }
    }
    if gt.len() > config.gt_subsample {
        // uniform subsample without replacement
        let mut pool = gt;
        let mut picked = Vec::with_capacity(config.gt_subsample);
        for _ in 0..config.gt_subsample {
            let i = rng.random_range(0..pool.len());
            picked.push(pool.swap_remove(i));
        }
        gt = picked;
    }

    let mut batch = gt.clone();
    if config.budget == 0 {
        return batch;
    }
    let mut aug: Vec<(Phrase, f64)> = Vec::new();
    for p in phrases.iter().filter(|p| p.augmented) {
        if !batch.contains(&p.phrase) && !aug.iter().any(|(q, _)| *q == p.phrase) {
            aug.push((p.phrase.clone(), p.likelihood));
        }
    }
    if aug.is_empty() {
        return batch;
    }
    let weights = match config.strategy {
        AugSampling::InverseFrequency => {
            ifs_weights(&aug.iter().map(|(_, l)| *l).collect::<Vec<_>>())
        }
        AugSampling::Uniform => vec![1.0 / aug.len() as f64; aug.len()],
    };
    let mut weighted: Vec<(Phrase, f64)> = aug
        .into_iter()
        .zip(weights)
        .map(|((p, _), w)| (p, w))
        .collect();
    batch.extend(draw_without_replacement(&mut weighted, config.budget, rng));
    batch
}

/// Global phrase likelihoods: each phrase's share of all phrase-region
/// pairs in the dataset (augmented annotations included).
pub fn phrase_pair_likelihoods(dataset: &GroundTruthDataset) -> BTreeMap<Phrase, f64> {
    let mut counts: BTreeMap<Phrase, u64> = BTreeMap::new();
    let mut total = 0u64;
    for (_, _, ann) in dataset.annotations() {
        *counts.entry(ann.phrase.clone()).or_insert(0) += 1;
        total += 1;
    }
    counts
        .into_iter()
        .map(|(p, c)| (p, c as f64 / total.max(1) as f64))
        .collect()
}
