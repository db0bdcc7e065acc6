//! Query-adaptive classifier head: the linear classifier for a phrase is
//! generated from the phrase's feature vector as `w_c = Wc v`, with an
//! optional scalar bias produced by one extra generator row.

use crate::nn::sigmoid;
use crate::quantize_matrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct QaHead {
    /// Generator. With `region_dim + 1` rows the last generated entry is
    /// a bias; with exactly `region_dim` rows the classifier is bias-free.
    wc: DMatrix<f64>,
    /// Generated classifiers keyed by phrase feature id, primed before
    /// scoring sweeps so the model stays immutable while scoring.
    cache: BTreeMap<String, DVector<f64>>,
}

impl QaHead {
    pub fn new(wc: DMatrix<f64>) -> Self {
        let mut wc = wc;
        quantize_matrix(&mut wc);
        Self {
            wc,
            cache: BTreeMap::new(),
        }
    }

    /// Random generator with a bias row.
    pub fn random(region_dim: usize, phrase_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (1.0 / phrase_dim as f64).sqrt();
        let wc = DMatrix::from_fn(region_dim + 1, phrase_dim, |_, _| {
            (rng.random::<f64>() * 2.0 - 1.0) * scale
        });
        Self::new(wc)
    }

    pub fn wc(&self) -> &DMatrix<f64> {
        &self.wc
    }

    pub(crate) fn wc_mut(&mut self) -> &mut DMatrix<f64> {
        self.cache.clear();
        &mut self.wc
    }

    /// Generate the classifier for a phrase vector: exactly `Wc v`.
    pub fn generate(&self, phrase: &DVector<f64>) -> DVector<f64> {
        &self.wc * phrase
    }

    /// Pre-generate and store the classifier for a phrase id.
    pub fn prime_cache(&mut self, feature_id: impl Into<String>, phrase: &DVector<f64>) {
        let w = self.generate(phrase);
        self.cache.insert(feature_id.into(), w);
    }

    pub fn cached(&self, feature_id: &str) -> Option<&DVector<f64>> {
        self.cache.get(feature_id)
    }

    fn apply(classifier: &DVector<f64>, region: &DVector<f64>) -> f64 {
        if classifier.len() == region.len() + 1 {
            classifier.rows(0, region.len()).dot(region) + classifier[region.len()]
        } else {
            assert_eq!(classifier.len(), region.len(), "classifier/region dims");
            classifier.dot(region)
        }
    }

    /// `(Wc v)^T region (+ generated bias)`.
    pub fn score(&self, phrase: &DVector<f64>, region: &DVector<f64>) -> f64 {
        Self::apply(&self.generate(phrase), region)
    }

    /// Score through the primed cache; falls back to generating on miss.
    pub fn score_cached(
        &self,
        feature_id: &str,
        phrase: &DVector<f64>,
        region: &DVector<f64>,
    ) -> f64 {
        match self.cache.get(feature_id) {
            Some(w) => Self::apply(w, region),
            None => self.score(phrase, region),
        }
    }
}

/// Generate a classifier from the phrase vector and score one region.
pub fn qa_generate_and_score(head: &QaHead, phrase: &DVector<f64>, region: &DVector<f64>) -> f64 {
    head.score(phrase, region)
}

#[derive(Debug, Clone)]
pub struct QaLoss {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

/// Mean sigmoid cross-entropy over (region, phrase) pair logits with
/// labels in `{0, 1}`.
pub fn qa_loss(logits: &[f64], labels: &[f64]) -> QaLoss {
    assert_eq!(logits.len(), labels.len());
    assert!(
        labels.iter().all(|l| *l == 0.0 || *l == 1.0),
        "labels must be 0 or 1"
    );
    let n = logits.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad_logits = Vec::with_capacity(logits.len());
    for (&c, &y) in logits.iter().zip(labels) {
        // softplus(c) - y*c == -[y ln s(c) + (1-y) ln(1 - s(c))]
        value += c.max(0.0) - c * y + (-c.abs()).exp().ln_1p();
        grad_logits.push((sigmoid(c) - y) / n);
    }
    QaLoss {
        value: value / n,
        grad_logits,
    }
}

/// Mean BCE over labeled pairs with the gradient on the generator.
pub(crate) fn qa_batch_backward(
    head: &QaHead,
    pairs: &[(DVector<f64>, DVector<f64>, f64)],
) -> (f64, DMatrix<f64>) {
    let mut grad_wc = DMatrix::zeros(head.wc.nrows(), head.wc.ncols());
    let logits: Vec<f64> = pairs
        .iter()
        .map(|(region, phrase, _)| head.score(phrase, region))
        .collect();
    let labels: Vec<f64> = pairs.iter().map(|(_, _, l)| *l).collect();
    let loss = qa_loss(&logits, &labels);
    let with_bias = head.wc.nrows() == pairs
        .first()
        .map(|(r, _, _)| r.len() + 1)
        .unwrap_or(head.wc.nrows());
    for ((region, phrase, _), &dlogit) in pairs.iter().zip(&loss.grad_logits) {
        // logit = [region; 1]^T Wc v, so d logit / d Wc = [region; 1] v^T
        let aug = if with_bias {
            let mut a = DVector::zeros(region.len() + 1);
            a.rows_mut(0, region.len()).copy_from(region);
            a[region.len()] = 1.0;
            a
        } else {
            region.clone()
        };
        grad_wc += dlogit * aug * phrase.transpose();
    }
    (loss.value, grad_wc)
}
