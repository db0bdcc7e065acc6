//! Two-branch embedding network trained with cross-modal and
//! within-modality triplet losses.
//!
//! Both branches project into a shared space through a stack of alignment
//! layers; embeddings are L2-normalized and compared by Euclidean
//! distance. The detection score is the negated distance so higher means
//! better, spanning `[-2, 0]` on unit vectors.

use super::branch::{accumulate, stack_backward, stack_forward, zero_grads, StackCache};
use crate::cca::{CcaError, SimilarityScore};
use crate::layers::{init_stack_from_cca, LinearAlignLayer};
use crate::nn::{l2_normalize, l2_normalize_backward};
use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbNetHead {
    pub region_stack: Vec<LinearAlignLayer>,
    pub phrase_stack: Vec<LinearAlignLayer>,
    pub margin: f64,
    pub w_rr: f64,
    pub w_pp: f64,
}

pub(crate) struct EmbedCache {
    pub stack: StackCache,
    pub unit: DVector<f64>,
    pub norm: f64,
}

impl EmbNetHead {
    /// CCA-initialize both branch stacks, lowest layer first.
    pub fn from_cca(
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        widths: &[usize],
        eps: f64,
        margin: f64,
        w_rr: f64,
        w_pp: f64,
    ) -> Result<Self, CcaError> {
        let (region_stack, phrase_stack) = init_stack_from_cca(x, y, widths, eps)?;
        Ok(Self {
            region_stack,
            phrase_stack,
            margin,
            w_rr,
            w_pp,
        })
    }

    pub fn random(
        region_dim: usize,
        phrase_dim: usize,
        widths: &[usize],
        rng: &mut ChaCha8Rng,
        margin: f64,
        w_rr: f64,
        w_pp: f64,
    ) -> Self {
        let mut region_stack = Vec::with_capacity(widths.len());
        let mut phrase_stack = Vec::with_capacity(widths.len());
        let (mut din_r, mut din_p) = (region_dim, phrase_dim);
        for &k in widths {
            region_stack.push(LinearAlignLayer::random(k, din_r, rng));
            phrase_stack.push(LinearAlignLayer::random(k, din_p, rng));
            din_r = k;
            din_p = k;
        }
        Self {
            region_stack,
            phrase_stack,
            margin,
            w_rr,
            w_pp,
        }
    }

    pub(crate) fn embed(&self, x: &DVector<f64>, region: bool) -> EmbedCache {
        if region {
            embed_with(&self.region_stack, x)
        } else {
            embed_with(&self.phrase_stack, x)
        }
    }

    /// L2-normalized region embedding; the flag marks a zero-norm output.
    pub fn embed_region(&self, x: &DVector<f64>) -> (DVector<f64>, bool) {
        let c = self.embed(x, true);
        (c.unit, c.norm == 0.0)
    }

    pub fn embed_phrase(&self, y: &DVector<f64>) -> (DVector<f64>, bool) {
        let c = self.embed(y, false);
        (c.unit, c.norm == 0.0)
    }

    /// Negated Euclidean distance between unit embeddings, in `[-2, 0]`.
    pub fn score(&self, region: &DVector<f64>, phrase: &DVector<f64>) -> SimilarityScore {
        let (er, dr) = self.embed_region(region);
        let (ep, dp) = self.embed_phrase(phrase);
        if dr || dp {
            return SimilarityScore::degenerate(-2.0);
        }
        SimilarityScore::ok(-(er - ep).norm())
    }
}

/// Score a region/phrase pair: `-d(embed(region), embed(phrase))`.
pub fn embnet_score(
    head: &EmbNetHead,
    region: &DVector<f64>,
    phrase: &DVector<f64>,
) -> SimilarityScore {
    head.score(region, phrase)
}

/// Triplet hinge value and gradients for unit-normalized inputs.
#[derive(Debug, Clone)]
pub struct TripletGrad {
    pub value: f64,
    pub grad_q: DVector<f64>,
    pub grad_p: DVector<f64>,
    pub grad_n: DVector<f64>,
}

/// `max(0, m + d(q, r_p) - d(q, r_n))` with exact (sub)gradients.
pub fn triplet_loss(
    q: &DVector<f64>,
    r_p: &DVector<f64>,
    r_n: &DVector<f64>,
    margin: f64,
) -> TripletGrad {
    let dp_vec = q - r_p;
    let dn_vec = q - r_n;
    let d_p = dp_vec.norm();
    let d_n = dn_vec.norm();
    let value = (margin + d_p - d_n).max(0.0);
    let dim = q.len();
    let mut grad_q = DVector::zeros(dim);
    let mut grad_p = DVector::zeros(dim);
    let mut grad_n = DVector::zeros(dim);
    if value > 0.0 {
        if d_p > 0.0 {
            let u = dp_vec / d_p;
            grad_q += &u;
            grad_p -= &u;
        }
        if d_n > 0.0 {
            let u = dn_vec / d_n;
            grad_q -= &u;
            grad_n += &u;
        }
    }
    TripletGrad {
        value,
        grad_q,
        grad_p,
        grad_n,
    }
}

/// One query phrase and the indices of its positive regions within the
/// batch's region list.
#[derive(Debug, Clone)]
pub struct TripletQuery {
    pub phrase: DVector<f64>,
    pub positives: Vec<usize>,
}

/// A per-image triplet batch: candidate regions plus queries referencing
/// them. Regions not listed as positives of a query are its negatives.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub regions: Vec<DVector<f64>>,
    pub queries: Vec<TripletQuery>,
}

#[derive(Debug, Clone)]
pub struct TripletBatchLoss {
    pub value: f64,
    /// Queries skipped because they had no positive or no negative region.
    pub skipped: usize,
}

/// Loss terms plus gradients on every embedding, shared by the loss and
/// training paths.
pub(crate) struct TripletTerms {
    pub value: f64,
    pub skipped: usize,
    pub grad_queries: Vec<DVector<f64>>,
    pub grad_regions: Vec<DVector<f64>>,
}

pub(crate) fn triplet_terms(
    query_embeds: &[DVector<f64>],
    region_embeds: &[DVector<f64>],
    positives: &[Vec<usize>],
    margin: f64,
    w_rr: f64,
    w_pp: f64,
) -> TripletTerms {
    let nq = query_embeds.len();
    let nr = region_embeds.len();
    let dim = if nq > 0 {
        query_embeds[0].len()
    } else if nr > 0 {
        region_embeds[0].len()
    } else {
        0
    };
    let mut grad_queries = vec![DVector::zeros(dim); nq];
    let mut grad_regions = vec![DVector::zeros(dim); nr];

    let is_positive: Vec<Vec<bool>> = positives
        .iter()
        .map(|pos| {
            let mut mask = vec![false; nr];
            for &p in pos {
                mask[p] = true;
            }
            mask
        })
        .collect();
    let negatives: Vec<Vec<usize>> = is_positive
        .iter()
        .map(|mask| (0..nr).filter(|&j| !mask[j]).collect())
        .collect();

    let mut skipped = 0;
    // Collected as (anchor, positive, negative, kind) over embeddings.
    enum Kind {
        Cross,
        RegionRegion,
        PhrasePhrase,
    }
    let mut cross: Vec<(usize, usize, usize)> = Vec::new();
    let mut rr: Vec<(usize, usize, usize)> = Vec::new();
    let mut pp: Vec<(usize, usize, usize)> = Vec::new();

    for (i, pos) in positives.iter().enumerate() {
        if pos.is_empty() || negatives[i].is_empty() {
            skipped += 1;
            continue;
        }
        for &p in pos {
            for &n in &negatives[i] {
                cross.push((i, p, n));
            }
        }
        if w_rr != 0.0 {
            for &a in pos {
                for &p in pos {
                    if p == a {
                        continue;
                    }
                    for &n in &negatives[i] {
                        rr.push((a, p, n));
                    }
                }
            }
        }
    }
    if w_pp != 0.0 {
        let share = |a: usize, b: usize| positives[a].iter().any(|p| is_positive[b][*p]);
        for i in 0..nq {
            for j in 0..nq {
                if j == i || !share(i, j) {
                    continue;
                }
                for k in 0..nq {
                    if k == i || share(i, k) {
                        continue;
                    }
                    pp.push((i, j, k));
                }
            }
        }
    }

    let mut value = 0.0;
    let mut apply = |triplets: &[(usize, usize, usize)], kind: Kind, weight: f64| {
        if triplets.is_empty() || weight == 0.0 {
            return;
        }
        let scale = weight / triplets.len() as f64;
        for &(a, p, n) in triplets {
            let (qa, qp, qn) = match kind {
                Kind::Cross => (&query_embeds[a], &region_embeds[p], &region_embeds[n]),
                Kind::RegionRegion => (&region_embeds[a], &region_embeds[p], &region_embeds[n]),
                Kind::PhrasePhrase => (&query_embeds[a], &query_embeds[p], &query_embeds[n]),
            };
            let t = triplet_loss(qa, qp, qn, margin);
            value += scale * t.value;
            match kind {
                Kind::Cross => {
                    grad_queries[a] += t.grad_q * scale;
                    grad_regions[p] += t.grad_p * scale;
                    grad_regions[n] += t.grad_n * scale;
                }
                Kind::RegionRegion => {
                    grad_regions[a] += t.grad_q * scale;
                    grad_regions[p] += t.grad_p * scale;
                    grad_regions[n] += t.grad_n * scale;
                }
                Kind::PhrasePhrase => {
                    grad_queries[a] += t.grad_q * scale;
                    grad_queries[p] += t.grad_p * scale;
                    grad_queries[n] += t.grad_n * scale;
                }
            }
        }
    };
    apply(&cross, Kind::Cross, 1.0);
    apply(&rr, Kind::RegionRegion, w_rr);
    apply(&pp, Kind::PhrasePhrase, w_pp);

    TripletTerms {
        value,
        skipped,
        grad_queries,
        grad_regions,
    }
}

/// Mean cross-modal triplet loss plus weighted within-modality terms over
/// one batch.
pub fn embnet_batch_loss(head: &EmbNetHead, batch: &TripletBatch) -> TripletBatchLoss {
    let (value, skipped, _, _) = batch_backward_with(
        &head.region_stack,
        &head.phrase_stack,
        head.margin,
        head.w_rr,
        head.w_pp,
        batch,
    );
    TripletBatchLoss { value, skipped }
}

pub(crate) fn embed_with(stack: &[LinearAlignLayer], x: &DVector<f64>) -> EmbedCache {
    let stack_cache = stack_forward(stack, x);
    let (unit, norm) = l2_normalize(&stack_cache.output);
    EmbedCache {
        stack: stack_cache,
        unit,
        norm,
    }
}

/// Triplet batch loss and parameter gradients over a pair of alignment
/// stacks (any depth). Returns
/// `(loss, skipped, region_stack_grads, phrase_stack_grads)`.
#[allow(clippy::type_complexity)]
pub(crate) fn batch_backward_with(
    region_stack: &[LinearAlignLayer],
    phrase_stack: &[LinearAlignLayer],
    margin: f64,
    w_rr: f64,
    w_pp: f64,
    batch: &TripletBatch,
) -> (
    f64,
    usize,
    Vec<(DMatrix<f64>, DVector<f64>)>,
    Vec<(DMatrix<f64>, DVector<f64>)>,
) {
    let query_caches: Vec<EmbedCache> = batch
        .queries
        .iter()
        .map(|q| embed_with(phrase_stack, &q.phrase))
        .collect();
    let region_caches: Vec<EmbedCache> = batch
        .regions
        .iter()
        .map(|r| embed_with(region_stack, r))
        .collect();
    let query_embeds: Vec<DVector<f64>> = query_caches.iter().map(|c| c.unit.clone()).collect();
    let region_embeds: Vec<DVector<f64>> = region_caches.iter().map(|c| c.unit.clone()).collect();
    let positives: Vec<Vec<usize>> = batch.queries.iter().map(|q| q.positives.clone()).collect();
    let terms = triplet_terms(
        &query_embeds,
        &region_embeds,
        &positives,
        margin,
        w_rr,
        w_pp,
    );
    let mut region_grads = zero_grads(region_stack);
    let mut phrase_grads = zero_grads(phrase_stack);
    for (cache, grad_unit) in query_caches.iter().zip(&terms.grad_queries) {
        let grad_pre = l2_normalize_backward(&cache.unit, cache.norm, grad_unit);
        let (grads, _) = stack_backward(phrase_stack, &cache.stack, &grad_pre);
        accumulate(&mut phrase_grads, &grads);
    }
    for (cache, grad_unit) in region_caches.iter().zip(&terms.grad_regions) {
        let grad_pre = l2_normalize_backward(&cache.unit, cache.norm, grad_unit);
        let (grads, _) = stack_backward(region_stack, &cache.stack, &grad_pre);
        accumulate(&mut region_grads, &grads);
    }
    (terms.value, terms.skipped, region_grads, phrase_grads)
}

/// Batch loss plus parameter gradients over the head's stacks.
#[allow(clippy::type_complexity)]
pub(crate) fn embnet_batch_backward(
    head: &EmbNetHead,
    batch: &TripletBatch,
) -> (
    f64,
    usize,
    Vec<(DMatrix<f64>, DVector<f64>)>,
    Vec<(DMatrix<f64>, DVector<f64>)>,
) {
    batch_backward_with(
        &head.region_stack,
        &head.phrase_stack,
        head.margin,
        head.w_rr,
        head.w_pp,
        batch,
    )
}
