//! Evaluation: IoU, localization accuracy, detection mAP with frequency
//! buckets, the proposal upper bound, and image-sentence retrieval
//! recalls.
//!
//! Localization scores each known (image, phrase) pair by its top-1 box
//! and reports the instance-weighted overall. Detection ranks candidates
//! for every phrase across the whole test set, computes exact
//! area-under-PR average precision per phrase, and reports the mean of
//! the three bucket mAPs as the overall.

use crate::datamodel::{
    bucket_of, BoundingBox, FrequencyBucket, GroundTruthDataset, Phrase,
};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("feature id {0:?} missing from the store")]
    MissingFeature(String),
    #[error("phrase {phrase:?} has {count} candidates in image {image:?}, max {max}")]
    TooManyCandidates {
        phrase: String,
        image: String,
        count: usize,
        max: usize,
    },
    #[error("candidate score for phrase {0:?} is not finite")]
    NonFiniteScore(String),
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let iy = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Top-1 predicted box for a known (image, phrase) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocPrediction {
    pub image_id: String,
    pub phrase: Phrase,
    pub bounds: BoundingBox,
}

/// One scored detection candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub phrase: Phrase,
    pub image_id: String,
    pub region_index: u32,
    pub bounds: BoundingBox,
    pub score: f64,
}

/// How the `overall` column is aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverallKind {
    /// Fraction over all test instances (localization tables).
    InstanceWeighted,
    /// Arithmetic mean of the three bucket values (detection tables).
    BucketMean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub zero_shot: usize,
    pub few_shot: usize,
    pub common: usize,
}

impl BucketCounts {
    fn slot(&mut self, bucket: FrequencyBucket) -> &mut usize {
        match bucket {
            FrequencyBucket::ZeroShot => &mut self.zero_shot,
            FrequencyBucket::FewShot => &mut self.few_shot,
            FrequencyBucket::Common => &mut self.common,
        }
    }
}

/// Per-bucket metric values plus the overall, as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub zero_shot: Option<f64>,
    pub few_shot: Option<f64>,
    pub common: Option<f64>,
    pub overall: f64,
    pub overall_kind: OverallKind,
    /// Evaluated phrases (detection) or instances (localization) per bucket.
    pub bucket_counts: BucketCounts,
    /// Total evaluated instances.
    pub instances: usize,
    /// Missing predictions or other recoverable oddities.
    pub warnings: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_phrase: Option<BTreeMap<String, f64>>,
}

impl EvalReport {
    pub fn bucket_value(&self, bucket: FrequencyBucket) -> Option<f64> {
        match bucket {
            FrequencyBucket::ZeroShot => self.zero_shot,
            FrequencyBucket::FewShot => self.few_shot,
            FrequencyBucket::Common => self.common,
        }
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let cell = |v: Option<f64>| match v {
            Some(x) => format!("{:>9.2}", x * 100.0),
            None => format!("{:>9}", "--"),
        };
        writeln!(
            f,
            "{:<28} {:>9} {:>9} {:>9} {:>9}",
            "metric", "zero-shot", "few-shot", "common", "overall"
        )?;
        write!(
            f,
            "{:<28} {} {} {} {:>9.2}",
            self.metric,
            cell(self.zero_shot),
            cell(self.few_shot),
            cell(self.common),
            self.overall * 100.0
        )
    }
}

/// Ground-truth boxes per (image, phrase) pair.
fn gt_pairs(
    gt: &GroundTruthDataset,
    include_augmented: bool,
) -> BTreeMap<(String, Phrase), Vec<BoundingBox>> {
    let mut map: BTreeMap<(String, Phrase), Vec<BoundingBox>> = BTreeMap::new();
    for (image_id, bounds, ann) in gt.annotations() {
        if ann.augmented && !include_augmented {
            continue;
        }
        map.entry((image_id.to_owned(), ann.phrase.clone()))
            .or_default()
            .push(*bounds);
    }
    map
}

fn bucket_for(counts: &BTreeMap<Phrase, u64>, phrase: &Phrase) -> FrequencyBucket {
    bucket_of(counts.get(phrase).copied().unwrap_or(0))
}

/// Localization accuracy: a pair is localized if its predicted box has
/// IoU >= 0.5 with one of its ground-truth boxes. The overall column is
/// instance-weighted; missing predictions count as failures.
pub fn localization_accuracy(
    predictions: &[LocPrediction],
    gt: &GroundTruthDataset,
    train_counts: &BTreeMap<Phrase, u64>,
    include_augmented: bool,
) -> EvalReport {
    // first prediction wins for a duplicated pair
    let mut by_pair: BTreeMap<(String, Phrase), BoundingBox> = BTreeMap::new();
    for p in predictions {
        by_pair
            .entry((p.image_id.clone(), p.phrase.clone()))
            .or_insert(p.bounds);
    }
    let pairs = gt_pairs(gt, include_augmented);
    let mut hits = BucketCounts::default();
    let mut totals = BucketCounts::default();
    let mut warnings = 0usize;
    let mut hit_sum = 0usize;
    for ((image_id, phrase), boxes) in &pairs {
        let bucket = bucket_for(train_counts, phrase);
        *totals.slot(bucket) += 1;
        match by_pair.get(&(image_id.clone(), phrase.clone())) {
            Some(pred) => {
                if boxes.iter().any(|b| iou(pred, b) >= 0.5) {
                    *hits.slot(bucket) += 1;
                    hit_sum += 1;
                }
            }
            None => warnings += 1,
        }
    }
    let frac = |h: usize, t: usize| (t > 0).then(|| h as f64 / t as f64);
    let instances = pairs.len();
    EvalReport {
        metric: "localization accuracy".into(),
        zero_shot: frac(hits.zero_shot, totals.zero_shot),
        few_shot: frac(hits.few_shot, totals.few_shot),
        common: frac(hits.common, totals.common),
        overall: if instances > 0 {
            hit_sum as f64 / instances as f64
        } else {
            0.0
        },
        overall_kind: OverallKind::InstanceWeighted,
        bucket_counts: totals,
        instances,
        warnings,
        per_phrase: None,
    }
}

#[derive(Debug, Clone)]
pub struct DetectionOptions {
    /// Candidates allowed per phrase per image (1 in the main protocol).
    pub max_per_image: usize,
    /// Treat augmented test annotations as valid matches.
    pub include_augmented: bool,
    /// Attach the per-phrase AP table to the report.
    pub keep_per_phrase: bool,
}

impl Default for DetectionOptions {
    fn default() -> Self {
        Self {
            max_per_image: 1,
            include_augmented: false,
            keep_per_phrase: false,
        }
    }
}

struct PhraseEval {
    ap: f64,
    instances: usize,
}

/// Rank one phrase's candidates across images, greedily match against
/// unmatched ground truth (score order, ties by image id then region
/// index), and integrate the exact area under the PR step curve.
fn phrase_average_precision(
    candidates: &mut Vec<&ScoredPrediction>,
    gt_boxes: &BTreeMap<&str, Vec<BoundingBox>>,
    n_pos: usize,
) -> f64 {
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then_with(|| a.region_index.cmp(&b.region_index))
    });
    let mut matched: BTreeMap<&str, Vec<bool>> = gt_boxes
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, cand) in candidates.iter().enumerate() {
        let mut hit = false;
        if let Some(boxes) = gt_boxes.get(cand.image_id.as_str()) {
            let taken = matched.get_mut(cand.image_id.as_str()).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (gi, gbox) in boxes.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let overlap = iou(&cand.bounds, gbox);
                if overlap >= 0.5 && best.map(|(_, b)| overlap > b).unwrap_or(true) {
                    best = Some((gi, overlap));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
                hit = true;
            }
        }
        if hit {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    ap / n_pos as f64
}

/// Detection mAP over every phrase with at least one test instance.
///
/// Bucket mAPs are means over the bucket's phrases; the overall is the
/// mean of the non-empty bucket mAPs.
pub fn detection_map(
    candidates: &[ScoredPrediction],
    gt: &GroundTruthDataset,
    train_counts: &BTreeMap<Phrase, u64>,
    options: &DetectionOptions,
) -> Result<EvalReport, EvalError> {
    for c in candidates {
        if !c.score.is_finite() {
            return Err(EvalError::NonFiniteScore(c.phrase.text()));
        }
    }
    // candidate count guard per (phrase, image)
    let mut per_pair: BTreeMap<(&Phrase, &str), usize> = BTreeMap::new();
    for c in candidates {
        let n = per_pair.entry((&c.phrase, c.image_id.as_str())).or_insert(0);
        *n += 1;
        if *n > options.max_per_image {
            return Err(EvalError::TooManyCandidates {
                phrase: c.phrase.text(),
                image: c.image_id.clone(),
                count: *n,
                max: options.max_per_image,
            });
        }
    }

    // phrase -> image -> gt boxes
    let mut gt_by_phrase: BTreeMap<&Phrase, BTreeMap<&str, Vec<BoundingBox>>> = BTreeMap::new();
    for image in &gt.images {
        for region in &image.regions {
            for ann in &region.phrases {
                if ann.augmented && !options.include_augmented {
                    continue;
                }
                gt_by_phrase
                    .entry(&ann.phrase)
                    .or_default()
                    .entry(image.image_id.as_str())
                    .or_default()
                    .push(region.bounds);
            }
        }
    }

    let mut cands_by_phrase: BTreeMap<&Phrase, Vec<&ScoredPrediction>> = BTreeMap::new();
    for c in candidates {
        cands_by_phrase.entry(&c.phrase).or_default().push(c);
    }

    let evaluated: Vec<(&Phrase, PhraseEval)> = gt_by_phrase
        .par_iter()
        .map(|(phrase, images)| {
            let n_pos: usize = images.values().map(Vec::len).sum();
            let mut cands = cands_by_phrase.get(phrase).cloned().unwrap_or_default();
            let ap = phrase_average_precision(&mut cands, images, n_pos);
            (
                *phrase,
                PhraseEval {
                    ap,
                    instances: n_pos,
                },
            )
        })
        .collect();

    let mut sums = [0.0f64; 3];
    let mut counts = BucketCounts::default();
    let mut instances = 0usize;
    let mut per_phrase = BTreeMap::new();
    for (phrase, eval) in &evaluated {
        let bucket = bucket_for(train_counts, phrase);
        let idx = match bucket {
            FrequencyBucket::ZeroShot => 0,
            FrequencyBucket::FewShot => 1,
            FrequencyBucket::Common => 2,
        };
        sums[idx] += eval.ap;
        *counts.slot(bucket) += 1;
        instances += eval.instances;
        if options.keep_per_phrase {
            per_phrase.insert(phrase.text(), eval.ap);
        }
    }
    let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
    let zero_shot = mean(sums[0], counts.zero_shot);
    let few_shot = mean(sums[1], counts.few_shot);
    let common = mean(sums[2], counts.common);
    let present: Vec<f64> = [zero_shot, few_shot, common].into_iter().flatten().collect();
    let overall = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalReport {
        metric: "detection mAP".into(),
        zero_shot,
        few_shot,
        common,
        overall,
        overall_kind: OverallKind::BucketMean,
        bucket_counts: counts,
        instances,
        warnings: 0,
        per_phrase: options.keep_per_phrase.then_some(per_phrase),
    })
}

/// Precision-recall points of one phrase under the detection protocol,
/// for CSV export: `(recall, precision)` after each candidate.
pub fn detection_pr_curve(
    candidates: &[ScoredPrediction],
    gt: &GroundTruthDataset,
    phrase: &Phrase,
    options: &DetectionOptions,
) -> Vec<(f64, f64)> {
    let mut gt_boxes: BTreeMap<&str, Vec<BoundingBox>> = BTreeMap::new();
    for image in &gt.images {
        for region in &image.regions {
            for ann in &region.phrases {
                if ann.phrase == *phrase && (!ann.augmented || options.include_augmented) {
                    gt_boxes
                        .entry(image.image_id.as_str())
                        .or_default()
                        .push(region.bounds);
                }
            }
        }
    }
    let n_pos: usize = gt_boxes.values().map(Vec::len).sum();
    if n_pos == 0 {
        return Vec::new();
    }
    let mut cands: Vec<&ScoredPrediction> = candidates.iter().filter(|c| c.phrase == *phrase).collect();
    cands.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then_with(|| a.region_index.cmp(&b.region_index))
    });
    let mut matched: BTreeMap<&str, Vec<bool>> = gt_boxes
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    let mut curve = Vec::with_capacity(cands.len());
    let mut tp = 0usize;
    for (rank, cand) in cands.iter().enumerate() {
        if let Some(boxes) = gt_boxes.get(cand.image_id.as_str()) {
            let taken = matched.get_mut(cand.image_id.as_str()).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (gi, gbox) in boxes.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let overlap = iou(&cand.bounds, gbox);
                if overlap >= 0.5 && best.map(|(_, b)| overlap > b).unwrap_or(true) {
                    best = Some((gi, overlap));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / n_pos as f64, tp as f64 / (rank + 1) as f64));
    }
    curve
}

/// Fraction of (image, phrase) pairs covered by at least one proposal at
/// IoU >= 0.5, aggregated like localization accuracy.
pub fn proposal_upper_bound(
    proposals: &BTreeMap<String, Vec<BoundingBox>>,
    gt: &GroundTruthDataset,
    train_counts: &BTreeMap<Phrase, u64>,
    include_augmented: bool,
) -> EvalReport {
    let pairs = gt_pairs(gt, include_augmented);
    let mut hits = BucketCounts::default();
    let mut totals = BucketCounts::default();
    let mut hit_sum = 0usize;
    for ((image_id, phrase), boxes) in &pairs {
        let bucket = bucket_for(train_counts, phrase);
        *totals.slot(bucket) += 1;
        let empty = Vec::new();
        let cands = proposals.get(image_id).unwrap_or(&empty);
        if boxes
            .iter()
            .any(|g| cands.iter().any(|p| iou(p, g) >= 0.5))
        {
            *hits.slot(bucket) += 1;
            hit_sum += 1;
        }
    }
    let frac = |h: usize, t: usize| (t > 0).then(|| h as f64 / t as f64);
    let instances = pairs.len();
    EvalReport {
        metric: "proposal upper bound".into(),
        zero_shot: frac(hits.zero_shot, totals.zero_shot),
        few_shot: frac(hits.few_shot, totals.few_shot),
        common: frac(hits.common, totals.common),
        overall: if instances > 0 {
            hit_sum as f64 / instances as f64
        } else {
            0.0
        },
        overall_kind: OverallKind::InstanceWeighted,
        bucket_counts: totals,
        instances,
        warnings: 0,
        per_phrase: None,
    }
}

/// Recall-at-K in both retrieval directions plus their mean, as
/// percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub image_to_sentence: [f64; 3],
    pub sentence_to_image: [f64; 3],
    pub mean_recall: f64,
}

/// Standard R@{1,5,10} over a dense image-by-sentence similarity matrix.
/// `image_sentences[i]` lists the ground-truth sentence columns of image
/// `i`; every image needs at least one.
pub fn retrieval_metrics(
    similarity: &nalgebra::DMatrix<f64>,
    image_sentences: &[Vec<usize>],
) -> RetrievalReport {
    assert_eq!(similarity.nrows(), image_sentences.len());
    assert!(
        image_sentences.iter().all(|s| !s.is_empty()),
        "every image needs a ground-truth sentence"
    );
    let ks = [1usize, 5, 10];
    let n_images = similarity.nrows();
    let n_sentences = similarity.ncols();

    let rank_desc = |scores: Vec<(usize, f64)>| {
        let mut scores = scores;
        scores.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
        scores
    };

    let mut i2s_hits = [0usize; 3];
    for i in 0..n_images {
        let ranked = rank_desc((0..n_sentences).map(|j| (j, similarity[(i, j)])).collect());
        for (ki, &k) in ks.iter().enumerate() {
            if ranked
                .iter()
                .take(k)
                .any(|(j, _)| image_sentences[i].contains(j))
            {
                i2s_hits[ki] += 1;
            }
        }
    }

    // sentence -> owning images
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); n_sentences];
    for (i, sents) in image_sentences.iter().enumerate() {
        for &j in sents {
            owners[j].push(i);
        }
    }
    let mut s2i_hits = [0usize; 3];
    let mut s2i_total = 0usize;
    for (j, owner) in owners.iter().enumerate() {
        if owner.is_empty() {
            continue;
        }
        s2i_total += 1;
        let ranked = rank_desc((0..n_images).map(|i| (i, similarity[(i, j)])).collect());
        for (ki, &k) in ks.iter().enumerate() {
            if ranked.iter().take(k).any(|(i, _)| owner.contains(i)) {
                s2i_hits[ki] += 1;
            }
        }
    }

    let pct = |h: usize, t: usize| if t == 0 { 0.0 } else { 100.0 * h as f64 / t as f64 };
    let image_to_sentence = [
        pct(i2s_hits[0], n_images),
        pct(i2s_hits[1], n_images),
        pct(i2s_hits[2], n_images),
    ];
    let sentence_to_image = [
        pct(s2i_hits[0], s2i_total),
        pct(s2i_hits[1], s2i_total),
        pct(s2i_hits[2], s2i_total),
    ];
    let mean_recall = (image_to_sentence.iter().sum::<f64>()
        + sentence_to_image.iter().sum::<f64>())
        / 6.0;
    RetrievalReport {
        image_to_sentence,
        sentence_to_image,
        mean_recall,
    }
}

/// Pair scorer used by the prediction drivers; typically a closure over a
/// trained model.
pub type PairScorer<'a> = &'a (dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Sync);

fn image_region_features(
    image: &crate::datamodel::ImageEntry,
    regions: &crate::datamodel::FeatureStore,
) -> Result<Vec<(u32, BoundingBox, DVector<f64>)>, EvalError> {
    image
        .regions
        .iter()
        .enumerate()
        .map(|(idx, region)| {
            let fid = crate::datamodel::region_feature_id(&image.image_id, idx as u32);
            let feat = regions
                .vector(&fid)
                .ok_or(EvalError::MissingFeature(fid))?;
            Ok((idx as u32, region.bounds, feat))
        })
        .collect()
}

/// Best-scoring regions per (phrase, image) over the whole test set, at
/// most `top_k` candidates each.
pub fn detection_candidates(
    score: PairScorer,
    regions: &crate::datamodel::FeatureStore,
    phrases: &crate::datamodel::FeatureStore,
    dataset: &GroundTruthDataset,
    vocabulary: &[Phrase],
    top_k: usize,
) -> Result<Vec<ScoredPrediction>, EvalError> {
    let image_feats: Vec<(&str, Vec<(u32, BoundingBox, DVector<f64>)>)> = dataset
        .images
        .iter()
        .map(|img| Ok((img.image_id.as_str(), image_region_features(img, regions)?)))
        .collect::<Result<_, EvalError>>()?;

    let phrase_feats: Vec<(&Phrase, DVector<f64>)> = vocabulary
        .iter()
        .map(|p| {
            let id = p.text();
            phrases
                .vector(&id)
                .map(|v| (p, v))
                .ok_or(EvalError::MissingFeature(id))
        })
        .collect::<Result<_, EvalError>>()?;

    let per_phrase: Vec<Vec<ScoredPrediction>> = phrase_feats
        .par_iter()
        .map(|(phrase, pvec)| {
            let mut out = Vec::new();
            for (image_id, feats) in &image_feats {
                let mut scored: Vec<(u32, BoundingBox, f64)> = feats
                    .iter()
                    .map(|(idx, bounds, rvec)| (*idx, *bounds, score(rvec, pvec)))
                    .collect();
                scored.sort_by(|a, b| {
                    b.2.partial_cmp(&a.2).expect("finite").then(a.0.cmp(&b.0))
                });
                for (idx, bounds, s) in scored.into_iter().take(top_k) {
                    out.push(ScoredPrediction {
                        phrase: (*phrase).clone(),
                        image_id: (*image_id).to_owned(),
                        region_index: idx,
                        bounds,
                        score: s,
                    });
                }
            }
            out
        })
        .collect();
    Ok(per_phrase.into_iter().flatten().collect())
}

/// Top-1 box for every ground-truth (image, phrase) pair.
pub fn localization_predictions(
    score: PairScorer,
    regions: &crate::datamodel::FeatureStore,
    phrases: &crate::datamodel::FeatureStore,
    dataset: &GroundTruthDataset,
    include_augmented: bool,
) -> Result<Vec<LocPrediction>, EvalError> {
    let mut out = Vec::new();
    for image in &dataset.images {
        let feats = image_region_features(image, regions)?;
        let mut seen: Vec<&Phrase> = Vec::new();
        for region in &image.regions {
            for ann in &region.phrases {
                if (ann.augmented && !include_augmented) || seen.contains(&&ann.phrase) {
                    continue;
                }
                seen.push(&ann.phrase);
                let pid = ann.phrase.text();
                let pvec = phrases
                    .vector(&pid)
                    .ok_or(EvalError::MissingFeature(pid))?;
                let mut best: Option<(u32, BoundingBox, f64)> = None;
                for (idx, bounds, rvec) in &feats {
                    let s = score(rvec, &pvec);
                    let better = match &best {
                        Some((bi, _, bs)) => s > *bs || (s == *bs && idx < bi),
                        None => true,
                    };
                    if better {
                        best = Some((*idx, *bounds, s));
                    }
                }
                if let Some((_, bounds, _)) = best {
                    out.push(LocPrediction {
                        image_id: image.image_id.clone(),
                        phrase: ann.phrase.clone(),
                        bounds,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{
        DatasetMode, ImageEntry, PhraseAnnotation, RegionEntry, Split,
    };
    use approx::assert_relative_eq;

    fn boxed(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn phrase(s: &str) -> Phrase {
        Phrase::normalize(s)
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = boxed(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = boxed(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_hand_computed_overlap() {
        let a = boxed(0.0, 0.0, 10.0, 10.0);
        let b = boxed(5.0, 5.0, 15.0, 15.0);
        assert_relative_eq!(iou(&a, &b), 25.0 / 175.0, epsilon = 1e-12);
    }

    fn gt_with(images: Vec<(&str, Vec<(BoundingBox, Vec<(&str, bool)>)>)>) -> GroundTruthDataset {
        GroundTruthDataset::new(
            Split::Test,
            DatasetMode::GenomeLike,
            images
                .into_iter()
                .map(|(id, regions)| ImageEntry {
                    image_id: id.to_owned(),
                    regions: regions
                        .into_iter()
                        .map(|(bounds, phrases)| RegionEntry {
                            bounds,
                            phrases: phrases
                                .into_iter()
                                .map(|(p, augmented)| PhraseAnnotation {
                                    phrase: phrase(p),
                                    augmented,
                                })
                                .collect(),
                        })
                        .collect(),
                })
                .collect(),
        )
    }

    fn counts(entries: &[(&str, u64)]) -> BTreeMap<Phrase, u64> {
        entries.iter().map(|(p, c)| (phrase(p), *c)).collect()
    }

    #[test]
    fn oracle_predictor_localizes_everything() {
        let gt = gt_with(vec![
            (
                "im1",
                vec![
                    (boxed(0.0, 0.0, 10.0, 10.0), vec![("dog", false)]),
                    (boxed(20.0, 0.0, 30.0, 10.0), vec![("cat", false)]),
                ],
            ),
            ("im2", vec![(boxed(0.0, 0.0, 8.0, 8.0), vec![("dog", false)])]),
        ]);
        let preds: Vec<LocPrediction> = gt
            .annotations()
            .map(|(image_id, bounds, ann)| LocPrediction {
                image_id: image_id.to_owned(),
                phrase: ann.phrase.clone(),
                bounds: *bounds,
            })
            .collect();
        let report = localization_accuracy(&preds, &gt, &counts(&[("dog", 200), ("cat", 3)]), false);
        assert_eq!(report.overall, 1.0);
        assert_eq!(report.common, Some(1.0));
        assert_eq!(report.few_shot, Some(1.0));
        assert_eq!(report.zero_shot, None);
        assert_eq!(report.instances, 3);
        assert_eq!(report.warnings, 0);
    }

    #[test]
    fn degenerate_predictor_misses_everything() {
        let gt = gt_with(vec![(
            "im1",
            vec![(boxed(50.0, 50.0, 60.0, 60.0), vec![("dog", false)])],
        )]);
        let preds = vec![LocPrediction {
            image_id: "im1".into(),
            phrase: phrase("dog"),
            bounds: boxed(0.0, 0.0, 1.0, 1.0),
        }];
        let report = localization_accuracy(&preds, &gt, &counts(&[]), false);
        assert_eq!(report.overall, 0.0);
    }

    #[test]
    fn missing_predictions_warn_and_fail() {
        let gt = gt_with(vec![(
            "im1",
            vec![
                (boxed(0.0, 0.0, 10.0, 10.0), vec![("dog", false)]),
                (boxed(20.0, 0.0, 30.0, 10.0), vec![("cat", false)]),
            ],
        )]);
        let preds = vec![LocPrediction {
            image_id: "im1".into(),
            phrase: phrase("dog"),
            bounds: boxed(0.0, 0.0, 10.0, 10.0),
        }];
        let report = localization_accuracy(&preds, &gt, &counts(&[]), false);
        assert_eq!(report.warnings, 1);
        assert_relative_eq!(report.overall, 0.5);
    }

    fn cand(p: &str, image: &str, idx: u32, b: BoundingBox, score: f64) -> ScoredPrediction {
        ScoredPrediction {
            phrase: phrase(p),
            image_id: image.into(),
            region_index: idx,
            bounds: b,
            score,
        }
    }

    #[test]
    fn perfect_scorer_reaches_map_one() {
        let gt = gt_with(vec![
            ("im1", vec![(boxed(0.0, 0.0, 10.0, 10.0), vec![("dog", false)])]),
            ("im2", vec![(boxed(0.0, 0.0, 10.0, 10.0), vec![("dog", false)])]),
            ("im3", vec![(boxed(0.0, 0.0, 10.0, 10.0), vec![("cat", false)])]),
        ]);
        let candidates = vec![
            cand("dog", "im1", 0, boxed(0.0, 0.0, 10.0, 10.0), 0.9),
            cand("dog", "im2", 0, boxed(0.0, 0.0, 10.0, 10.0), 0.8),
            cand("dog", "im3", 0, boxed(0.0, 0.0, 10.0, 10.0), 0.1),
            cand("cat", "im3", 0, boxed(0.0, 0.0, 10.0, 10.0), 0.7),
            cand("cat", "im1", 0, boxed(0.0, 0.0, 10.0, 10.0), 0.2),
        ];
        let report = detection_map(
            &candidates,
            &gt,
            &counts(&[("dog", 500), ("cat", 50)]),
            &DetectionOptions::default(),
        )
        .unwrap();
        assert_eq!(report.common, Some(1.0));
        assert_eq!(report.few_shot, Some(1.0));
        assert_eq!(report.overall, 1.0);
    }

    #[test]
    fn bottom_ranked_single_positive_gets_ap_one_tenth() {
        // one gt instance, its true candidate ranked below 9 false ones
        let gt = gt_with(vec![(
            "im0",
            vec![(boxed(0.0, 0.0, 10.0, 10.0), vec![("dog", false)])],
        )]);
        let mut candidates = vec![cand("dog", "im0", 0, boxed(0.0, 0.0, 10.0, 10.0), 0.05)];
        for i in 1..10 {
            candidates.push(cand(
                "dog",
                &format!("im{i}"),
                0,
                boxed(0.0, 0.0, 10.0, 10.0),
                0.1 + i as f64 * 0.05,
            ));
        }
        let report = detection_map(&candidates, &gt, &counts(&[]), &DetectionOptions::default())
            .unwrap();
        assert_relative_eq!(report.zero_shot.unwrap(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn detection_is_invariant_under_monotone_score_transforms() {
        let gt = gt_with(vec![
            ("im1", vec![(boxed(0.0, 0.0, 10.0, 10.0), vec![("dog", false)])]),
            ("im2", vec![(boxed(0.0, 0.0, 10.0, 10.0), vec![("dog", false)])]),
        ]);
        let candidates = vec![
            cand("dog", "im1", 0, boxed(0.0, 0.0, 10.0, 10.0), 0.3),
            cand("dog", "im2", 0, boxed(5.0, 5.0, 9.0, 9.0), 0.8),
            cand("dog", "im3", 0, boxed(0.0, 0.0, 10.0, 10.0), 0.5),
        ];
        let base = detection_map(&candidates, &gt, &counts(&[]), &DetectionOptions::default())
            .unwrap();
        let transformed: Vec<ScoredPrediction> = candidates
            .iter()
            .cloned()
            .map(|mut c| {
                c.score = (c.score * 3.0).exp(); // strictly monotone
                c
            })
            .collect();
        let after = detection_map(&transformed, &gt, &counts(&[]), &DetectionOptions::default())
            .unwrap();
        assert_eq!(base.overall, after.overall);
        assert_eq!(base.zero_shot, after.zero_shot);
    }

    #[test]
    fn max_candidates_guard_trips() {
        let gt = gt_with(vec![(
            "im1",
            vec![(boxed(0.0, 0.0, 10.0, 10.0), vec![("dog", false)])],
        )]);
        let candidates = vec![
            cand("dog", "im1", 0, boxed(0.0, 0.0, 10.0, 10.0), 0.9),
            cand("dog", "im1", 1, boxed(1.0, 1.0, 9.0, 9.0), 0.8),
        ];
        let err = detection_map(&candidates, &gt, &counts(&[]), &DetectionOptions::default());
        assert!(matches!(err, Err(EvalError::TooManyCandidates { .. })));
        let ten = DetectionOptions {
            max_per_image: 10,
            ..DetectionOptions::default()
        };
        assert!(detection_map(&candidates, &gt, &counts(&[]), &ten).is_ok());
    }

    #[test]
    fn upper_bound_oracle_and_half_coverage() {
        let gt = gt_with(vec![
            ("im1", vec![(boxed(0.0, 0.0, 10.0, 10.0), vec![("dog", false)])]),
            ("im2", vec![(boxed(0.0, 0.0, 10.0, 10.0), vec![("cat", false)])]),
        ]);
        let cnts = counts(&[]);
        // proposals equal to gt boxes
        let mut proposals = BTreeMap::new();
        proposals.insert("im1".to_owned(), vec![boxed(0.0, 0.0, 10.0, 10.0)]);
        proposals.insert("im2".to_owned(), vec![boxed(0.0, 0.0, 10.0, 10.0)]);
        assert_eq!(proposal_upper_bound(&proposals, &gt, &cnts, false).overall, 1.0);
        // empty proposals
        let empty: BTreeMap<String, Vec<BoundingBox>> = BTreeMap::new();
        assert_eq!(proposal_upper_bound(&empty, &gt, &cnts, false).overall, 0.0);
        // covering proposal for every second instance
        let mut half = BTreeMap::new();
        half.insert("im1".to_owned(), vec![boxed(0.0, 0.0, 10.0, 10.0)]);
        half.insert("im2".to_owned(), vec![boxed(50.0, 50.0, 60.0, 60.0)]);
        assert_relative_eq!(proposal_upper_bound(&half, &gt, &cnts, false).overall, 0.5);
    }

    #[test]
    fn retrieval_identity_permutation_is_perfect() {
        let n = 12;
        let sim = nalgebra::DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
        let pairing: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let report = retrieval_metrics(&sim, &pairing);
        assert_eq!(report.image_to_sentence, [100.0; 3]);
        assert_eq!(report.sentence_to_image, [100.0; 3]);
        assert_eq!(report.mean_recall, 100.0);
    }

    #[test]
    fn retrieval_antidiagonal_has_zero_r1() {
        let n = 100;
        let sim = nalgebra::DMatrix::from_fn(n, n, |i, j| if i + j == n - 1 { 1.0 } else { 0.0 });
        let pairing: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let report = retrieval_metrics(&sim, &pairing);
        assert_eq!(report.image_to_sentence[0], 0.0);
        assert_eq!(report.sentence_to_image[0], 0.0);
    }

    #[test]
    fn retrieval_matches_brute_force_ranks() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let (ni, ns) = (20, 100);
        let sim = nalgebra::DMatrix::from_fn(ni, ns, |_, _| rng.random::<f64>());
        let pairing: Vec<Vec<usize>> = (0..ni).map(|i| vec![5 * i, 5 * i + 1]).collect();
        let report = retrieval_metrics(&sim, &pairing);

        // brute force: count images whose best-ranked gt sentence position < k
        for (ki, k) in [1usize, 5, 10].iter().enumerate() {
            let mut hits = 0;
            for i in 0..ni {
                let mut better = 0;
                let best_rank = pairing[i]
                    .iter()
                    .map(|&j| {
                        better = (0..ns)
                            .filter(|&jj| {
                                sim[(i, jj)] > sim[(i, j)]
                                    || (sim[(i, jj)] == sim[(i, j)] && jj < j)
                            })
                            .count();
                        better
                    })
                    .min()
                    .unwrap();
                if best_rank < *k {
                    hits += 1;
                }
            }
            assert_relative_eq!(
                report.image_to_sentence[ki],
                100.0 * hits as f64 / ni as f64,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn per_image_rescaling_preserves_argmax_regions() {
        // scores for one phrase in one image scaled by a positive constant
        let scores = [0.1, 0.7, 0.4, 0.69];
        let argmax = |s: &[f64]| {
            s.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0
        };
        let base = argmax(&scores);
        for alpha in [0.01, 0.5, 3.0, 1000.0] {
            let scaled: Vec<f64> = scores.iter().map(|s| s * alpha).collect();
            assert_eq!(argmax(&scaled), base);
        }
    }
}
