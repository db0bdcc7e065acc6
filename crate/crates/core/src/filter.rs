//! Phrase filtering through retrieved sentences: restrict each image's
//! detection queries to phrases extracted from its top-ranked database
//! sentences.

use crate::datamodel::{DataError, FeatureStore, GroundTruthDataset, Phrase};
use crate::eval::{detection_map, DetectionOptions, EvalReport, ScoredPrediction};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("no similarity row for image {0:?}")]
    MissingSimilarityRow(String),
    #[error("similarity matrix has {cols} columns but the manifest lists {ids} sentence ids")]
    ManifestMismatch { cols: usize, ids: usize },
    #[error("sentence {sentence_id:?}: phrase {phrase:?} does not occur in its tokens")]
    PhraseNotInSentence {
        sentence_id: String,
        phrase: String,
    },
    #[error("duplicate sentence id {0:?}")]
    DuplicateSentence(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentenceEntry {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub phrases: Vec<Phrase>,
}

/// Sentence database plus an ingested image-by-sentence similarity
/// matrix (a feature store keyed by image id, one column per sentence in
/// manifest order).
#[derive(Debug, Clone)]
pub struct SentenceDb {
    sentences: Vec<SentenceEntry>,
    by_id: BTreeMap<String, usize>,
    similarity: FeatureStore,
    column_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimilarityManifest {
    pub sentence_ids: Vec<String>,
}

impl SentenceDb {
    /// Validates that every listed phrase occurs verbatim (as a token
    /// subsequence after normalization) in its sentence and that the
    /// manifest matches the similarity matrix width.
    pub fn from_parts(
        sentences: Vec<SentenceEntry>,
        similarity: FeatureStore,
        column_ids: Vec<String>,
    ) -> Result<Self, FilterError> {
        if similarity.dimension() != column_ids.len() {
            return Err(FilterError::ManifestMismatch {
                cols: similarity.dimension(),
                ids: column_ids.len(),
            });
        }
        let mut by_id = BTreeMap::new();
        for (i, s) in sentences.iter().enumerate() {
            if by_id.insert(s.sentence_id.clone(), i).is_some() {
                return Err(FilterError::DuplicateSentence(s.sentence_id.clone()));
            }
            let norm_tokens: Vec<String> = s
                .tokens
                .iter()
                .flat_map(|t| Phrase::normalize(t).tokens().to_vec())
                .collect();
            for p in &s.phrases {
                if !contains_subsequence(&norm_tokens, p.tokens()) {
                    return Err(FilterError::PhraseNotInSentence {
                        sentence_id: s.sentence_id.clone(),
                        phrase: p.text(),
                    });
                }
            }
        }
        Ok(Self {
            sentences,
            by_id,
            similarity,
            column_ids,
        })
    }

    /// Load from the JSON-lines sentence file, the similarity feature
    /// store, and the column manifest.
    pub fn load(
        sentences_path: impl AsRef<Path>,
        similarity_path: impl AsRef<Path>,
        manifest_path: impl AsRef<Path>,
    ) -> Result<Self, FilterError> {
        let reader = BufReader::new(std::fs::File::open(sentences_path).map_err(DataError::Io)?);
        let mut sentences = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(DataError::Io)?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: SentenceEntry =
                serde_json::from_str(&line).map_err(|e| DataError::BadDatasetLine {
                    line: lineno + 1,
                    reason: e.to_string(),
                })?;
            sentences.push(entry);
        }
        let similarity = FeatureStore::read(similarity_path)?;
        let manifest: SimilarityManifest = serde_json::from_reader(BufReader::new(
            std::fs::File::open(manifest_path).map_err(DataError::Io)?,
        ))
        .map_err(|e| DataError::BadDatasetLine {
            line: 0,
            reason: format!("manifest: {e}"),
        })?;
        Self::from_parts(sentences, similarity, manifest.sentence_ids)
    }

    pub fn sentences(&self) -> &[SentenceEntry] {
        &self.sentences
    }

    /// Union of phrases contained in the image's `top_n`
    /// highest-similarity sentences; ties break by sentence id.
    pub fn filter_phrases(
        &self,
        image_id: &str,
        top_n: usize,
    ) -> Result<BTreeSet<Phrase>, FilterError> {
        let row = self
            .similarity
            .get(image_id)
            .ok_or_else(|| FilterError::MissingSimilarityRow(image_id.to_owned()))?;
        let mut ranked: Vec<(usize, f32)> = row.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite similarity")
                .then_with(|| self.column_ids[a.0].cmp(&self.column_ids[b.0]))
        });
        let mut out = BTreeSet::new();
        for (col, _) in ranked.into_iter().take(top_n) {
            if let Some(&idx) = self.by_id.get(&self.column_ids[col]) {
                out.extend(self.sentences[idx].phrases.iter().cloned());
            }
        }
        Ok(out)
    }
}

fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack
        .windows(needle.len())
        .any(|w| w.iter().zip(needle).all(|(a, b)| a == b))
}

/// Phrase set per test image.
pub fn filter_phrases(
    db: &SentenceDb,
    image_id: &str,
    top_n: usize,
) -> Result<BTreeSet<Phrase>, FilterError> {
    db.filter_phrases(image_id, top_n)
}

/// Detection mAP where a (phrase, image) candidate survives only if the
/// phrase is in that image's filter set. Filtered-away ground truth still
/// counts as missed recall.
pub fn filtered_detection(
    candidates: &[ScoredPrediction],
    filter_sets: &BTreeMap<String, BTreeSet<Phrase>>,
    gt: &GroundTruthDataset,
    train_counts: &BTreeMap<Phrase, u64>,
    options: &DetectionOptions,
) -> Result<EvalReport, FilterError> {
    let kept: Vec<ScoredPrediction> = candidates
        .iter()
        .filter(|c| {
            filter_sets
                .get(&c.image_id)
                .map(|set| set.contains(&c.phrase))
                .unwrap_or(false)
        })
        .cloned()
        .collect();
    Ok(detection_map(&kept, gt, train_counts, options)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{BoundingBox, DatasetMode, ImageEntry, PhraseAnnotation, RegionEntry, Split};

    fn phrase(s: &str) -> Phrase {
        Phrase::normalize(s)
    }

    fn sentence(id: &str, text: &str, phrases: &[&str]) -> SentenceEntry {
        SentenceEntry {
            sentence_id: id.to_owned(),
            tokens: text.split_whitespace().map(str::to_owned).collect(),
            phrases: phrases.iter().map(|p| phrase(p)).collect(),
        }
    }

    fn toy_db() -> SentenceDb {
        let sentences = vec![
            sentence("s0", "a dog runs in the park", &["a dog", "the park"]),
            sentence("s1", "a red house on a hill", &["a red house", "a hill"]),
            sentence("s2", "the dog sits by a red house", &["a red house"]),
        ];
        let mut sim = FeatureStore::new(3);
        sim.insert("im1", vec![0.9, 0.2, 0.5]).unwrap();
        sim.insert("im2", vec![0.1, 0.8, 0.7]).unwrap();
        SentenceDb::from_parts(
            sentences,
            sim,
            vec!["s0".into(), "s1".into(), "s2".into()],
        )
        .unwrap()
    }

    #[test]
    fn zero_budget_yields_empty_set() {
        let db = toy_db();
        assert!(db.filter_phrases("im1", 0).unwrap().is_empty());
    }

    #[test]
    fn top_one_saturates_when_first_sentence_has_all_phrases() {
        let sentences = vec![sentence(
            "only",
            "a dog and a cat and a red house",
            &["a dog", "a cat", "a red house"],
        )];
        let mut sim = FeatureStore::new(1);
        sim.insert("im1", vec![1.0]).unwrap();
        let db = SentenceDb::from_parts(sentences, sim, vec!["only".into()]).unwrap();
        let set = db.filter_phrases("im1", 1).unwrap();
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn five_sentence_toy_matches_brute_force_sort_and_union() {
        let db = toy_db();
        for (image, top_n) in [("im1", 1), ("im1", 2), ("im2", 2), ("im2", 3)] {
            let got = db.filter_phrases(image, top_n).unwrap();
            // brute force: sort (similarity desc, id asc), union
            let row = db.similarity.get(image).unwrap();
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap()
                    .then(db.column_ids[a].cmp(&db.column_ids[b]))
            });
            let mut want = BTreeSet::new();
            for &col in order.iter().take(top_n) {
                let idx = db.by_id[&db.column_ids[col]];
                want.extend(db.sentences[idx].phrases.iter().cloned());
            }
            assert_eq!(got, want, "image {image} top_n {top_n}");
        }
    }

    #[test]
    fn missing_similarity_row_is_an_error() {
        let db = toy_db();
        let err = db.filter_phrases("nope", 5).unwrap_err();
        assert!(matches!(err, FilterError::MissingSimilarityRow(id) if id == "nope"));
    }

    #[test]
    fn phrase_not_in_sentence_is_rejected() {
        let sentences = vec![sentence("s0", "a dog runs", &["a cat"])];
        let mut sim = FeatureStore::new(1);
        sim.insert("im1", vec![1.0]).unwrap();
        let err = SentenceDb::from_parts(sentences, sim, vec!["s0".into()]).unwrap_err();
        assert!(matches!(err, FilterError::PhraseNotInSentence { .. }));
    }

    fn gt_one_phrase() -> GroundTruthDataset {
        GroundTruthDataset::new(
            Split::Test,
            DatasetMode::GenomeLike,
            vec![ImageEntry {
                image_id: "im1".into(),
                regions: vec![RegionEntry {
                    bounds: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
                    phrases: vec![PhraseAnnotation {
                        phrase: phrase("a dog"),
                        augmented: false,
                    }],
                }],
            }],
        )
    }

    #[test]
    fn full_vocabulary_filter_is_a_noop() {
        let gt = gt_one_phrase();
        let candidates = vec![
            ScoredPrediction {
                phrase: phrase("a dog"),
                image_id: "im1".into(),
                region_index: 0,
                bounds: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
                score: 0.4,
            },
            ScoredPrediction {
                phrase: phrase("a dog"),
                image_id: "im2".into(),
                region_index: 0,
                bounds: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
                score: 0.9,
            },
        ];
        let counts = BTreeMap::new();
        let unfiltered =
            detection_map(&candidates, &gt, &counts, &DetectionOptions::default()).unwrap();
        let mut sets = BTreeMap::new();
        for im in ["im1", "im2"] {
            sets.insert(im.to_owned(), BTreeSet::from([phrase("a dog")]));
        }
        let filtered =
            filtered_detection(&candidates, &sets, &gt, &counts, &DetectionOptions::default())
                .unwrap();
        assert_eq!(unfiltered, filtered);
    }

    #[test]
    fn excluding_all_gt_phrases_zeroes_map() {
        let gt = gt_one_phrase();
        let candidates = vec![ScoredPrediction {
            phrase: phrase("a dog"),
            image_id: "im1".into(),
            region_index: 0,
            bounds: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            score: 0.9,
        }];
        let counts = BTreeMap::new();
        let sets: BTreeMap<String, BTreeSet<Phrase>> =
            BTreeMap::from([("im1".to_owned(), BTreeSet::new())]);
        let report =
            filtered_detection(&candidates, &sets, &gt, &counts, &DetectionOptions::default())
                .unwrap();
        assert_eq!(report.overall, 0.0);
    }

    #[test]
    fn removing_only_false_positives_strictly_improves_map() {
        let gt = gt_one_phrase();
        // true positive in im1 outranked by a false positive in im2
        let candidates = vec![
            ScoredPrediction {
                phrase: phrase("a dog"),
                image_id: "im1".into(),
                region_index: 0,
                bounds: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
                score: 0.4,
            },
            ScoredPrediction {
                phrase: phrase("a dog"),
                image_id: "im2".into(),
                region_index: 0,
                bounds: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
                score: 0.9,
            },
        ];
        let counts = BTreeMap::new();
        let unfiltered =
            detection_map(&candidates, &gt, &counts, &DetectionOptions::default()).unwrap();
        // the filter knows a dog is only plausible in im1
        let sets: BTreeMap<String, BTreeSet<Phrase>> = BTreeMap::from([
            ("im1".to_owned(), BTreeSet::from([phrase("a dog")])),
            ("im2".to_owned(), BTreeSet::new()),
        ]);
        let filtered =
            filtered_detection(&candidates, &sets, &gt, &counts, &DetectionOptions::default())
                .unwrap();
        assert!(filtered.overall > unfiltered.overall);
        assert_eq!(filtered.overall, 1.0);
        assert_eq!(unfiltered.overall, 0.5);
    }
}
