//! Ground-truth datasets: per-image candidate regions with phrase
//! annotations, JSON-lines ingestion, and train-frequency counting.
//!
//! JSON-lines format, one image per line:
//! `{"image_id": str, "regions": [{"box": [x1,y1,x2,y2], "phrases": [..]}]}`
//! where a phrase entry is either a plain string (ground truth) or
//! `{"text": str, "aug": true}` for an augmented annotation. Regions with
//! an empty phrase list are candidate-only regions (proposals).

use super::{BoundingBox, DataError, Phrase, RegionRecord};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Collection style of the source dataset; drives phrase-augmentation
/// rules (sub-phrase decomposition, protected spatial words).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    FlickrLike,
    ReferItLike,
    GenomeLike,
}

/// One phrase attached to a region, flagged if it came from augmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseAnnotation {
    pub phrase: Phrase,
    pub augmented: bool,
}

/// A candidate region with zero or more phrase annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionEntry {
    pub bounds: BoundingBox,
    pub phrases: Vec<PhraseAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub image_id: String,
    pub regions: Vec<RegionEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthDataset {
    pub split: Split,
    pub mode: DatasetMode,
    pub images: Vec<ImageEntry>,
}

#[derive(Serialize, Deserialize)]
struct ImageLine {
    image_id: String,
    regions: Vec<RegionLine>,
}

#[derive(Serialize, Deserialize)]
struct RegionLine {
    #[serde(rename = "box")]
    bounds: [f64; 4],
    phrases: Vec<PhraseLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PhraseLine {
    Plain(String),
    Flagged { text: String, aug: bool },
}

impl GroundTruthDataset {
    pub fn new(split: Split, mode: DatasetMode, images: Vec<ImageEntry>) -> Self {
        Self {
            split,
            mode,
            images,
        }
    }

    pub fn read_jsonl(
        path: impl AsRef<Path>,
        split: Split,
        mode: DatasetMode,
    ) -> Result<Self, DataError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut images = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ImageLine =
                serde_json::from_str(&line).map_err(|e| DataError::BadDatasetLine {
                    line: lineno + 1,
                    reason: e.to_string(),
                })?;
            let mut regions = Vec::with_capacity(parsed.regions.len());
            for region in parsed.regions {
                let bounds = BoundingBox::try_from(region.bounds).map_err(|e| {
                    DataError::BadDatasetLine {
                        line: lineno + 1,
                        reason: e.to_string(),
                    }
                })?;
                let mut phrases = Vec::with_capacity(region.phrases.len());
                for entry in region.phrases {
                    let (text, augmented) = match entry {
                        PhraseLine::Plain(text) => (text, false),
                        PhraseLine::Flagged { text, aug } => (text, aug),
                    };
                    let phrase = Phrase::normalize(&text);
                    if phrase.is_empty() {
                        return Err(DataError::BadDatasetLine {
                            line: lineno + 1,
                            reason: format!("phrase {text:?} normalizes to nothing"),
                        });
                    }
                    phrases.push(PhraseAnnotation { phrase, augmented });
                }
                regions.push(RegionEntry { bounds, phrases });
            }
            images.push(ImageEntry {
                image_id: parsed.image_id,
                regions,
            });
        }
        let ds = Self::new(split, mode, images);
        ds.validate()?;
        Ok(ds)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut writer = BufWriter::new(std::fs::File::create(path)?);
        for image in &self.images {
            let line = ImageLine {
                image_id: image.image_id.clone(),
                regions: image
                    .regions
                    .iter()
                    .map(|r| RegionLine {
                        bounds: r.bounds.into(),
                        phrases: r
                            .phrases
                            .iter()
                            .map(|p| {
                                if p.augmented {
                                    PhraseLine::Flagged {
                                        text: p.phrase.text(),
                                        aug: true,
                                    }
                                } else {
                                    PhraseLine::Plain(p.phrase.text())
                                }
                            })
                            .collect(),
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut writer, &line).map_err(std::io::Error::other)?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Every image must carry at least one annotation and image ids must
    /// be unique.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::BTreeSet::new();
        for image in &self.images {
            if !seen.insert(&image.image_id) {
                return Err(DataError::DatasetInvariant(format!(
                    "duplicate image id {:?}",
                    image.image_id
                )));
            }
            if image.regions.iter().all(|r| r.phrases.is_empty()) {
                return Err(DataError::DatasetInvariant(format!(
                    "image {:?} has no annotations",
                    image.image_id
                )));
            }
        }
        Ok(())
    }

    /// All `(image_id, box, annotation)` triples, in dataset order.
    pub fn annotations(&self) -> impl Iterator<Item = (&str, &BoundingBox, &PhraseAnnotation)> {
        self.images.iter().flat_map(|image| {
            image.regions.iter().flat_map(move |region| {
                region
                    .phrases
                    .iter()
                    .map(move |p| (image.image_id.as_str(), &region.bounds, p))
            })
        })
    }

    /// Candidate regions of every image, indexed in file order.
    pub fn region_records(&self) -> Vec<RegionRecord> {
        self.images
            .iter()
            .flat_map(|image| {
                image
                    .regions
                    .iter()
                    .enumerate()
                    .map(move |(i, r)| RegionRecord::new(&image.image_id, i as u32, r.bounds))
            })
            .collect()
    }

    /// Distinct ground-truth (non-augmented) phrases in this split.
    pub fn ground_truth_vocabulary(&self) -> std::collections::BTreeSet<Phrase> {
        self.annotations()
            .filter(|(_, _, p)| !p.augmented)
            .map(|(_, _, p)| p.phrase.clone())
            .collect()
    }

    /// Distinct phrases including augmented ones.
    pub fn full_vocabulary(&self) -> std::collections::BTreeSet<Phrase> {
        self.annotations()
            .map(|(_, _, p)| p.phrase.clone())
            .collect()
    }
}

/// Count ground-truth training instances per phrase.
///
/// Counts one per `(image, box)` annotation bearing the exact phrase text;
/// augmented annotations are ignored, so the counts are invariant under
/// phrase augmentation.
pub fn count_train_occurrences(
    dataset: &GroundTruthDataset,
) -> Result<BTreeMap<Phrase, u64>, DataError> {
    if dataset.split != Split::Train {
        return Err(DataError::NotTrainSplit(dataset.split));
    }
    let mut counts = BTreeMap::new();
    for (_, _, annotation) in dataset.annotations() {
        if !annotation.augmented {
            *counts.entry(annotation.phrase.clone()).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

/// Count how often two distinct phrases are ground-truth-annotated on the
/// same region. Keys are stored with the lexicographically smaller phrase
/// first.
pub fn co_annotation_counts(dataset: &GroundTruthDataset) -> BTreeMap<(Phrase, Phrase), u64> {
    let mut counts = BTreeMap::new();
    for image in &dataset.images {
        for region in &image.regions {
            let gt: Vec<&Phrase> = region
                .phrases
                .iter()
                .filter(|p| !p.augmented)
                .map(|p| &p.phrase)
                .collect();
            for i in 0..gt.len() {
                for j in (i + 1)..gt.len() {
                    if gt[i] == gt[j] {
                        continue;
                    }
                    let key = if gt[i] <= gt[j] {
                        (gt[i].clone(), gt[j].clone())
                    } else {
                        (gt[j].clone(), gt[i].clone())
                    };
                    *counts.entry(key).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}
