//! Core domain types shared by every other module: boxes, phrases,
//! frequency buckets, the feature store, and the ground-truth dataset.

mod dataset;
mod feature_store;
mod phrase;

pub use dataset::{
    co_annotation_counts, count_train_occurrences, DatasetMode, GroundTruthDataset, ImageEntry,
    PhraseAnnotation, RegionEntry, Split,
};
pub use feature_store::{ingest_features, write_features, FeatureStore};
pub use phrase::Phrase;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while constructing or ingesting domain data.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },
    #[error("malformed feature store header: {0}")]
    MalformedHeader(String),
    #[error("feature row {index} ({id:?}): {reason}")]
    BadRow {
        index: usize,
        id: String,
        reason: String,
    },
    #[error("duplicate feature id {0:?}")]
    DuplicateId(String),
    #[error("dataset line {line}: {reason}")]
    BadDatasetLine { line: usize, reason: String },
    #[error("dataset invariant violated: {0}")]
    DatasetInvariant(String),
    #[error("expected the train split, got {0:?}")]
    NotTrainSplit(Split),
    #[error("lexicon line {line}: {reason}")]
    BadLexiconLine { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box in pixel coordinates, corners `(x1, y1)`-`(x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    /// Requires finite, non-negative coordinates with `x1 < x2`, `y1 < y2`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, DataError> {
        let err = |reason| DataError::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(err("coordinates must be finite"));
        }
        if x1 < 0.0 || y1 < 0.0 {
            return Err(err("coordinates must be non-negative"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(err("requires x1 < x2 and y1 < y2"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = DataError;

    fn try_from(v: [f64; 4]) -> Result<Self, DataError> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> [f64; 4] {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// One candidate region of an image, keyed by `(image_id, region_index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionRecord {
    pub image_id: String,
    pub region_index: u32,
    pub bounds: BoundingBox,
    pub feature_id: String,
}

impl RegionRecord {
    pub fn new(image_id: &str, region_index: u32, bounds: BoundingBox) -> Self {
        Self {
            image_id: image_id.to_owned(),
            region_index,
            bounds,
            feature_id: region_feature_id(image_id, region_index),
        }
    }
}

/// Deterministic feature key for a region: `"<image_id>#<region_index>"`.
pub fn region_feature_id(image_id: &str, region_index: u32) -> String {
    format!("{image_id}#{region_index}")
}

/// A vocabulary entry: normalized text plus its ground-truth train count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseRecord {
    pub text: Phrase,
    pub feature_id: String,
    pub train_count: u64,
}

impl PhraseRecord {
    pub fn new(text: Phrase, train_count: u64) -> Self {
        let feature_id = text.text();
        Self {
            text,
            feature_id,
            train_count,
        }
    }

    pub fn bucket(&self) -> FrequencyBucket {
        bucket_of(self.train_count)
    }
}

/// Train-frequency bucket of a phrase, counted from ground-truth
/// annotations only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyBucket {
    /// 0 training instances.
    ZeroShot,
    /// 1..=100 training instances.
    FewShot,
    /// More than 100 training instances.
    Common,
}

impl FrequencyBucket {
    pub const ALL: [FrequencyBucket; 3] = [
        FrequencyBucket::ZeroShot,
        FrequencyBucket::FewShot,
        FrequencyBucket::Common,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            FrequencyBucket::ZeroShot => "zero-shot",
            FrequencyBucket::FewShot => "few-shot",
            FrequencyBucket::Common => "common",
        }
    }
}

/// Bucket a ground-truth train count: `0`, `1-100`, `>100`.
pub fn bucket_of(train_count: u64) -> FrequencyBucket {
    match train_count {
        0 => FrequencyBucket::ZeroShot,
        1..=100 => FrequencyBucket::FewShot,
        _ => FrequencyBucket::Common,
    }
}
