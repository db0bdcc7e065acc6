//! Open-vocabulary phrase detection toolkit over precomputed features.
//!
//! Everything operates on two ingested views: dense feature vectors for
//! image regions and for text phrases. The crate fits (normalized) CCA
//! alignments between the views, builds CCA-initialized trainable heads
//! (cosine pair, Deep CCA, embedding network, similarity network,
//! query-adaptive classifier), augments and samples phrase annotations,
//! and evaluates localization accuracy and detection mAP broken down by
//! phrase train-frequency buckets.
//!
//! Feature extraction, region proposal generation, and lexical databases
//! are out of scope: features, proposals, lexicons, and similarity
//! matrices all enter through the file formats in [`datamodel`] and
//! [`filter`].

pub mod augment;
pub mod cca;
pub mod datamodel;
pub mod eval;
pub mod filter;
pub mod heads;
pub mod layers;
pub mod nn;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use cca::{cca_score, dcca_objective, fit_cca, CcaSolution, SimilarityScore};
pub use datamodel::{
    bucket_of, count_train_occurrences, ingest_features, write_features, BoundingBox,
    FeatureStore, FrequencyBucket, GroundTruthDataset, Phrase,
};
pub use eval::{detection_map, iou, localization_accuracy, EvalReport};
pub use trainer::{train, AlignmentModel, TrainConfig};

/// Snap a value onto the `f32` grid.
///
/// Every persisted parameter (CCA projections, layer weights, head
/// weights) is kept on this grid so that the `f32` checkpoint format is
/// lossless and probe scores survive save/load round trips exactly.
pub(crate) fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

pub(crate) fn quantize_matrix(m: &mut nalgebra::DMatrix<f64>) {
    for v in m.iter_mut() {
        *v = quantize(*v);
    }
}

pub(crate) fn quantize_vector(v: &mut nalgebra::DVector<f64>) {
    for x in v.iter_mut() {
        *x = quantize(*x);
    }
}
