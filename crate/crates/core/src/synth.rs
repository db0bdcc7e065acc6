//! Synthetic two-view benchmark generator: Gaussian-mixture region and
//! phrase features organized as coarse clusters of fine-grained phrases,
//! with a long-tailed train distribution covering all three frequency
//! buckets and a balanced test set.

use crate::datamodel::{
    BoundingBox, DataError, DatasetMode, FeatureStore, GroundTruthDataset, ImageEntry, Phrase,
    PhraseAnnotation, RegionEntry, Split,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub clusters: usize,
    pub phrases_per_cluster: usize,
    pub train_regions: usize,
    pub test_regions: usize,
    pub regions_per_image: usize,
    pub region_dim: usize,
    pub phrase_dim: usize,
    pub latent_dim: usize,
    /// Spread of coarse cluster centers in latent space.
    pub cluster_spread: f64,
    /// Offset of each fine-grained phrase from its cluster center.
    pub fine_spread: f64,
    /// Latent jitter of each region instance around its phrase.
    pub instance_jitter: f64,
    pub region_noise: f64,
    pub phrase_noise: f64,
    /// Clusters whose first phrase is made common (>100 train instances).
    pub common_clusters: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clusters: 50,
            phrases_per_cluster: 5,
            train_regions: 5000,
            test_regions: 1000,
            regions_per_image: 10,
            region_dim: 32,
            phrase_dim: 24,
            latent_dim: 16,
            cluster_spread: 3.0,
            fine_spread: 1.0,
            instance_jitter: 0.4,
            region_noise: 0.1,
            phrase_noise: 0.05,
            common_clusters: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: GroundTruthDataset,
    pub test: GroundTruthDataset,
    pub regions: FeatureStore,
    pub phrases: FeatureStore,
    /// All phrases in cluster-major order.
    pub vocabulary: Vec<Phrase>,
    /// Planned train occurrences per phrase.
    pub train_counts: Vec<usize>,
}

impl SynthData {
    /// Write `train.jsonl`, `test.jsonl`, `regions.feats`, and
    /// `phrases.feats` into a directory.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.train.write_jsonl(dir.join("train.jsonl"))?;
        self.test.write_jsonl(dir.join("test.jsonl"))?;
        self.regions.write(dir.join("regions.feats"))?;
        self.phrases.write(dir.join("phrases.feats"))?;
        Ok(())
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gauss_vector(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| gauss(rng))
}

/// Plan per-phrase train counts: the first phrase of each of the first
/// `common_clusters` clusters lands in the common bucket, the last phrase
/// of every cluster is zero-shot, and the rest are few-shot. Counts are
/// nudged round-robin until they sum exactly to `train_regions`.
fn plan_train_counts(config: &SynthConfig) -> Vec<usize> {
    let per = config.phrases_per_cluster;
    let mut counts = Vec::with_capacity(config.clusters * per);
    for c in 0..config.clusters {
        for v in 0..per {
            let count = if v + 1 == per {
                0 // zero-shot
            } else if v == 0 && c < config.common_clusters {
                110 + (c * 7) % 31
            } else {
                4 + (c * 7 + v * 13) % 27
            };
            counts.push(count);
        }
    }
    let total: usize = counts.iter().sum();
    let mut delta = config.train_regions as i64 - total as i64;
    let few: Vec<usize> = (0..counts.len())
        .filter(|&i| counts[i] > 0 && counts[i] <= 100)
        .collect();
    let mut cursor = 0;
    while delta != 0 && !few.is_empty() {
        let i = few[cursor % few.len()];
        if delta > 0 && counts[i] < 100 {
            counts[i] += 1;
            delta -= 1;
        } else if delta < 0 && counts[i] > 1 {
            counts[i] -= 1;
            delta += 1;
        }
        cursor += 1;
    }
    assert_eq!(
        counts.iter().sum::<usize>(),
        config.train_regions,
        "count plan must hit the train budget exactly"
    );
    counts
}

fn grid_box(slot: usize) -> BoundingBox {
    let col = (slot % 5) as f64;
    let row = (slot / 5) as f64;
    BoundingBox::new(col * 20.0, row * 20.0, col * 20.0 + 16.0, row * 20.0 + 16.0)
        .expect("grid boxes are valid")
}

fn build_split(
    name: &str,
    instance_phrases: &[usize],
    vocabulary: &[Phrase],
    phrase_latents: &[DVector<f64>],
    proj_region: &DMatrix<f64>,
    config: &SynthConfig,
    regions: &mut FeatureStore,
    rng: &mut ChaCha8Rng,
) -> GroundTruthDataset {
    let mut order: Vec<usize> = instance_phrases.to_vec();
    use rand::seq::SliceRandom;
    order.shuffle(rng);
    let per_image = config.regions_per_image.max(1);
    let mut images = Vec::new();
    for (img_idx, chunk) in order.chunks(per_image).enumerate() {
        let image_id = format!("{name}_{img_idx:05}");
        let mut entries = Vec::with_capacity(chunk.len());
        for (slot, &phrase_idx) in chunk.iter().enumerate() {
            let latent =
                &phrase_latents[phrase_idx] + gauss_vector(rng, config.latent_dim) * config.instance_jitter;
            let feat =
                proj_region * latent + gauss_vector(rng, config.region_dim) * config.region_noise;
            let fid = crate::datamodel::region_feature_id(&image_id, slot as u32);
            regions
                .insert(fid, feat.iter().map(|&v| v as f32).collect())
                .expect("fresh region ids");
            entries.push(RegionEntry {
                bounds: grid_box(slot),
                phrases: vec![PhraseAnnotation {
                    phrase: vocabulary[phrase_idx].clone(),
                    augmented: false,
                }],
            });
        }
        images.push(ImageEntry { image_id, regions: entries });
    }
    GroundTruthDataset::new(
        if name == "train" { Split::Train } else { Split::Test },
        DatasetMode::GenomeLike,
        images,
    )
}

/// Generate the benchmark. Deterministic under the configured seed.
pub fn generate(config: &SynthConfig) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_phrases = config.clusters * config.phrases_per_cluster;

    let vocabulary: Vec<Phrase> = (0..config.clusters)
        .flat_map(|c| {
            (0..config.phrases_per_cluster)
                .map(move |v| Phrase::normalize(&format!("c{c:02}p{v}")))
        })
        .collect();

    // latent structure
    let cluster_centers: Vec<DVector<f64>> = (0..config.clusters)
        .map(|_| gauss_vector(&mut rng, config.latent_dim) * config.cluster_spread)
        .collect();
    let phrase_latents: Vec<DVector<f64>> = (0..n_phrases)
        .map(|p| {
            let c = p / config.phrases_per_cluster;
            &cluster_centers[c] + gauss_vector(&mut rng, config.latent_dim) * config.fine_spread
        })
        .collect();
    let scale = 1.0 / (config.latent_dim as f64).sqrt();
    let proj_region =
        DMatrix::from_fn(config.region_dim, config.latent_dim, |_, _| gauss(&mut rng) * scale);
    let proj_phrase =
        DMatrix::from_fn(config.phrase_dim, config.latent_dim, |_, _| gauss(&mut rng) * scale);

    let mut phrases = FeatureStore::new(config.phrase_dim);
    for (p, phrase) in vocabulary.iter().enumerate() {
        let feat = &proj_phrase * &phrase_latents[p]
            + gauss_vector(&mut rng, config.phrase_dim) * config.phrase_noise;
        phrases
            .insert(phrase.text(), feat.iter().map(|&v| v as f32).collect())
            .expect("fresh phrase ids");
    }

    let train_counts = plan_train_counts(config);
    let train_instances: Vec<usize> = train_counts
        .iter()
        .enumerate()
        .flat_map(|(p, &count)| std::iter::repeat_n(p, count))
        .collect();
    // test: even coverage of the whole vocabulary
    let base = config.test_regions / n_phrases;
    let rem = config.test_regions % n_phrases;
    let test_instances: Vec<usize> = (0..n_phrases)
        .flat_map(|p| std::iter::repeat_n(p, base + usize::from(p < rem)))
        .collect();

    let mut regions = FeatureStore::new(config.region_dim);
    let train = build_split(
        "train",
        &train_instances,
        &vocabulary,
        &phrase_latents,
        &proj_region,
        config,
        &mut regions,
        &mut rng,
    );
    let test = build_split(
        "test",
        &test_instances,
        &vocabulary,
        &phrase_latents,
        &proj_region,
        config,
        &mut regions,
        &mut rng,
    );

    SynthData {
        train,
        test,
        regions,
        phrases,
        vocabulary,
        train_counts,
    }
}
