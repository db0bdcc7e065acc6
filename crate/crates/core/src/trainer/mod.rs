//! Training loop binding heads, alignment layers, the sampler, and the
//! losses, plus model assembly, checkpointing, and a finite-difference
//! gradient verification harness.
//!
//! The schedule follows a two-phase shape: CCA-initialize the alignment
//! layers, train head-only parameters first, then fine-tune everything
//! jointly with the drift penalty active. Heads whose only parameters
//! are the alignment layers train jointly from step 0. Non-smooth
//! regularizers (drift anchor, L1) are applied as proximal steps after
//! each SGD update; the `drift_penalty` operation itself carries
//! subgradients for verification.

mod checkpoint;
mod sgd;

pub use checkpoint::Checkpoint;
pub use sgd::{prox_drift, prox_l1_matrix, prox_l1_vector, Sgd};

use crate::augment::Lexicon;
use crate::cca::{cosine, fit_cca, suggested_ridge, CcaError, CcaSolution, SimilarityScore};
use crate::datamodel::{
    co_annotation_counts, region_feature_id, DataError, DatasetMode, FeatureStore,
    GroundTruthDataset, Phrase,
};
use crate::eval::iou;
use crate::heads::{
    build_confusion_table, simnet_score, ConfusionTable, EmbNetHead, HeadKind, NpaConfig, QaHead,
    SimNetHead, TripletBatch, TripletQuery,
};
use crate::layers::{drift_penalty, pair_from_solution, LinearAlignLayer};
use crate::nn::DenseLayer;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("feature id {0:?} missing from the store")]
    MissingFeature(String),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Cca(#[from] CcaError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the alignment layers start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Cca,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub init: InitKind,
    pub learning_rate: f64,
    pub steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// L1 strength on the similarity network's final stage weights.
    pub lambda1: f64,
    /// Drift strength anchoring alignment weights to their init.
    pub lambda2: f64,
    pub margin: f64,
    pub w_rr: f64,
    pub w_pp: f64,
    /// Branch widths, lowest layer first. Widths are clamped to the
    /// feasible CCA embedding size of the feature dimensions at hand.
    pub embed_dims: Vec<usize>,
    /// Width of the similarity network's product stages.
    pub stage_width: usize,
    /// Ridge for CCA fits; `None` picks `1e-4 * trace/d` of the views.
    pub cca_eps: Option<f64>,
    pub scale_exponent: f64,
    pub npa: bool,
    pub ifs: bool,
    pub seed: u64,
    /// Step at which joint fine-tuning of the alignment layers starts;
    /// `None` means half the budget for heads with separate parameters
    /// and 0 for heads that are alignment-only.
    pub joint_after: Option<usize>,
    pub npa_rebuild_period: usize,
    pub npa_capacity: usize,
    /// Hard negatives injected per sampled phrase.
    pub npa_negatives: usize,
    /// Phrase sampling budget K for augmented phrases.
    pub budget: usize,
    /// Ground-truth phrases kept per image; `None` uses the dataset-mode
    /// default (5, or 2 for ReferIt-like data).
    pub gt_subsample: Option<usize>,
    /// IoU threshold making a region a positive for a phrase.
    pub positive_iou: f64,
    /// Images pooled per Deep-CCA objective batch.
    pub dcca_images_per_batch: usize,
    /// Ridge used inside the Deep-CCA objective during training.
    pub dcca_ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Cca,
            init: InitKind::Cca,
            learning_rate: 0.05,
            steps: 500,
            momentum: 0.9,
            weight_decay: 0.0,
            lambda1: 0.05,
            lambda2: 0.1,
            margin: 0.2,
            w_rr: 0.1,
            w_pp: 0.1,
            embed_dims: vec![2048, 512],
            stage_width: 512,
            cca_eps: None,
            scale_exponent: crate::cca::DEFAULT_SCALE_EXPONENT,
            npa: false,
            ifs: true,
            seed: 0,
            joint_after: None,
            npa_rebuild_period: 10_000,
            npa_capacity: 500,
            npa_negatives: 2,
            budget: 30,
            gt_subsample: None,
            positive_iou: 0.6,
            dcca_images_per_batch: 16,
            dcca_ridge: 1e-3,
        }
    }
}

/// Cosine-scored alignment layer pair: the trainable form of the CCA
/// baseline. At initialization it reproduces `cca_score` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaPairModel {
    pub region: LinearAlignLayer,
    pub phrase: LinearAlignLayer,
    pub margin: f64,
    pub w_rr: f64,
    pub w_pp: f64,
}

impl CcaPairModel {
    pub fn score(&self, region: &DVector<f64>, phrase: &DVector<f64>) -> SimilarityScore {
        cosine(&self.region.forward(region), &self.phrase.forward(phrase))
    }
}

/// Linear feature layers trained with the minibatch correlation
/// objective, scored through a final CCA fit on their outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepCcaModel {
    pub region_fc: DenseLayer,
    pub phrase_fc: DenseLayer,
    pub k: usize,
    pub ridge: f64,
    pub solution: Option<CcaSolution>,
}

impl DeepCcaModel {
    pub fn score(&self, region: &DVector<f64>, phrase: &DVector<f64>) -> SimilarityScore {
        match &self.solution {
            Some(sol) => sol.score(
                &self.region_fc.forward(region),
                &self.phrase_fc.forward(phrase),
            ),
            None => SimilarityScore::degenerate(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlignmentHead {
    Cca(CcaPairModel),
    DeepCca(DeepCcaModel),
    EmbNet(EmbNetHead),
    SimNet(SimNetHead),
    Qa(QaHead),
}

/// A trained (or initialized) model: one region classifier head over
/// region/phrase feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub head: AlignmentHead,
}

impl AlignmentModel {
    pub fn kind(&self) -> HeadKind {
        match &self.head {
            AlignmentHead::Cca(_) => HeadKind::Cca,
            AlignmentHead::DeepCca(_) => HeadKind::DeepCca,
            AlignmentHead::EmbNet(_) => HeadKind::EmbNet,
            AlignmentHead::SimNet(_) => HeadKind::SimNet,
            AlignmentHead::Qa(_) => HeadKind::Qa,
        }
    }

    /// Relevance score for a region/phrase feature pair; higher is more
    /// confident for every head.
    pub fn score(&self, region: &DVector<f64>, phrase: &DVector<f64>) -> SimilarityScore {
        match &self.head {
            AlignmentHead::Cca(m) => m.score(region, phrase),
            AlignmentHead::DeepCca(m) => m.score(region, phrase),
            AlignmentHead::EmbNet(h) => h.score(region, phrase),
            AlignmentHead::SimNet(h) => SimilarityScore::ok(simnet_score(h, region, phrase)),
            AlignmentHead::Qa(h) => SimilarityScore::ok(h.score(phrase, region)),
        }
    }

    /// Build a cosine-pair model straight from a fitted CCA solution.
    pub fn from_cca_solution(sol: &CcaSolution, config: &TrainConfig) -> Self {
        let (region, phrase) = pair_from_solution(sol);
        Self {
            head: AlignmentHead::Cca(CcaPairModel {
                region,
                phrase,
                margin: config.margin,
                w_rr: config.w_rr,
                w_pp: config.w_pp,
            }),
        }
    }

    /// Initialize a model for the configured head from the train split.
    pub fn initialize(
        dataset: &GroundTruthDataset,
        regions: &FeatureStore,
        phrases: &FeatureStore,
        config: &TrainConfig,
    ) -> Result<Self, TrainError> {
        let (x, y) = paired_views(dataset, regions, phrases)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x1217));
        Self::initialize_from_views(&x, &y, config, &mut rng)
    }

    /// Initialize from explicit paired views (one row per positive
    /// region-phrase pair).
    pub fn initialize_from_views(
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        config: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TrainError> {
        let widths = feasible_widths(&config.embed_dims, x.ncols(), y.ncols());
        if widths.is_empty() {
            return Err(TrainError::BadConfig("embed_dims is empty".into()));
        }
        let eps = config
            .cca_eps
            .unwrap_or_else(|| suggested_ridge(x).max(suggested_ridge(y)));
        let head = match config.head {
            HeadKind::Cca => {
                let k = *widths.last().expect("non-empty");
                let (region, phrase) = match config.init {
                    InitKind::Cca => {
                        let sol = fit_cca(x, y, k, eps)?
                            .with_scale_exponent(config.scale_exponent);
                        pair_from_solution(&sol)
                    }
                    InitKind::Random => (
                        LinearAlignLayer::random(k, x.ncols(), rng),
                        LinearAlignLayer::random(k, y.ncols(), rng),
                    ),
                };
                AlignmentHead::Cca(CcaPairModel {
                    region,
                    phrase,
                    margin: config.margin,
                    w_rr: config.w_rr,
                    w_pp: config.w_pp,
                })
            }
            HeadKind::EmbNet => {
                let head = match config.init {
                    InitKind::Cca => EmbNetHead::from_cca(
                        x,
                        y,
                        &widths,
                        eps,
                        config.margin,
                        config.w_rr,
                        config.w_pp,
                    )?,
                    InitKind::Random => EmbNetHead::random(
                        x.ncols(),
                        y.ncols(),
                        &widths,
                        rng,
                        config.margin,
                        config.w_rr,
                        config.w_pp,
                    ),
                };
                AlignmentHead::EmbNet(head)
            }
            HeadKind::SimNet => {
                let head = match config.init {
                    InitKind::Cca => SimNetHead::from_cca(
                        x,
                        y,
                        &widths,
                        eps,
                        config.stage_width,
                        config.lambda1,
                        rng,
                    )?,
                    InitKind::Random => SimNetHead::random(
                        x.ncols(),
                        y.ncols(),
                        &widths,
                        config.stage_width,
                        config.lambda1,
                        rng,
                    ),
                };
                AlignmentHead::SimNet(head)
            }
            HeadKind::Qa => AlignmentHead::Qa(QaHead::random(x.ncols(), y.ncols(), rng)),
            HeadKind::DeepCca => {
                let k = *widths.last().expect("non-empty");
                let region_fc = DenseLayer::random(k.min(x.ncols()), x.ncols(), rng);
                let phrase_fc = DenseLayer::random(k.min(y.ncols()), y.ncols(), rng);
                let mut model = DeepCcaModel {
                    region_fc,
                    phrase_fc,
                    k: k.min(x.ncols()).min(y.ncols()),
                    ridge: config.dcca_ridge,
                    solution: None,
                };
                refit_deep_cca(&mut model, x, y, eps, config.scale_exponent)?;
                AlignmentHead::DeepCca(model)
            }
        };
        Ok(Self { head })
    }

    /// Serialize into the checkpoint tensor/JSON layout.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let (head_name, head_params) = match &self.head {
            AlignmentHead::Cca(m) => (
                "cca",
                json!({"margin": m.margin, "w_rr": m.w_rr, "w_pp": m.w_pp}),
            ),
            AlignmentHead::DeepCca(m) => (
                "deep_cca",
                json!({
                    "k": m.k,
                    "ridge": m.ridge,
                    "scale_exponent": m.solution.as_ref().map(|s| s.scale_exponent()),
                }),
            ),
            AlignmentHead::EmbNet(h) => (
                "embnet",
                json!({"margin": h.margin, "w_rr": h.w_rr, "w_pp": h.w_pp}),
            ),
            AlignmentHead::SimNet(h) => ("simnet", json!({"lambda1": h.lambda1})),
            AlignmentHead::Qa(_) => ("qa", json!({})),
        };
        let mut ckpt = Checkpoint::new(json!({
            "format": 1u32,
            "kind": "model",
            "head": head_name,
            "head_params": head_params,
        }));
        match &self.head {
            AlignmentHead::Cca(m) => {
                push_layer(&mut ckpt, "region.0", &m.region);
                push_layer(&mut ckpt, "phrase.0", &m.phrase);
            }
            AlignmentHead::DeepCca(m) => {
                ckpt.push_matrix("region_fc.w", &m.region_fc.w);
                ckpt.push_vector("region_fc.b", &m.region_fc.b);
                ckpt.push_matrix("phrase_fc.w", &m.phrase_fc.w);
                ckpt.push_vector("phrase_fc.b", &m.phrase_fc.b);
                if let Some(sol) = &m.solution {
                    push_solution(&mut ckpt, sol);
                }
            }
            AlignmentHead::EmbNet(h) => {
                for (i, layer) in h.region_stack.iter().enumerate() {
                    push_layer(&mut ckpt, &format!("region.{i}"), layer);
                }
                for (i, layer) in h.phrase_stack.iter().enumerate() {
                    push_layer(&mut ckpt, &format!("phrase.{i}"), layer);
                }
            }
            AlignmentHead::SimNet(h) => {
                for (i, layer) in h.region_stack.iter().enumerate() {
                    push_layer(&mut ckpt, &format!("region.{i}"), layer);
                }
                for (i, layer) in h.phrase_stack.iter().enumerate() {
                    push_layer(&mut ckpt, &format!("phrase.{i}"), layer);
                }
                for (i, stage) in h.stages.iter().enumerate() {
                    ckpt.push_matrix(format!("stage.{i}.w"), &stage.w);
                    ckpt.push_vector(format!("stage.{i}.b"), &stage.b);
                }
            }
            AlignmentHead::Qa(h) => {
                ckpt.push_matrix("qa.wc", h.wc());
            }
        }
        ckpt
    }

    /// Restore a model from a checkpoint. A `cca_solution` checkpoint
    /// (the `fit-cca` output) loads as a cosine pair model.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let kind = ckpt.config["kind"].as_str().unwrap_or_default();
        if kind == "cca_solution" {
            let sol = solution_from_checkpoint(ckpt)?;
            return Ok(Self::from_cca_solution(&sol, &TrainConfig::default()));
        }
        if kind != "model" {
            return Err(TrainError::CheckpointFormat(format!(
                "unknown checkpoint kind {kind:?}"
            )));
        }
        let params = &ckpt.config["head_params"];
        let head = match ckpt.config["head"].as_str().unwrap_or_default() {
            "cca" => AlignmentHead::Cca(CcaPairModel {
                region: layer_from(ckpt, "region.0")?,
                phrase: layer_from(ckpt, "phrase.0")?,
                margin: params["margin"].as_f64().unwrap_or(0.2),
                w_rr: params["w_rr"].as_f64().unwrap_or(0.1),
                w_pp: params["w_pp"].as_f64().unwrap_or(0.1),
            }),
            "deep_cca" => {
                let solution = if ckpt.matrix("cca.wx").is_ok() {
                    Some(solution_from_tensors(
                        ckpt,
                        params["scale_exponent"]
                            .as_f64()
                            .unwrap_or(crate::cca::DEFAULT_SCALE_EXPONENT),
                    )?)
                } else {
                    None
                };
                AlignmentHead::DeepCca(DeepCcaModel {
                    region_fc: DenseLayer::new(
                        ckpt.matrix("region_fc.w")?.clone(),
                        ckpt.vector("region_fc.b")?,
                    ),
                    phrase_fc: DenseLayer::new(
                        ckpt.matrix("phrase_fc.w")?.clone(),
                        ckpt.vector("phrase_fc.b")?,
                    ),
                    k: params["k"].as_u64().unwrap_or(0) as usize,
                    ridge: params["ridge"].as_f64().unwrap_or(1e-3),
                    solution,
                })
            }
            "embnet" => AlignmentHead::EmbNet(EmbNetHead {
                region_stack: stack_from(ckpt, "region")?,
                phrase_stack: stack_from(ckpt, "phrase")?,
                margin: params["margin"].as_f64().unwrap_or(0.2),
                w_rr: params["w_rr"].as_f64().unwrap_or(0.1),
                w_pp: params["w_pp"].as_f64().unwrap_or(0.1),
            }),
            "simnet" => {
                let mut stages = Vec::new();
                let mut i = 0;
                while ckpt.matrix(&format!("stage.{i}.w")).is_ok() {
                    stages.push(DenseLayer::new(
                        ckpt.matrix(&format!("stage.{i}.w"))?.clone(),
                        ckpt.vector(&format!("stage.{i}.b"))?,
                    ));
                    i += 1;
                }
                AlignmentHead::SimNet(SimNetHead {
                    region_stack: stack_from(ckpt, "region")?,
                    phrase_stack: stack_from(ckpt, "phrase")?,
                    stages,
                    lambda1: params["lambda1"].as_f64().unwrap_or(0.05),
                })
            }
            "qa" => AlignmentHead::Qa(QaHead::new(ckpt.matrix("qa.wc")?.clone())),
            other => {
                return Err(TrainError::CheckpointFormat(format!(
                    "unknown head {other:?}"
                )))
            }
        };
        Ok(Self { head })
    }
}

fn feasible_widths(embed_dims: &[usize], d_x: usize, d_y: usize) -> Vec<usize> {
    let mut cap = d_x.min(d_y);
    embed_dims
        .iter()
        .map(|&w| {
            let clamped = w.min(cap).max(1);
            cap = clamped;
            clamped
        })
        .collect()
}

fn push_layer(ckpt: &mut Checkpoint, prefix: &str, layer: &LinearAlignLayer) {
    ckpt.push_matrix(format!("{prefix}.w"), layer.w());
    ckpt.push_vector(format!("{prefix}.b"), layer.b());
    ckpt.push_vector(format!("{prefix}.mu"), layer.mu());
    ckpt.push_vector(format!("{prefix}.sigma"), layer.sigma());
    ckpt.push_matrix(format!("{prefix}.w_init"), layer.w_init());
}

fn layer_from(ckpt: &Checkpoint, prefix: &str) -> Result<LinearAlignLayer, TrainError> {
    Ok(LinearAlignLayer::from_parts(
        ckpt.matrix(&format!("{prefix}.w"))?.clone(),
        ckpt.vector(&format!("{prefix}.b"))?,
        ckpt.vector(&format!("{prefix}.mu"))?,
        ckpt.vector(&format!("{prefix}.sigma"))?,
        ckpt.matrix(&format!("{prefix}.w_init"))?.clone(),
    ))
}

fn stack_from(ckpt: &Checkpoint, prefix: &str) -> Result<Vec<LinearAlignLayer>, TrainError> {
    let mut stack = Vec::new();
    let mut i = 0;
    while ckpt.matrix(&format!("{prefix}.{i}.w")).is_ok() {
        stack.push(layer_from(ckpt, &format!("{prefix}.{i}"))?);
        i += 1;
    }
    if stack.is_empty() {
        return Err(TrainError::CheckpointFormat(format!(
            "no layers under prefix {prefix:?}"
        )));
    }
    Ok(stack)
}

fn push_solution(ckpt: &mut Checkpoint, sol: &CcaSolution) {
    ckpt.push_matrix("cca.wx", sol.wx());
    ckpt.push_matrix("cca.wy", sol.wy());
    ckpt.push_vector("cca.correlations", sol.correlations());
    ckpt.push_vector("cca.mu_x", sol.mu_x());
    ckpt.push_vector("cca.mu_y", sol.mu_y());
}

fn solution_from_tensors(ckpt: &Checkpoint, scale_exponent: f64) -> Result<CcaSolution, TrainError> {
    Ok(CcaSolution::from_parts(
        ckpt.matrix("cca.wx")?.clone(),
        ckpt.matrix("cca.wy")?.clone(),
        ckpt.vector("cca.correlations")?,
        ckpt.vector("cca.mu_x")?,
        ckpt.vector("cca.mu_y")?,
        scale_exponent,
    ))
}

/// Persist a standalone CCA solution (the `fit-cca` artifact).
pub fn solution_checkpoint(sol: &CcaSolution) -> Checkpoint {
    let mut ckpt = Checkpoint::new(json!({
        "format": 1u32,
        "kind": "cca_solution",
        "scale_exponent": sol.scale_exponent(),
    }));
    push_solution(&mut ckpt, sol);
    ckpt
}

pub fn solution_from_checkpoint(ckpt: &Checkpoint) -> Result<CcaSolution, TrainError> {
    let p = ckpt.config["scale_exponent"]
        .as_f64()
        .unwrap_or(crate::cca::DEFAULT_SCALE_EXPONENT);
    solution_from_tensors(ckpt, p)
}

/// Stack the positive region-phrase pairs of a dataset into paired view
/// matrices (one row per annotation, augmented included).
pub fn paired_views(
    dataset: &GroundTruthDataset,
    regions: &FeatureStore,
    phrases: &FeatureStore,
) -> Result<(DMatrix<f64>, DMatrix<f64>), TrainError> {
    let mut xs: Vec<DVector<f64>> = Vec::new();
    let mut ys: Vec<DVector<f64>> = Vec::new();
    for image in &dataset.images {
        for (idx, region) in image.regions.iter().enumerate() {
            if region.phrases.is_empty() {
                continue;
            }
            let rid = region_feature_id(&image.image_id, idx as u32);
            let rvec = regions
                .vector(&rid)
                .ok_or(TrainError::MissingFeature(rid))?;
            for ann in &region.phrases {
                let pid = ann.phrase.text();
                let pvec = phrases
                    .vector(&pid)
                    .ok_or(TrainError::MissingFeature(pid))?;
                xs.push(rvec.clone());
                ys.push(pvec);
            }
        }
    }
    if xs.is_empty() {
        return Err(TrainError::BadConfig(
            "dataset has no annotated region-phrase pairs".into(),
        ));
    }
    let to_matrix = |rows: &[DVector<f64>]| {
        let mut m = DMatrix::zeros(rows.len(), rows[0].len());
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from(&r.transpose());
        }
        m
    };
    Ok((to_matrix(&xs), to_matrix(&ys)))
}

fn refit_deep_cca(
    model: &mut DeepCcaModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    eps: f64,
    scale_exponent: f64,
) -> Result<(), TrainError> {
    let hx = batch_forward(&model.region_fc, x);
    let hy = batch_forward(&model.phrase_fc, y);
    let sol = fit_cca(&hx, &hy, model.k, eps.max(model.ridge))?
        .with_scale_exponent(scale_exponent);
    model.solution = Some(sol);
    Ok(())
}

fn batch_forward(layer: &DenseLayer, rows: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.nrows(), layer.out_dim());
    for i in 0..rows.nrows() {
        let h = layer.forward(&rows.row(i).transpose());
        out.row_mut(i).copy_from(&h.transpose());
    }
    out
}

struct ImageContext {
    region_feats: Vec<DVector<f64>>,
    /// phrase -> positive region indices at the configured IoU.
    positives: std::collections::BTreeMap<Phrase, Vec<usize>>,
    sampler_phrases: Vec<crate::sampler::ImagePhrase>,
    /// (region index, phrase) positive pairs in dataset order.
    positive_pairs: Vec<(usize, Phrase)>,
}

struct TrainContext {
    images: Vec<ImageContext>,
    phrase_vectors: std::collections::BTreeMap<Phrase, DVector<f64>>,
    likelihoods: std::collections::BTreeMap<Phrase, f64>,
}

fn build_context(
    dataset: &GroundTruthDataset,
    regions: &FeatureStore,
    phrases: &FeatureStore,
    config: &TrainConfig,
) -> Result<TrainContext, TrainError> {
    let likelihoods = crate::sampler::phrase_pair_likelihoods(dataset);
    let mut phrase_vectors = std::collections::BTreeMap::new();
    for phrase in likelihoods.keys() {
        let pid = phrase.text();
        let pvec = phrases
            .vector(&pid)
            .ok_or(TrainError::MissingFeature(pid))?;
        phrase_vectors.insert(phrase.clone(), pvec);
    }
    let mut images = Vec::with_capacity(dataset.images.len());
    for image in &dataset.images {
        let mut region_feats = Vec::with_capacity(image.regions.len());
        for idx in 0..image.regions.len() {
            let rid = region_feature_id(&image.image_id, idx as u32);
            region_feats.push(
                regions
                    .vector(&rid)
                    .ok_or(TrainError::MissingFeature(rid))?,
            );
        }
        // ground-truth boxes per phrase in this image
        let mut boxes: std::collections::BTreeMap<&Phrase, Vec<usize>> =
            std::collections::BTreeMap::new();
        let mut positive_pairs = Vec::new();
        for (idx, region) in image.regions.iter().enumerate() {
            for ann in &region.phrases {
                boxes.entry(&ann.phrase).or_default().push(idx);
                positive_pairs.push((idx, ann.phrase.clone()));
            }
        }
        let mut positives = std::collections::BTreeMap::new();
        for (phrase, annotated) in &boxes {
            let mut pos: Vec<usize> = Vec::new();
            for (idx, region) in image.regions.iter().enumerate() {
                let is_pos = annotated
                    .iter()
                    .any(|&a| iou(&image.regions[a].bounds, &region.bounds) >= config.positive_iou);
                if is_pos {
                    pos.push(idx);
                }
            }
            positives.insert((*phrase).clone(), pos);
        }
        // sampler view: a phrase is ground truth for the image if it has
        // any non-augmented annotation here
        let mut status: std::collections::BTreeMap<&Phrase, bool> =
            std::collections::BTreeMap::new();
        for region in &image.regions {
            for ann in &region.phrases {
                let e = status.entry(&ann.phrase).or_insert(ann.augmented);
                *e = *e && ann.augmented;
            }
        }
        let sampler_phrases = status
            .into_iter()
            .map(|(phrase, augmented)| crate::sampler::ImagePhrase {
                phrase: phrase.clone(),
                augmented,
                likelihood: likelihoods.get(phrase).copied().unwrap_or(1e-9),
            })
            .collect();
        images.push(ImageContext {
            region_feats,
            positives,
            sampler_phrases,
            positive_pairs,
        });
    }
    Ok(TrainContext {
        images,
        phrase_vectors,
        likelihoods,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    /// Total loss (data term plus regularizer values) per step.
    pub history: Vec<f64>,
    /// Triplet queries skipped for lacking positives or negatives.
    pub skipped_queries: usize,
    /// Confusion table rebuilds that happened.
    pub confusion_rebuilds: usize,
}

struct LayerVel {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

impl LayerVel {
    fn zeros(layer: &LinearAlignLayer) -> Self {
        Self {
            w: DMatrix::zeros(layer.out_dim(), layer.in_dim()),
            b: DVector::zeros(layer.out_dim()),
        }
    }

    fn zeros_dense(layer: &DenseLayer) -> Self {
        Self {
            w: DMatrix::zeros(layer.out_dim(), layer.in_dim()),
            b: DVector::zeros(layer.out_dim()),
        }
    }
}

fn step_layer(
    sgd: &Sgd,
    layer: &mut LinearAlignLayer,
    grads: &(DMatrix<f64>, DVector<f64>),
    vel: &mut LayerVel,
    lambda2: f64,
) {
    sgd.step_matrix(layer.w_mut(), &grads.0, &mut vel.w);
    sgd.step_vector(layer.b_mut(), &grads.1, &mut vel.b);
    let w_init = layer.w_init().clone();
    prox_drift(layer.w_mut(), &w_init, sgd.lr * lambda2);
    prox_l1_vector(layer.b_mut(), sgd.lr);
}

fn drift_value(stacks: &[&[LinearAlignLayer]], lambda2: f64) -> f64 {
    stacks
        .iter()
        .flat_map(|s| s.iter())
        .map(|l| drift_penalty(l, lambda2).value)
        .sum()
}

/// Run the SGD training loop on an initialized model.
///
/// Deterministic under a fixed seed. The history records the per-step
/// loss (data term plus regularizer values). A non-finite loss aborts
/// with the step index before applying that step's update, leaving the
/// model at its last finite state.
pub fn train(
    model: &mut AlignmentModel,
    dataset: &GroundTruthDataset,
    regions: &FeatureStore,
    phrases: &FeatureStore,
    lexicon: Option<&Lexicon>,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if !config.learning_rate.is_finite() || config.learning_rate < 0.0 {
        return Err(TrainError::BadConfig(
            "learning rate must be finite and non-negative".into(),
        ));
    }
    let ctx = build_context(dataset, regions, phrases, config)?;
    if ctx.images.is_empty() {
        return Err(TrainError::BadConfig("dataset has no images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sampler_config = crate::sampler::SamplerConfig {
        budget: config.budget,
        gt_subsample: config.gt_subsample.unwrap_or(match dataset.mode {
            DatasetMode::ReferItLike => 2,
            _ => 5,
        }),
        strategy: if config.ifs {
            crate::sampler::AugSampling::InverseFrequency
        } else {
            crate::sampler::AugSampling::Uniform
        },
        seed: config.seed,
    };
    let sgd = Sgd {
        lr: config.learning_rate,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let joint_after = config.joint_after.unwrap_or(match model.head {
        AlignmentHead::SimNet(_) => config.steps / 2,
        _ => 0,
    });

    let mut outcome = TrainOutcome::default();
    let mut confusion: Option<ConfusionTable> = None;
    let cooccurrence = if config.npa {
        co_annotation_counts(dataset)
    } else {
        Default::default()
    };
    let empty_lexicon = Lexicon::new();
    let lexicon = lexicon.unwrap_or(&empty_lexicon);

    // velocities, mirroring the trainable structure of each head
    let mut vel_stacks: (Vec<LayerVel>, Vec<LayerVel>) = match &model.head {
        AlignmentHead::Cca(m) => (
            vec![LayerVel::zeros(&m.region)],
            vec![LayerVel::zeros(&m.phrase)],
        ),
        AlignmentHead::EmbNet(h) => (
            h.region_stack.iter().map(LayerVel::zeros).collect(),
            h.phrase_stack.iter().map(LayerVel::zeros).collect(),
        ),
        AlignmentHead::SimNet(h) => (
            h.region_stack.iter().map(LayerVel::zeros).collect(),
            h.phrase_stack.iter().map(LayerVel::zeros).collect(),
        ),
        _ => (Vec::new(), Vec::new()),
    };
    let mut vel_stages: Vec<LayerVel> = match &model.head {
        AlignmentHead::SimNet(h) => h.stages.iter().map(LayerVel::zeros_dense).collect(),
        _ => Vec::new(),
    };
    let mut vel_qa: Option<DMatrix<f64>> = match &model.head {
        AlignmentHead::Qa(h) => Some(DMatrix::zeros(h.wc().nrows(), h.wc().ncols())),
        _ => None,
    };
    let mut vel_dcca: Option<(LayerVel, LayerVel)> = match &model.head {
        AlignmentHead::DeepCca(m) => Some((
            LayerVel::zeros_dense(&m.region_fc),
            LayerVel::zeros_dense(&m.phrase_fc),
        )),
        _ => None,
    };

    let n_images = ctx.images.len();
    let mut order: Vec<usize> = (0..n_images).collect();
    for step in 0..config.steps {
        if step % n_images == 0 {
            order.shuffle(&mut rng);
        }

        // periodic confusion table rebuild for the pair-label heads
        let npa_applicable = matches!(
            model.head,
            AlignmentHead::SimNet(_) | AlignmentHead::Qa(_)
        );
        if config.npa && npa_applicable && step % config.npa_rebuild_period.max(1) == 0 {
            confusion = Some(rebuild_confusion(model, &ctx, lexicon, &cooccurrence, config));
            outcome.confusion_rebuilds += 1;
        }

        let image = &ctx.images[order[step % n_images]];
        let sampled = crate::sampler::sample_image_batch(
            &image.sampler_phrases,
            &sampler_config,
            &mut rng,
        );
        if sampled.is_empty() {
            outcome.history.push(0.0);
            continue;
        }
        let joint = step >= joint_after;

        let loss = match &mut model.head {
            AlignmentHead::Cca(m) => {
                let batch = triplet_batch(image, &ctx, &sampled);
                let (data_loss, skipped, g_region, g_phrase) =
                    crate::heads::embnet::batch_backward_with(
                        std::slice::from_ref(&m.region),
                        std::slice::from_ref(&m.phrase),
                        m.margin,
                        m.w_rr,
                        m.w_pp,
                        &batch,
                    );
                outcome.skipped_queries += skipped;
                let penalty = drift_value(
                    &[
                        std::slice::from_ref(&m.region),
                        std::slice::from_ref(&m.phrase),
                    ],
                    config.lambda2,
                );
                let total = data_loss + penalty;
                if !total.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step });
                }
                step_layer(&sgd, &mut m.region, &g_region[0], &mut vel_stacks.0[0], config.lambda2);
                step_layer(&sgd, &mut m.phrase, &g_phrase[0], &mut vel_stacks.1[0], config.lambda2);
                total
            }
            AlignmentHead::EmbNet(h) => {
                let batch = triplet_batch(image, &ctx, &sampled);
                let (data_loss, skipped, g_region, g_phrase) =
                    crate::heads::embnet::embnet_batch_backward(h, &batch);
                outcome.skipped_queries += skipped;
                let penalty =
                    drift_value(&[&h.region_stack, &h.phrase_stack], config.lambda2);
                let total = data_loss + penalty;
                if !total.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step });
                }
                for (i, g) in g_region.iter().enumerate() {
                    step_layer(&sgd, &mut h.region_stack[i], g, &mut vel_stacks.0[i], config.lambda2);
                }
                for (i, g) in g_phrase.iter().enumerate() {
                    step_layer(&sgd, &mut h.phrase_stack[i], g, &mut vel_stacks.1[i], config.lambda2);
                }
                total
            }
            AlignmentHead::SimNet(h) => {
                let pairs = labeled_pairs(
                    image,
                    &ctx,
                    &sampled,
                    confusion.as_ref(),
                    config.npa_negatives,
                    -1.0,
                );
                let (mut data_loss, mut g_stages, mut g_region, mut g_phrase) =
                    crate::heads::simnet::simnet_batch_backward(h, &pairs);
                // the logistic loss is a sum over the batch; normalize the
                // step by the pair count so the step size is batch-invariant
                let inv = 1.0 / pairs.len().max(1) as f64;
                data_loss *= inv;
                for g in g_stages.iter_mut().chain(&mut g_region).chain(&mut g_phrase) {
                    g.0 *= inv;
                    g.1 *= inv;
                }
                let last = h.stages.len() - 1;
                let l1_value: f64 =
                    h.lambda1 * h.stages[last].w.iter().map(|v| v.abs()).sum::<f64>();
                let penalty = drift_value(&[&h.region_stack, &h.phrase_stack], config.lambda2);
                let total = data_loss + l1_value + penalty;
                if !total.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step });
                }
                for (i, g) in g_stages.iter().enumerate() {
                    sgd.step_matrix(&mut h.stages[i].w, &g.0, &mut vel_stages[i].w);
                    sgd.step_vector(&mut h.stages[i].b, &g.1, &mut vel_stages[i].b);
                }
                prox_l1_matrix(&mut h.stages[last].w, sgd.lr * h.lambda1);
                if joint {
                    for (i, g) in g_region.iter().enumerate() {
                        step_layer(&sgd, &mut h.region_stack[i], g, &mut vel_stacks.0[i], config.lambda2);
                    }
                    for (i, g) in g_phrase.iter().enumerate() {
                        step_layer(&sgd, &mut h.phrase_stack[i], g, &mut vel_stacks.1[i], config.lambda2);
                    }
                }
                total
            }
            AlignmentHead::Qa(h) => {
                let pairs = labeled_pairs(
                    image,
                    &ctx,
                    &sampled,
                    confusion.as_ref(),
                    config.npa_negatives,
                    0.0,
                );
                let (data_loss, grad_wc) = crate::heads::qa::qa_batch_backward(h, &pairs);
                if !data_loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step });
                }
                let vel = vel_qa.as_mut().expect("qa velocity");
                sgd.step_matrix(h.wc_mut(), &grad_wc, vel);
                data_loss
            }
            AlignmentHead::DeepCca(m) => {
                // pool positive pairs from a window of images
                let mut raw_x: Vec<DVector<f64>> = Vec::new();
                let mut raw_y: Vec<DVector<f64>> = Vec::new();
                for offset in 0..config.dcca_images_per_batch.max(1) {
                    let img = &ctx.images[order[(step + offset) % n_images]];
                    for (ridx, phrase) in &img.positive_pairs {
                        raw_x.push(img.region_feats[*ridx].clone());
                        raw_y.push(ctx.phrase_vectors[phrase].clone());
                    }
                }
                if raw_x.len() < 2 {
                    outcome.history.push(0.0);
                    continue;
                }
                let to_matrix = |rows: &[DVector<f64>], d: usize| {
                    let mut mat = DMatrix::zeros(rows.len(), d);
                    for (i, r) in rows.iter().enumerate() {
                        mat.row_mut(i).copy_from(&r.transpose());
                    }
                    mat
                };
                let x_raw = to_matrix(&raw_x, raw_x[0].len());
                let y_raw = to_matrix(&raw_y, raw_y[0].len());
                let hx = batch_forward(&m.region_fc, &x_raw);
                let hy = batch_forward(&m.phrase_fc, &y_raw);
                let out =
                    crate::cca::dcca_objective(&hx, &hy, m.ridge, m.ridge, m.k)?;
                let loss = -out.corr;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step });
                }
                // descend on -corr: accumulate negated row gradients
                let mut gw_r = DMatrix::zeros(m.region_fc.out_dim(), m.region_fc.in_dim());
                let mut gb_r = DVector::zeros(m.region_fc.out_dim());
                for i in 0..x_raw.nrows() {
                    let g = -out.grad_x.row(i).transpose();
                    gw_r += &g * x_raw.row(i);
                    gb_r += g;
                }
                let mut gw_p = DMatrix::zeros(m.phrase_fc.out_dim(), m.phrase_fc.in_dim());
                let mut gb_p = DVector::zeros(m.phrase_fc.out_dim());
                for i in 0..y_raw.nrows() {
                    let g = -out.grad_y.row(i).transpose();
                    gw_p += &g * y_raw.row(i);
                    gb_p += g;
                }
                let (vr, vp) = vel_dcca.as_mut().expect("dcca velocity");
                sgd.step_matrix(&mut m.region_fc.w, &gw_r, &mut vr.w);
                sgd.step_vector(&mut m.region_fc.b, &gb_r, &mut vr.b);
                sgd.step_matrix(&mut m.phrase_fc.w, &gw_p, &mut vp.w);
                sgd.step_vector(&mut m.phrase_fc.b, &gb_p, &mut vp.b);
                loss
            }
        };
        outcome.history.push(loss);
    }

    // Deep CCA scores through a final CCA fit over the trained features.
    if let AlignmentHead::DeepCca(m) = &mut model.head {
        let (x, y) = paired_views(dataset, regions, phrases)?;
        let eps = config
            .cca_eps
            .unwrap_or_else(|| suggested_ridge(&x).max(suggested_ridge(&y)));
        refit_deep_cca(m, &x, &y, eps, config.scale_exponent)?;
    }
    Ok(outcome)
}

fn triplet_batch(image: &ImageContext, ctx: &TrainContext, sampled: &[Phrase]) -> TripletBatch {
    TripletBatch {
        regions: image.region_feats.clone(),
        queries: sampled
            .iter()
            .filter_map(|p| {
                let positives = image.positives.get(p)?.clone();
                Some(TripletQuery {
                    phrase: ctx.phrase_vectors[p].clone(),
                    positives,
                })
            })
            .collect(),
    }
}

/// Labeled (region, phrase, label) pairs: positives get +1, every other
/// image region gets `negative_label`, and confusion-table hard negatives
/// are scored against the phrase's positive regions.
fn labeled_pairs(
    image: &ImageContext,
    ctx: &TrainContext,
    sampled: &[Phrase],
    confusion: Option<&ConfusionTable>,
    npa_negatives: usize,
    negative_label: f64,
) -> Vec<(DVector<f64>, DVector<f64>, f64)> {
    let mut pairs = Vec::new();
    for phrase in sampled {
        let Some(positives) = image.positives.get(phrase) else {
            continue;
        };
        let pvec = &ctx.phrase_vectors[phrase];
        for (idx, rvec) in image.region_feats.iter().enumerate() {
            let label = if positives.contains(&idx) {
                1.0
            } else {
                negative_label
            };
            pairs.push((rvec.clone(), pvec.clone(), label));
        }
        if let Some(table) = confusion {
            for (neg_phrase, _) in table.hard_negatives(phrase).iter().take(npa_negatives) {
                if let Some(nvec) = ctx.phrase_vectors.get(neg_phrase) {
                    for &ridx in positives {
                        pairs.push((
                            image.region_feats[ridx].clone(),
                            nvec.clone(),
                            negative_label,
                        ));
                    }
                }
            }
        }
    }
    pairs
}

const NPA_SAMPLE_PHRASES: usize = 50;
const NPA_REGIONS_PER_PHRASE: usize = 8;

fn rebuild_confusion(
    model: &AlignmentModel,
    ctx: &TrainContext,
    lexicon: &Lexicon,
    cooccurrence: &std::collections::BTreeMap<(Phrase, Phrase), u64>,
    config: &TrainConfig,
) -> ConfusionTable {
    // most frequent phrases first, deterministic tie-break
    let mut ranked: Vec<(&Phrase, f64)> = ctx
        .likelihoods
        .iter()
        .map(|(p, l)| (p, *l))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(b.0)));
    let sample: Vec<&Phrase> = ranked
        .into_iter()
        .take(NPA_SAMPLE_PHRASES)
        .map(|(p, _)| p)
        .collect();

    let mut positive_regions: std::collections::BTreeMap<Phrase, Vec<DVector<f64>>> =
        Default::default();
    for phrase in &sample {
        let mut feats = Vec::new();
        for image in &ctx.images {
            if let Some(pos) = image.positives.get(phrase) {
                for &idx in pos {
                    feats.push(image.region_feats[idx].clone());
                    if feats.len() >= NPA_REGIONS_PER_PHRASE {
                        break;
                    }
                }
            }
            if feats.len() >= NPA_REGIONS_PER_PHRASE {
                break;
            }
        }
        if !feats.is_empty() {
            positive_regions.insert((*phrase).clone(), feats);
        }
    }
    let score = |phrase: &Phrase, region: &DVector<f64>| -> f64 {
        ctx.phrase_vectors
            .get(phrase)
            .map(|pvec| model.score(region, pvec).value)
            .unwrap_or(f64::NEG_INFINITY)
    };
    build_confusion_table(
        &positive_regions,
        &score,
        lexicon,
        cooccurrence,
        &NpaConfig {
            capacity: config.npa_capacity,
            rebuild_period: config.npa_rebuild_period,
            cooccurrence_threshold: 1,
        },
    )
}

/// Result of a finite-difference gradient verification run.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the loss is locally non-smooth there.
    pub skipped: usize,
}

/// Central-difference check of `analytic` against the loss evaluator
/// over a random subset of parameter coordinates. Coordinates where the
/// one-sided differences disagree (a kink) are skipped, not failed.
pub fn grad_check<F>(
    mut f: F,
    params: &mut [DMatrix<f64>],
    analytic: &[DMatrix<f64>],
    step: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheckReport
where
    F: FnMut(&[DMatrix<f64>]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut report = GradCheckReport::default();
    if params.is_empty() {
        return report;
    }
    let f0 = f(params);
    for _ in 0..samples {
        let t = rng.random_range(0..params.len());
        let (rows, cols) = params[t].shape();
        if rows * cols == 0 {
            continue;
        }
        let (i, j) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let orig = params[t][(i, j)];
        params[t][(i, j)] = orig + step;
        let fp = f(params);
        params[t][(i, j)] = orig - step;
        let fm = f(params);
        params[t][(i, j)] = orig;

        let fwd = (fp - f0) / step;
        let bwd = (f0 - fm) / step;
        if (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs()).max(1e-3) {
            report.skipped += 1;
            continue;
        }
        let central = (fp - fm) / (2.0 * step);
        let exact = analytic[t][(i, j)];
        let rel = (central - exact).abs() / central.abs().max(exact.abs()).max(1e-8);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    report
}
