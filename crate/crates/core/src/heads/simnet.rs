//! Similarity network: branch projections fused by elementwise product,
//! fed through fully connected stages to a single similarity logit,
//! trained with a logistic loss plus L1 on the final stage's weights.

use super::branch::{accumulate, stack_backward, stack_forward, zero_grads};
use crate::cca::CcaError;
use crate::layers::{init_stack_from_cca, LinearAlignLayer};
use crate::nn::{relu, relu_backward, sigmoid, softplus, DenseLayer};
use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SimNetHead {
    pub region_stack: Vec<LinearAlignLayer>,
    pub phrase_stack: Vec<LinearAlignLayer>,
    /// Product stages; all but the last apply ReLU, the last is linear
    /// with a single output.
    pub stages: Vec<DenseLayer>,
    pub lambda1: f64,
}

impl SimNetHead {
    /// CCA-initialized branches, randomly initialized product stages.
    pub fn from_cca(
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        widths: &[usize],
        eps: f64,
        stage_width: usize,
        lambda1: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, CcaError> {
        let (region_stack, phrase_stack) = init_stack_from_cca(x, y, widths, eps)?;
        let embed = *widths.last().expect("non-empty widths");
        Ok(Self {
            region_stack,
            phrase_stack,
            stages: Self::random_stages(embed, stage_width, rng),
            lambda1,
        })
    }

    pub fn random(
        region_dim: usize,
        phrase_dim: usize,
        widths: &[usize],
        stage_width: usize,
        lambda1: f64,
        rng: &mut ChaCha8Rng,
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
        let embed = *widths.last().expect("non-empty widths");
        Self {
            region_stack,
            phrase_stack,
            stages: Self::random_stages(embed, stage_width, rng),
            lambda1,
        }
    }

    fn random_stages(embed: usize, stage_width: usize, rng: &mut ChaCha8Rng) -> Vec<DenseLayer> {
        vec![
            DenseLayer::random(stage_width, embed, rng),
            DenseLayer::random(stage_width, stage_width, rng),
            DenseLayer::random(1, stage_width, rng),
        ]
    }

    /// Forward from an already fused (elementwise product) vector.
    pub fn score_fused(&self, fused: &DVector<f64>) -> f64 {
        let mut cur = fused.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            cur = stage.forward(&cur);
            if i + 1 < self.stages.len() {
                cur = relu(&cur);
            }
        }
        cur[0]
    }

    pub fn score(&self, region: &DVector<f64>, phrase: &DVector<f64>) -> f64 {
        let er = stack_forward(&self.region_stack, region).output;
        let ep = stack_forward(&self.phrase_stack, phrase).output;
        self.score_fused(&er.component_mul(&ep))
    }
}

/// Similarity logit for a region/phrase pair; probability is
/// `logistic(logit)`.
pub fn simnet_score(head: &SimNetHead, region: &DVector<f64>, phrase: &DVector<f64>) -> f64 {
    head.score(region, phrase)
}

pub fn simnet_probability(logit: f64) -> f64 {
    sigmoid(logit)
}

/// Logistic loss value with gradients on the logits and the regularized
/// weight vector.
#[derive(Debug, Clone)]
pub struct LogisticLoss {
    pub value: f64,
    pub grad_logits: Vec<f64>,
    /// Subgradient of the L1 term on the conditional weights.
    pub grad_reg: DMatrix<f64>,
}

/// `sum_i log(1 + exp(-l_i c_i)) + lambda1 ||a||_1` for labels in
/// `{-1, +1}`. The L1 subgradient is 0 at zero entries.
pub fn simnet_loss(
    logits: &[f64],
    labels: &[f64],
    lambda1: f64,
    reg_weights: &DMatrix<f64>,
) -> LogisticLoss {
    assert_eq!(logits.len(), labels.len());
    assert!(
        labels.iter().all(|l| *l == 1.0 || *l == -1.0),
        "labels must be -1 or +1"
    );
    let mut value = 0.0;
    let mut grad_logits = Vec::with_capacity(logits.len());
    for (&c, &l) in logits.iter().zip(labels) {
        value += softplus(-l * c);
        grad_logits.push(-l * sigmoid(-l * c));
    }
    value += lambda1 * reg_weights.iter().map(|v| v.abs()).sum::<f64>();
    let grad_reg = reg_weights.map(|v| {
        if v > 0.0 {
            lambda1
        } else if v < 0.0 {
            -lambda1
        } else {
            0.0
        }
    });
    LogisticLoss {
        value,
        grad_logits,
        grad_reg,
    }
}

/// Parameter gradients of the data term over a batch of labeled pairs.
///
/// Returns the data-term loss (without the L1 penalty), per-stage grads,
/// and per-branch-layer grads.
#[allow(clippy::type_complexity)]
pub(crate) fn simnet_batch_backward(
    head: &SimNetHead,
    pairs: &[(DVector<f64>, DVector<f64>, f64)],
) -> (
    f64,
    Vec<(DMatrix<f64>, DVector<f64>)>,
    Vec<(DMatrix<f64>, DVector<f64>)>,
    Vec<(DMatrix<f64>, DVector<f64>)>,
) {
    let mut stage_grads: Vec<(DMatrix<f64>, DVector<f64>)> = head
        .stages
        .iter()
        .map(|s| {
            (
                DMatrix::zeros(s.out_dim(), s.in_dim()),
                DVector::zeros(s.out_dim()),
            )
        })
        .collect();
    let mut region_grads = zero_grads(&head.region_stack);
    let mut phrase_grads = zero_grads(&head.phrase_stack);
    let mut value = 0.0;

    for (region, phrase, label) in pairs {
        let rc = stack_forward(&head.region_stack, region);
        let pc = stack_forward(&head.phrase_stack, phrase);
        let fused = rc.output.component_mul(&pc.output);

        // stage forward with caches
        let mut inputs = Vec::with_capacity(head.stages.len());
        let mut pres = Vec::with_capacity(head.stages.len());
        let mut cur = fused.clone();
        for (i, stage) in head.stages.iter().enumerate() {
            inputs.push(cur.clone());
            let pre = stage.forward(&cur);
            pres.push(pre.clone());
            cur = if i + 1 < head.stages.len() {
                relu(&pre)
            } else {
                pre
            };
        }
        let logit = cur[0];
        value += softplus(-label * logit);
        let dlogit = -label * sigmoid(-label * logit);

        let mut upstream = DVector::from_element(1, dlogit);
        for i in (0..head.stages.len()).rev() {
            if i + 1 < head.stages.len() {
                upstream = relu_backward(&pres[i], &upstream);
            }
            let (gw, gb, gx) = head.stages[i].backward(&inputs[i], &upstream);
            stage_grads[i].0 += &gw;
            stage_grads[i].1 += &gb;
            upstream = gx;
        }
        // upstream is now the gradient on the fused product
        let grad_er = upstream.component_mul(&pc.output);
        let grad_ep = upstream.component_mul(&rc.output);
        let (g_r, _) = stack_backward(&head.region_stack, &rc, &grad_er);
        accumulate(&mut region_grads, &g_r);
        let (g_p, _) = stack_backward(&head.phrase_stack, &pc, &grad_ep);
        accumulate(&mut phrase_grads, &g_p);
    }
    (value, stage_grads, region_grads, phrase_grads)
}
