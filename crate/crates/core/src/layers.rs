//! CCA-initialized trainable alignment layers.
//!
//! Each layer computes `h(x) = sigma .* (W (x - mu)) + b` where `mu` and
//! `sigma` come from a CCA fit and stay frozen; only `W` and `b` train.
//! The initialization snapshot `W'` is kept so fine-tuning can be anchored
//! to it with a drift penalty `lambda2 * ||W - W'||_F + ||b||_1`.

use crate::cca::{fit_cca, CcaError, CcaSolution};
use crate::{quantize_matrix, quantize_vector};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearAlignLayer {
    w: DMatrix<f64>,      // k x d, trainable
    b: DVector<f64>,      // k, trainable
    mu: DVector<f64>,     // d, frozen
    sigma: DVector<f64>,  // k, frozen
    w_init: DMatrix<f64>, // k x d, frozen snapshot
}

impl LinearAlignLayer {
    /// Build a layer with `b = 0` and `W' = W`.
    pub fn new(w: DMatrix<f64>, mu: DVector<f64>, sigma: DVector<f64>) -> Self {
        assert_eq!(w.ncols(), mu.len(), "mu must match the input dimension");
        assert_eq!(w.nrows(), sigma.len(), "sigma must match the output dimension");
        let mut w = w;
        let mut mu = mu;
        let mut sigma = sigma;
        quantize_matrix(&mut w);
        quantize_vector(&mut mu);
        quantize_vector(&mut sigma);
        let b = DVector::zeros(w.nrows());
        let w_init = w.clone();
        Self {
            w,
            b,
            mu,
            sigma,
            w_init,
        }
    }

    /// Randomly initialized layer: `mu = 0`, `sigma = 1`, scaled uniform
    /// weights. The random weights still become the drift anchor.
    pub fn random(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (1.0 / in_dim as f64).sqrt();
        let w = DMatrix::from_fn(out_dim, in_dim, |_, _| {
            (rng.random::<f64>() * 2.0 - 1.0) * scale
        });
        Self::new(w, DVector::zeros(in_dim), DVector::repeat(out_dim, 1.0))
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn w_init(&self) -> &DMatrix<f64> {
        &self.w_init
    }

    /// Trainable parameter access for the optimizer. The frozen fields
    /// have no mutable accessors.
    pub(crate) fn w_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.w
    }

    pub(crate) fn b_mut(&mut self) -> &mut DVector<f64> {
        &mut self.b
    }

    /// Rebuild a layer from persisted tensors.
    pub fn from_parts(
        w: DMatrix<f64>,
        b: DVector<f64>,
        mu: DVector<f64>,
        sigma: DVector<f64>,
        w_init: DMatrix<f64>,
    ) -> Self {
        Self {
            w,
            b,
            mu,
            sigma,
            w_init,
        }
    }

    /// `sigma .* (W (x - mu)) + b`.
    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = &self.w * (x - &self.mu);
        h.component_mul_assign(&self.sigma);
        h += &self.b;
        h
    }

    /// Forward over rows of `xs` (`n x d` in, `n x k` out).
    pub fn forward_batch(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = xs.nrows();
        let mut out = DMatrix::zeros(n, self.out_dim());
        for i in 0..n {
            let h = self.forward(&xs.row(i).transpose());
            out.row_mut(i).copy_from(&h.transpose());
        }
        out
    }

    /// Gradients for one sample given the upstream gradient on the
    /// output: `(grad_w, grad_b, grad_x)`.
    pub fn backward(
        &self,
        x: &DVector<f64>,
        grad_out: &DVector<f64>,
    ) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let scaled = grad_out.component_mul(&self.sigma);
        let grad_w = &scaled * (x - &self.mu).transpose();
        let grad_b = grad_out.clone();
        let grad_x = self.w.tr_mul(&scaled);
        (grad_w, grad_b, grad_x)
    }
}

/// Initialize a region/phrase layer pair from a CCA fit of the two views.
///
/// The region layer gets `W = Wx^T`, the phrase layer `W = Wy^T`; both use
/// their view's mean and `sigma = rho^p`. Scoring the pair by cosine
/// similarity immediately after init reproduces `cca_score`.
pub fn init_pair_from_cca(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    k: usize,
    eps: f64,
) -> Result<(LinearAlignLayer, LinearAlignLayer), CcaError> {
    let sol = fit_cca(x, y, k, eps)?;
    Ok(pair_from_solution(&sol))
}

/// Layer pair carrying an existing solution's projections.
pub fn pair_from_solution(sol: &CcaSolution) -> (LinearAlignLayer, LinearAlignLayer) {
    let scales = sol.scales();
    let region = LinearAlignLayer::new(sol.wx().transpose(), sol.mu_x().clone(), scales.clone());
    let phrase = LinearAlignLayer::new(sol.wy().transpose(), sol.mu_y().clone(), scales);
    (region, phrase)
}

/// Recursively initialize stacked layer pairs, lowest first: each level is
/// a CCA fit of the previous level's outputs.
pub fn init_stack_from_cca(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    widths: &[usize],
    eps: f64,
) -> Result<(Vec<LinearAlignLayer>, Vec<LinearAlignLayer>), CcaError> {
    assert!(!widths.is_empty(), "need at least one layer width");
    let mut region_stack = Vec::with_capacity(widths.len());
    let mut phrase_stack = Vec::with_capacity(widths.len());
    let mut cur_x = x.clone();
    let mut cur_y = y.clone();
    for &k in widths {
        let (r, p) = init_pair_from_cca(&cur_x, &cur_y, k, eps)?;
        cur_x = r.forward_batch(&cur_x);
        cur_y = p.forward_batch(&cur_y);
        region_stack.push(r);
        phrase_stack.push(p);
    }
    Ok((region_stack, phrase_stack))
}

/// Drift penalty value and subgradients.
#[derive(Debug, Clone)]
pub struct DriftPenalty {
    pub value: f64,
    pub grad_w: DMatrix<f64>,
    pub grad_b: DVector<f64>,
}

/// `lambda2 * ||W - W'||_F + ||b||_1` with exact subgradients (0 at the
/// non-smooth points `W = W'` and `b = 0`).
pub fn drift_penalty(layer: &LinearAlignLayer, lambda2: f64) -> DriftPenalty {
    assert!(lambda2 >= 0.0, "lambda2 must be non-negative");
    let delta = layer.w() - layer.w_init();
    let dist = delta.norm();
    let b_l1: f64 = layer.b().iter().map(|v| v.abs()).sum();
    let grad_w = if dist > 0.0 {
        delta * (lambda2 / dist)
    } else {
        DMatrix::zeros(delta.nrows(), delta.ncols())
    };
    let grad_b = layer.b().map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    });
    DriftPenalty {
        value: lambda2 * dist + b_l1,
        grad_w,
        grad_b,
    }
}
