//! Small neural-net plumbing shared by the classifier heads: plain dense
//! layers, L2 normalization, and ReLU, each with an explicit backward
//! pass. Forward passes are pure; gradients are returned to the caller
//! rather than accumulated in place.

use crate::{quantize_matrix, quantize_vector};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Trainable affine map `h = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl DenseLayer {
    pub fn new(w: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(w.nrows(), b.len());
        let mut layer = Self { w, b };
        quantize_matrix(&mut layer.w);
        quantize_vector(&mut layer.b);
        layer
    }

    /// Scaled uniform init, zero bias.
    pub fn random(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (1.0 / in_dim as f64).sqrt();
        let w = DMatrix::from_fn(out_dim, in_dim, |_, _| {
            (rng.random::<f64>() * 2.0 - 1.0) * scale
        });
        Self::new(w, DVector::zeros(out_dim))
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w * x + &self.b
    }

    /// Gradients for one sample: returns `(grad_w, grad_b, grad_x)` given
    /// the upstream gradient on the output.
    pub fn backward(
        &self,
        x: &DVector<f64>,
        grad_out: &DVector<f64>,
    ) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let grad_w = grad_out * x.transpose();
        let grad_b = grad_out.clone();
        let grad_x = self.w.tr_mul(grad_out);
        (grad_w, grad_b, grad_x)
    }
}

/// Unit-normalize a vector; returns the unit vector and the original norm.
/// A zero vector is returned unchanged with norm 0.
pub fn l2_normalize(v: &DVector<f64>) -> (DVector<f64>, f64) {
    let norm = v.norm();
    if norm == 0.0 {
        (v.clone(), 0.0)
    } else {
        (v / norm, norm)
    }
}

/// Backward through `u = v / ||v||` given the gradient on `u`.
pub fn l2_normalize_backward(unit: &DVector<f64>, norm: f64, grad: &DVector<f64>) -> DVector<f64> {
    if norm == 0.0 {
        return DVector::zeros(unit.len());
    }
    (grad - unit * unit.dot(grad)) / norm
}

pub fn relu(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

/// Backward through ReLU; the subgradient at 0 is 0.
pub fn relu_backward(pre: &DVector<f64>, grad: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        pre.len(),
        pre.iter()
            .zip(grad.iter())
            .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 }),
    )
}

/// Numerically stable `log(1 + exp(z))`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Logistic sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
