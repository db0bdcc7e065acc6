//! Forward/backward plumbing for a stack of alignment layers, shared by
//! the embedding and similarity heads.

use crate::layers::LinearAlignLayer;
use nalgebra::{DMatrix, DVector};

pub(crate) struct StackCache {
    /// Input to each layer, in order.
    pub layer_inputs: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

pub(crate) fn stack_forward(stack: &[LinearAlignLayer], x: &DVector<f64>) -> StackCache {
    let mut layer_inputs = Vec::with_capacity(stack.len());
    let mut cur = x.clone();
    for layer in stack {
        layer_inputs.push(cur.clone());
        cur = layer.forward(&cur);
    }
    StackCache {
        layer_inputs,
        output: cur,
    }
}

/// Per-layer `(grad_w, grad_b)` plus the gradient on the stack input.
pub(crate) fn stack_backward(
    stack: &[LinearAlignLayer],
    cache: &StackCache,
    grad_out: &DVector<f64>,
) -> (Vec<(DMatrix<f64>, DVector<f64>)>, DVector<f64>) {
    let mut grads = vec![None; stack.len()];
    let mut upstream = grad_out.clone();
    for (i, layer) in stack.iter().enumerate().rev() {
        let (gw, gb, gx) = layer.backward(&cache.layer_inputs[i], &upstream);
        grads[i] = Some((gw, gb));
        upstream = gx;
    }
    (grads.into_iter().map(Option::unwrap).collect(), upstream)
}

/// Accumulate per-layer gradients from one sample into running sums.
pub(crate) fn accumulate(
    sums: &mut [(DMatrix<f64>, DVector<f64>)],
    grads: &[(DMatrix<f64>, DVector<f64>)],
) {
    for (sum, grad) in sums.iter_mut().zip(grads) {
        sum.0 += &grad.0;
        sum.1 += &grad.1;
    }
}

pub(crate) fn zero_grads(stack: &[LinearAlignLayer]) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    stack
        .iter()
        .map(|l| {
            (
                DMatrix::zeros(l.out_dim(), l.in_dim()),
                DVector::zeros(l.out_dim()),
            )
        })
        .collect()
}
