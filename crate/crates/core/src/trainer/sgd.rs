//! SGD with momentum plus proximal handling of the non-smooth
//! regularizers (drift anchor and L1), keeping every parameter on the
//! f32 grid after each update.

use crate::{quantize_matrix, quantize_vector};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step_matrix(&self, param: &mut DMatrix<f64>, grad: &DMatrix<f64>, vel: &mut DMatrix<f64>) {
        *vel *= self.momentum;
        *vel += grad;
        if self.weight_decay != 0.0 {
            *vel += &*param * self.weight_decay;
        }
        *param -= &*vel * self.lr;
        quantize_matrix(param);
    }

    pub fn step_vector(&self, param: &mut DVector<f64>, grad: &DVector<f64>, vel: &mut DVector<f64>) {
        *vel *= self.momentum;
        *vel += grad;
        if self.weight_decay != 0.0 {
            *vel += &*param * self.weight_decay;
        }
        *param -= &*vel * self.lr;
        quantize_vector(param);
    }
}

/// Proximal step for `threshold * ||W - W_init||_F`: shrink the
/// displacement toward the anchor, snapping to it when the threshold
/// exceeds the distance.
pub fn prox_drift(w: &mut DMatrix<f64>, w_init: &DMatrix<f64>, threshold: f64) {
    if threshold <= 0.0 {
        return;
    }
    let delta = &*w - w_init;
    let dist = delta.norm();
    if dist <= threshold {
        w.copy_from(w_init);
    } else {
        let scale = 1.0 - threshold / dist;
        *w = w_init + delta * scale;
        quantize_matrix(w);
    }
}

/// Soft-threshold each entry by `threshold` (proximal step for L1).
pub fn prox_l1_vector(v: &mut DVector<f64>, threshold: f64) {
    if threshold <= 0.0 {
        return;
    }
    for x in v.iter_mut() {
        *x = x.signum() * (x.abs() - threshold).max(0.0);
    }
    quantize_vector(v);
}

pub fn prox_l1_matrix(m: &mut DMatrix<f64>, threshold: f64) {
    if threshold <= 0.0 {
        return;
    }
    for x in m.iter_mut() {
        *x = x.signum() * (x.abs() - threshold).max(0.0);
    }
    quantize_matrix(m);
}
