//! Phrase-aware bounding-box regression: a single linear stage from the
//! fused region-phrase feature to four box deltas, trained with the
//! smooth-L1 (Huber) loss, plus the center/log-size delta codec.

use crate::datamodel::BoundingBox;
use crate::nn::DenseLayer;
use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoxDeltaError {
    #[error("box has non-positive width or height")]
    DegenerateBox,
    #[error("decoded box is invalid: {0}")]
    InvalidDecode(String),
}

/// Single fully connected stage mapping a fused feature to 4 deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct BbregHead {
    pub fc: DenseLayer,
}

impl BbregHead {
    pub fn new(fc: DenseLayer) -> Self {
        assert_eq!(fc.out_dim(), 4, "box regression emits 4 deltas");
        Self { fc }
    }

    pub fn random(in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(DenseLayer::random(4, in_dim, rng))
    }

    pub fn predict_deltas(&self, fused: &DVector<f64>) -> [f64; 4] {
        let out = self.fc.forward(fused);
        [out[0], out[1], out[2], out[3]]
    }

    /// Refine an anchor box by the predicted deltas.
    pub fn refine(
        &self,
        fused: &DVector<f64>,
        anchor: &BoundingBox,
    ) -> Result<BoundingBox, BoxDeltaError> {
        decode_box(&self.predict_deltas(fused), anchor)
    }
}

/// Huber value and derivative for each coordinate residual.
#[derive(Debug, Clone, Copy)]
pub struct SmoothL1 {
    pub value: f64,
    pub grad: [f64; 4],
}

fn huber(u: f64) -> (f64, f64) {
    if u.abs() < 1.0 {
        (0.5 * u * u, u)
    } else {
        (u.abs() - 0.5, u.signum())
    }
}

/// Smooth-L1 over the four coordinates of `t - t_star`, summed.
pub fn smooth_l1(t: &[f64; 4], t_star: &[f64; 4]) -> SmoothL1 {
    let mut value = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let (v, g) = huber(t[i] - t_star[i]);
        value += v;
        grad[i] = g;
    }
    SmoothL1 { value, grad }
}

/// Batch smooth-L1 scaled by `1 / (4 N)`.
pub fn bbreg_batch_loss(preds: &[[f64; 4]], targets: &[[f64; 4]]) -> (f64, Vec<[f64; 4]>) {
    assert_eq!(preds.len(), targets.len());
    let n = preds.len().max(1) as f64;
    let scale = 1.0 / (4.0 * n);
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (t, t_star) in preds.iter().zip(targets) {
        let sl = smooth_l1(t, t_star);
        value += sl.value;
        grads.push([
            sl.grad[0] * scale,
            sl.grad[1] * scale,
            sl.grad[2] * scale,
            sl.grad[3] * scale,
        ]);
    }
    (value * scale, grads)
}

/// Encode a box against an anchor in the center/log-size parameterization:
/// `(dx, dy, dw, dh)`.
pub fn encode_box(bounds: &BoundingBox, anchor: &BoundingBox) -> Result<[f64; 4], BoxDeltaError> {
    let (bw, bh) = (bounds.width(), bounds.height());
    let (aw, ah) = (anchor.width(), anchor.height());
    if bw <= 0.0 || bh <= 0.0 || aw <= 0.0 || ah <= 0.0 {
        return Err(BoxDeltaError::DegenerateBox);
    }
    let (bx, by) = bounds.center();
    let (ax, ay) = anchor.center();
    Ok([
        (bx - ax) / aw,
        (by - ay) / ah,
        (bw / aw).ln(),
        (bh / ah).ln(),
    ])
}

/// Inverse of [`encode_box`].
pub fn decode_box(deltas: &[f64; 4], anchor: &BoundingBox) -> Result<BoundingBox, BoxDeltaError> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(BoxDeltaError::DegenerateBox);
    }
    let (ax, ay) = anchor.center();
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].exp();
    let h = ah * deltas[3].exp();
    BoundingBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
        .map_err(|e| BoxDeltaError::InvalidDecode(e.to_string()))
}
