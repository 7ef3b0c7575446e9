//! Losses and input transforms of the explanation baselines: a separate
//! attention predictor whose map masks the policy input, and a gated
//! Q-network whose own saliency is pulled toward the trainer's boxes.

use crate::augment::SaliencyMask;
use crate::error::{Error, Result};
use crate::nn::{cast, Maps, Scalar};

/// Weight of the explanation term in the attention-alignment objective.
pub const ATTENTION_ALIGN_WEIGHT: f64 = 0.1;

/// Mean squared difference between a predicted map and a binary mask.
pub fn explanation_loss(predicted: &[f64], mask: &SaliencyMask) -> Result<f64> {
    let bits = mask.bits();
    if predicted.len() != bits.len() {
        return Err(Error::LengthMismatch {
            expected: bits.len(),
            got: predicted.len(),
        });
    }
    let sum: f64 = predicted
        .iter()
        .zip(bits)
        .map(|(&p, &m)| {
            let d = p - if m { 1.0 } else { 0.0 };
            d * d
        })
        .sum();
    Ok(sum / bits.len() as f64)
}

/// Explanation loss over a batch of `[1, n * 84 * 84]` maps, averaged over
/// every pixel of every sample, and its gradient with respect to the maps.
pub fn explanation_loss_grad<T: Scalar>(predicted: &Maps<T>, masks: &[&SaliencyMask]) -> Result<(f64, Maps<T>)> {
    let plane = predicted.plane();
    if predicted.channels() != 1 || masks.len() != predicted.n {
        return Err(Error::ShapeMismatch(format!(
            "{} map channel(s) for {} sample(s) vs {} mask(s)",
            predicted.channels(),
            predicted.n,
            masks.len()
        )));
    }
    if masks.iter().any(|m| m.bits().len() != plane) {
        return Err(Error::ShapeMismatch("mask size differs from map plane".into()));
    }
    let total = (plane * masks.len()) as f64;
    let mut grad = Maps::zeros(1, predicted.n, predicted.h, predicted.w);
    let src = predicted.data.as_slice().expect("contiguous");
    let dst = grad.data.as_slice_mut().expect("contiguous");
    let mut loss = 0.0;
    for (b, mask) in masks.iter().enumerate() {
        for (i, &m) in mask.bits().iter().enumerate() {
            let p = src[b * plane + i].to_f64().expect("finite");
            let d = p - if m { 1.0 } else { 0.0 };
            loss += d * d;
            dst[b * plane + i] = cast(2.0 * d / total);
        }
    }
    Ok((loss / total, grad))
}

/// Policy input of the attention-masked baseline: `0.5 * (s + s * m)`, the
/// same map applied to every stacked frame.
pub fn mask_input<T: Scalar>(states: &Maps<T>, attention: &Maps<T>) -> Result<Maps<T>> {
    if attention.channels() != 1 || attention.data.ncols() != states.data.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "attention {:?} vs states {:?}",
            attention.data.dim(),
            states.data.dim()
        )));
    }
    let half: T = cast(0.5);
    let mut out = states.clone();
    let m = attention.data.row(0);
    for mut row in out.data.rows_mut() {
        ndarray::Zip::from(&mut row).and(&m).for_each(|s, &a| *s = half * (*s + *s * a));
    }
    Ok(out)
}

/// Attention-alignment objective: DQN + advantage + weighted explanation.
pub fn attention_align_total(dqn: f64, advantage: f64, explanation: f64, weight: f64) -> f64 {
    dqn + advantage + weight * explanation
}

/// Binarize a predicted map at 0.5 and compare with a mask.
pub fn map_iou(predicted: &[f32], mask: &SaliencyMask) -> f64 {
    let pred = SaliencyMask::from_bits(predicted.iter().map(|&v| v >= 0.5).collect()).expect("84x84 map");
    pred.iou(mask)
}
