//! Training losses, built from tape primitives so their gradients are
//! covered by the same finite-difference checks as everything else.

use crate::tensor::{Graph, Result, Scalar, TensorError, TensorId};

pub const DICE_EPS: f64 = 1e-6;

/// Mean binary cross-entropy from logits over a batch, in the numerically
/// stable form `softplus(-x) + (1 - y)·x`.
pub fn bce_with_logits_mean<T: Scalar>(
    g: &mut Graph<T>,
    logits: TensorId,
    labels: &[f64],
) -> Result<TensorId> {
    if g.numel(logits) != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "bce",
            detail: format!("{} logits vs {} labels", g.numel(logits), labels.len()),
        });
    }
    let shape = g.shape(logits).to_vec();
    let one_minus_y: Vec<T> = labels.iter().map(|&y| T::from_f64(1.0 - y)).collect();
    let omy = g.constant(one_minus_y, shape)?;
    let neg = g.scale(logits, -1.0)?;
    let sp = g.softplus(neg)?;
    let lin = g.mul(omy, logits)?;
    let per = g.add(sp, lin)?;
    g.mean_all(per)
}

/// Soft Dice loss for one frame against a binary ground-truth mask:
/// `1 − (2·Σ p·g + ε) / (Σ p² + Σ g² + ε)` with `ε = 1e-6`.
/// `probs` must already be in `[0,1]`.
pub fn dice_loss_frame<T: Scalar>(
    g: &mut Graph<T>,
    probs: TensorId,
    gt_mask: &[f64],
) -> Result<TensorId> {
    if g.numel(probs) != gt_mask.len() {
        return Err(TensorError::ShapeMismatch {
            op: "dice",
            detail: format!("{} probabilities vs {} mask pixels", g.numel(probs), gt_mask.len()),
        });
    }
    let shape = g.shape(probs).to_vec();
    let gt_sq: f64 = gt_mask.iter().map(|&v| v * v).sum();
    let gt_t: Vec<T> = gt_mask.iter().map(|&v| T::from_f64(v)).collect();
    let gt = g.constant(gt_t, shape)?;
    let pg = g.mul(probs, gt)?;
    let s_pg = g.sum_all(pg)?;
    let pp = g.mul(probs, probs)?;
    let s_pp = g.sum_all(pp)?;
    let num = g.affine(s_pg, 2.0, DICE_EPS)?;
    let den = g.affine(s_pp, 1.0, gt_sq + DICE_EPS)?;
    let ratio = g.div(num, den)?;
    g.affine(ratio, -1.0, 1.0)
}

/// Per-frame Dice losses averaged over the batch. `mask_logits` is
/// `[batch, h, w]`; ground truth is one flat binary mask per frame.
pub fn dice_loss_mean<T: Scalar>(
    g: &mut Graph<T>,
    mask_logits: TensorId,
    gt_masks: &[Vec<f64>],
) -> Result<TensorId> {
    let shape = g.shape(mask_logits).to_vec();
    if shape.len() != 3 || shape[0] != gt_masks.len() {
        return Err(TensorError::ShapeMismatch {
            op: "dice",
            detail: format!("logits {shape:?} vs {} ground-truth masks", gt_masks.len()),
        });
    }
    let (batch, hw) = (shape[0], shape[1] * shape[2]);
    let flat = g.reshape(mask_logits, vec![batch, hw])?;
    let probs = g.sigmoid(flat)?;
    let mut per_frame = Vec::with_capacity(batch);
    for (f, gt) in gt_masks.iter().enumerate() {
        let p = g.slice(probs, 0, f, 1)?;
        per_frame.push(dice_loss_frame(g, p, gt)?);
    }
    let all = g.concat(&per_frame, 0)?;
    g.mean_all(all)
}

/// Dice overlap score between two binary masks under the same ε-smoothed,
/// squared-denominator convention as the loss (empty vs empty scores 1).
pub fn dice_score_binary(pred: &[u8], gt: &[u8]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mask size mismatch");
    let mut inter = 0usize;
    let mut p_sum = 0usize;
    let mut g_sum = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (usize::from(p != 0), usize::from(g != 0));
        inter += p & g;
        p_sum += p;
        g_sum += g;
    }
    (2.0 * inter as f64 + DICE_EPS) / (p_sum as f64 + g_sum as f64 + DICE_EPS)
}
