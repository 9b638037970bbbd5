//! Loss functions. The per-element closed forms live here as plain slice math
//! returning (value, gradient); the tape ops in `graph` call these at record
//! time and stash the gradient for backward.

use crate::error::Result;
use crate::graph::{Graph, Var};

pub const BCE_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

/// Lovász hinge: a convex surrogate for the Jaccard loss of a binary mask.
///
/// Labels are +-1. Hinge margins m_i = max(0, 1 - logit_i * y_i) are sorted
/// descending (ties broken by index), and the loss is the dot product of the
/// sorted margins with the discrete gradient of the Jaccard extension along
/// that order. An empty intersection-over-union (no positives, no errors)
/// counts as Jaccard 0, so the loss of a perfect all-negative prediction is 0.
///
/// Returns the loss and d(loss)/d(logit) with the permutation treated as
/// constant, which is the standard subgradient.
pub fn lovasz_hinge_with_grad(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len();
    assert_eq!(labels.len(), n);
    if n == 0 {
        return (0.0, Vec::new());
    }
    let margins: Vec<f64> = logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| (1.0 - l * y).max(0.0))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        margins[b].partial_cmp(&margins[a]).unwrap().then(a.cmp(&b))
    });

    let p = labels.iter().filter(|&&y| y > 0.0).count() as f64;
    // Jaccard of the prefix where the t highest-margin pixels are counted as
    // errors: intersection loses the positive errors, union gains the
    // negative ones.
    let mut grad_sorted = vec![0.0; n];
    let mut pos_seen = 0.0;
    let mut neg_seen = 0.0;
    let mut prev_j = 0.0;
    for (t, &i) in order.iter().enumerate() {
        if labels[i] > 0.0 {
            pos_seen += 1.0;
        } else {
            neg_seen += 1.0;
        }
        let inter = p - pos_seen;
        let union = p + neg_seen;
        let jac = if union == 0.0 { 0.0 } else { 1.0 - inter / union };
        grad_sorted[t] = jac - prev_j;
        prev_j = jac;
    }

    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for (t, &i) in order.iter().enumerate() {
        loss += margins[i] * grad_sorted[t];
        if margins[i] > 0.0 {
            grad[i] = -labels[i] * grad_sorted[t];
        }
    }
    (loss, grad)
}

/// Mean binary cross entropy on probabilities, clamped away from {0, 1}.
/// Gradient is zero where the clamp is active.
pub fn bce_with_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len();
    assert_eq!(target.len(), n);
    let (lo, hi) = (BCE_CLAMP, 1.0 - BCE_CLAMP);
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let p = pred[i].clamp(lo, hi);
        let t = target[i];
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        if pred[i] > lo && pred[i] < hi {
            grad[i] = (-t / p + (1.0 - t) / (1.0 - p)) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Soft Dice loss on probabilities: 1 - (2 * intersection + s) / (sums + s).
pub fn dice_with_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len();
    assert_eq!(target.len(), n);
    let s = DICE_SMOOTH;
    let mut inter = 0.0;
    let mut pa = 0.0;
    let mut ta = 0.0;
    for i in 0..n {
        inter += pred[i] * target[i];
        pa += pred[i];
        ta += target[i];
    }
    let denom = pa + ta + s;
    let loss = 1.0 - (2.0 * inter + s) / denom;
    let grad: Vec<f64> = target
        .iter()
        .map(|&t| -(2.0 * t * denom - (2.0 * inter + s)) / (denom * denom))
        .collect();
    (loss, grad)
}

/// Mean absolute error between the seed map and its regression target.
pub fn seed_loss(g: &mut Graph, seed: Var, target: Var) -> Result<Var> {
    let d = g.sub(seed, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Mean of per-candidate mask losses; `terms` holds one scalar per candidate.
/// Empty candidate sets contribute a zero constant so a training step with no
/// seeds still has a well-formed loss.
pub fn mean_of_terms(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(g.constant_scalar(0.0));
    }
    let total = g.add_n(terms)?;
    Ok(g.scale(total, 1.0 / terms.len() as f64))
}
