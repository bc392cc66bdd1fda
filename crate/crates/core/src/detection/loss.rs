use serde::Serialize;

use super::head::FlatPredictions;
use super::targets::{AnchorTargets, Minibatch};
use crate::error::{Error, Result};
use crate::kernels::{smooth_l1, softmax_cross_entropy};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub localization: f64,
    pub total: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Mean softmax cross-entropy over the sampled anchors plus `lambda` times
/// the mean smooth-L1 (summed over the four deltas) over sampled positives.
/// Returns the loss and its gradient with respect to `pred`.
pub fn compute_loss(
    pred: &FlatPredictions,
    batch: &Minibatch,
    targets: &AnchorTargets,
    lambda: f64,
) -> Result<(LossBreakdown, FlatPredictions)> {
    if batch.is_empty() {
        return Err(Error::Loss("minibatch contains no sampled anchors".into()));
    }
    let k = pred.num_logits;
    let mut grad = FlatPredictions::zeros(pred.len(), k);
    let n_cls = batch.len() as f64;
    let mut cls = 0.0;
    for &i in batch.positives.iter().chain(&batch.negatives) {
        if i >= pred.len() {
            return Err(Error::Index(format!("sampled anchor {i} beyond {} predictions", pred.len())));
        }
        let (l, g) = softmax_cross_entropy(pred.logits_of(i), targets.classes[i])?;
        cls += l / n_cls;
        grad.logits[i * k..(i + 1) * k]
            .iter_mut()
            .zip(g)
            .for_each(|(d, v)| *d += v / n_cls);
    }
    let mut loc = 0.0;
    if !batch.positives.is_empty() {
        let n_pos = batch.positives.len() as f64;
        for &i in &batch.positives {
            let (l, g) = smooth_l1(&pred.deltas[i], &targets.deltas[i])?;
            loc += l / n_pos;
            for (d, v) in grad.deltas[i].iter_mut().zip(g) {
                *d += lambda * v / n_pos;
            }
        }
    }
    let total = cls + lambda * loc;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss (cls {cls:e}, loc {loc:e})")));
    }
    Ok((
        LossBreakdown {
            classification: cls,
            localization: loc,
            total,
            positives: batch.positives.len(),
            negatives: batch.negatives.len(),
        },
        grad,
    ))
}
