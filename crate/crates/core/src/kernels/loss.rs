use crate::error::{Error, Result};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Index(format!(
            "label {label} outside {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = log_total - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - log_total).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Summed smooth-L1 with the usual transition at 1.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    smooth_l1_with(pred, target, 1.0)
}

/// Summed smooth-L1: `0.5 x² / β` below `β`, `|x| − 0.5 β` above.
pub fn smooth_l1_with(pred: &[f64], target: &[f64], beta: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!(
            "smooth_l1: prediction length {} != target length {}",
            pred.len(),
            target.len()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::config("smooth_l1 transition point must be positive"));
    }
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let x = p - t;
            if x.abs() < beta {
                loss += 0.5 * x * x / beta;
                x / beta
            } else {
                loss += x.abs() - 0.5 * beta;
                x.signum()
            }
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2, 5, 13] {
            let (loss, _) = softmax_cross_entropy(&vec![0.7; k], 1).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_distribution() {
        let p = softmax(&[1000.0, -3.0, 0.5, 2.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = softmax(&[0.1, -3.0, 0.5, 2.0]);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(softmax_cross_entropy(&[0.0, 1.0], 2), Err(Error::Index(_))));
    }

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0]).unwrap().0, 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0]).unwrap().0, 1.5);
        assert_eq!(smooth_l1(&[-2.0], &[0.0]).unwrap().1, vec![-1.0]);
    }
}
