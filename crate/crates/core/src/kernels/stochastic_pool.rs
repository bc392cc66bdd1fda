//! Stochastic pooling over one channel plane.
//!
//! Training draws a single element with probability proportional to its
//! value; evaluation replaces the draw with its expectation `Σ y² / Σ y`.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Train,
    #[default]
    Eval,
}

/// Result of pooling one plane. `sampled` is the chosen flat index in train
/// mode, `None` in eval mode or for an all-zero plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PooledValue {
    pub value: f64,
    pub sampled: Option<usize>,
}

fn check_nonnegative(plane: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, &v) in plane.iter().enumerate() {
        if v < 0.0 || v.is_nan() {
            return Err(Error::Domain(format!(
                "stochastic pooling needs non-negative activations, element {i} is {v}"
            )));
        }
        total += v;
    }
    Ok(total)
}

pub fn stochastic_pool_channel<R: Rng + ?Sized>(plane: &[f64], rng: &mut R, mode: PoolMode) -> Result<f64> {
    stochastic_pool_channel_traced(plane, rng, mode).map(|p| p.value)
}

pub fn stochastic_pool_channel_traced<R: Rng + ?Sized>(
    plane: &[f64],
    rng: &mut R,
    mode: PoolMode,
) -> Result<PooledValue> {
    let total = check_nonnegative(plane)?;
    if total == 0.0 {
        return Ok(PooledValue {
            value: 0.0,
            sampled: None,
        });
    }
    match mode {
        PoolMode::Eval => Ok(PooledValue {
            value: plane.iter().map(|v| v * v).sum::<f64>() / total,
            sampled: None,
        }),
        PoolMode::Train => {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &v) in plane.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                acc += v;
                pick = Some(i);
                if target < acc {
                    break;
                }
            }
            let i = pick.expect("positive total implies a positive element");
            Ok(PooledValue {
                value: plane[i],
                sampled: Some(i),
            })
        }
    }
}

/// d(pooled)/d(plane) scaled by `upstream`, accumulated into `grad`.
///
/// Eval mode differentiates `Σ y² / Σ y`; train mode passes the gradient
/// straight through to the sampled element.
pub fn stochastic_pool_backward(plane: &[f64], pooled: &PooledValue, upstream: f64, grad: &mut [f64]) {
    match pooled.sampled {
        Some(i) => grad[i] += upstream,
        None => {
            let s: f64 = plane.iter().sum();
            if s == 0.0 {
                return;
            }
            let q: f64 = plane.iter().map(|v| v * v).sum();
            for (g, &y) in grad.iter_mut().zip(plane) {
                *g += upstream * (2.0 * y * s - q) / (s * s);
            }
        }
    }
}
