//! Optional second stage: proposals are pooled to a fixed grid with
//! bilinear crop-and-resize and re-scored by two hidden fully-connected
//! layers. Gradients stop at the pooled features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::boxes::Bbox;
use crate::error::{Error, Result};
use crate::kernels::{fully_connected, fully_connected_backward, FcParams};
use crate::params::{join, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub enabled: bool,
    pub hidden: usize,
    pub pool_size: usize,
    /// Proposals per image fed to the second stage while training.
    pub proposals: usize,
    pub fg_iou: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            hidden: 1024,
            pool_size: 7,
            proposals: 32,
            fg_iou: 0.5,
        }
    }
}

/// Bilinear samples at the centres of a `size × size` grid over `bbox`,
/// taken from batch item `n` of a feature map with the given stride.
/// Returns `C · size²` values, channel-major.
pub fn crop_and_resize(feature: &Tensor, n: usize, bbox: &Bbox, stride: f64, size: usize) -> Vec<f64> {
    let s = feature.shape();
    let (x0, y0) = (bbox.x1 / stride, bbox.y1 / stride);
    let bw = bbox.width().max(0.0) / stride / size as f64;
    let bh = bbox.height().max(0.0) / stride / size as f64;
    let clampf = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
    let mut out = Vec::with_capacity(s.c * size * size);
    for c in 0..s.c {
        let plane = feature.plane(n, c);
        for i in 0..size {
            let y = clampf(y0 + (i as f64 + 0.5) * bh - 0.5, s.h);
            let (ya, fy) = (y.floor() as usize, y - y.floor());
            let yb = (ya + 1).min(s.h - 1);
            for j in 0..size {
                let x = clampf(x0 + (j as f64 + 0.5) * bw - 0.5, s.w);
                let (xa, fx) = (x.floor() as usize, x - x.floor());
                let xb = (xa + 1).min(s.w - 1);
                let top = plane[ya * s.w + xa] * (1.0 - fx) + plane[ya * s.w + xb] * fx;
                let bottom = plane[yb * s.w + xa] * (1.0 - fx) + plane[yb * s.w + xb] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Pyramid level whose anchor base size is closest to the box scale in log space.
pub fn assign_level(bbox: &Bbox, base_sizes: &[f64]) -> usize {
    let scale = bbox.area().max(1e-12).sqrt().ln();
    let mut best = 0;
    for (i, b) in base_sizes.iter().enumerate() {
        if (b.ln() - scale).abs() < (base_sizes[best].ln() - scale).abs() {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineParams {
    pub fc1: FcParams,
    pub fc2: FcParams,
    pub cls: FcParams,
    pub reg: FcParams,
}

impl RefineParams {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, num_logits: usize, rng: &mut R) -> Self {
        let mut cls = FcParams::zeros(num_logits, hidden);
        let mut reg = FcParams::zeros(4, hidden);
        cls.weights = crate::linalg::Matrix::random_normal(num_logits, hidden, 0.01, rng);
        reg.weights = crate::linalg::Matrix::random_normal(4, hidden, 0.001, rng);
        Self {
            fc1: FcParams::kaiming(hidden, input, rng),
            fc2: FcParams::kaiming(hidden, hidden, rng),
            cls,
            reg,
        }
    }
}

impl ParamSet for RefineParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.cls.visit(&join(prefix, "cls"), f);
        self.reg.visit(&join(prefix, "reg"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.cls.visit_mut(&join(prefix, "cls"), f);
        self.reg.visit_mut(&join(prefix, "reg"), f);
    }
}

#[derive(Clone, Debug)]
pub struct RefineCache {
    input: Vec<f64>,
    h1_pre: Vec<f64>,
    h2_pre: Vec<f64>,
}

fn relu_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

fn fc(v: &[f64], p: &FcParams) -> Result<Vec<f64>> {
    fully_connected(v, &p.weights, &p.bias)
}

/// Logits and box deltas for one pooled proposal.
pub fn refine_forward(pooled: &[f64], params: &RefineParams) -> Result<(Vec<f64>, [f64; 4], RefineCache)> {
    if pooled.len() != params.fc1.in_features() {
        return Err(Error::dim(format!(
            "refine head: pooled feature of length {} but first layer expects {}",
            pooled.len(),
            params.fc1.in_features()
        )));
    }
    let h1_pre = fc(pooled, &params.fc1)?;
    let h2_pre = fc(&relu_vec(&h1_pre), &params.fc2)?;
    let h2 = relu_vec(&h2_pre);
    let logits = fc(&h2, &params.cls)?;
    let d = fc(&h2, &params.reg)?;
    Ok((
        logits,
        [d[0], d[1], d[2], d[3]],
        RefineCache {
            input: pooled.to_vec(),
            h1_pre,
            h2_pre,
        },
    ))
}

fn mask(grad: Vec<f64>, pre: &[f64]) -> Vec<f64> {
    grad.into_iter().zip(pre).map(|(g, &p)| if p > 0.0 { g } else { 0.0 }).collect()
}

/// Parameter gradients for one proposal, to be summed over a batch.
pub fn refine_backward(cache: &RefineCache, params: &RefineParams, d_logits: &[f64], d_deltas: &[f64; 4]) -> Result<RefineParams> {
    let h2 = relu_vec(&cache.h2_pre);
    let (dh_cls, g_cls) = fully_connected_backward(&h2, &params.cls.weights, d_logits)?.into_params();
    let (dh_reg, g_reg) = fully_connected_backward(&h2, &params.reg.weights, d_deltas)?.into_params();
    let dh2: Vec<f64> = dh_cls.iter().zip(&dh_reg).map(|(a, b)| a + b).collect();
    let d2 = mask(dh2, &cache.h2_pre);
    let h1 = relu_vec(&cache.h1_pre);
    let (dh1, g_fc2) = fully_connected_backward(&h1, &params.fc2.weights, &d2)?.into_params();
    let d1 = mask(dh1, &cache.h1_pre);
    let (_, g_fc1) = fully_connected_backward(&cache.input, &params.fc1.weights, &d1)?.into_params();
    Ok(RefineParams {
        fc1: g_fc1,
        fc2: g_fc2,
        cls: g_cls,
        reg: g_reg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_of_constant_map_is_constant() {
        let t = Tensor::filled([1, 2, 6, 6], 1.5);
        let b = Bbox::new(3.0, 5.0, 20.0, 11.0).unwrap();
        let v = crop_and_resize(&t, 0, &b, 4.0, 7);
        assert_eq!(v.len(), 2 * 49);
        assert!(v.iter().all(|&x| (x - 1.5).abs() < 1e-15));
    }

    #[test]
    fn crop_reproduces_linear_ramp() {
        let mut t = Tensor::zeros([1, 1, 8, 8]);
        for y in 0..8 {
            for x in 0..8 {
                *t.at_mut(0, 0, y, x) = x as f64;
            }
        }
        // box spanning feature pixels [1, 5) in x: bin centres at 1.5, 2.5, 3.5, 4.5 minus half a pixel
        let b = Bbox::new(1.0, 1.0, 5.0, 5.0).unwrap();
        let v = crop_and_resize(&t, 0, &b, 1.0, 4);
        assert_eq!(&v[..4], &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn level_assignment_by_scale() {
        let bases = [32.0, 64.0, 128.0, 512.0, 1024.0];
        assert_eq!(assign_level(&Bbox::from_center(0.0, 0.0, 30.0, 30.0), &bases), 0);
        assert_eq!(assign_level(&Bbox::from_center(0.0, 0.0, 300.0, 300.0), &bases), 3);
    }
}
