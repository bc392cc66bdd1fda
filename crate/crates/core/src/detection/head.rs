//! Shared region-proposal head: a 3×3 conv with ReLU followed by two 1×1
//! branches, applied with the same weights to every pyramid level.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{conv2d, conv2d_backward, relu, relu_backward, ConvParams};
use crate::params::{join, ParamSet};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub shared: ConvParams,
    pub cls: ConvParams,
    pub reg: ConvParams,
    pub anchors_per_cell: usize,
    /// Logits per anchor, background included (2 for plain objectness).
    pub num_logits: usize,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, anchors_per_cell: usize, num_logits: usize, rng: &mut R) -> Self {
        let mut cls = ConvParams::zeros(anchors_per_cell * num_logits, channels, 1, 1, 0);
        let mut reg = ConvParams::zeros(anchors_per_cell * 4, channels, 1, 1, 0);
        cls.weights = Tensor::random_normal(cls.weights.shape(), 0.01, rng);
        reg.weights = Tensor::random_normal(reg.weights.shape(), 0.01, rng);
        Self {
            shared: ConvParams::kaiming(channels, channels, 3, 1, 1, rng),
            cls,
            reg,
            anchors_per_cell,
            num_logits,
        }
    }

    pub fn zeros(channels: usize, anchors_per_cell: usize, num_logits: usize) -> Self {
        Self {
            shared: ConvParams::zeros(channels, channels, 3, 1, 1),
            cls: ConvParams::zeros(anchors_per_cell * num_logits, channels, 1, 1, 0),
            reg: ConvParams::zeros(anchors_per_cell * 4, channels, 1, 1, 0),
            anchors_per_cell,
            num_logits,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.shared.in_channels()
    }

    fn check(&self, level: usize, x: &Tensor) -> Result<()> {
        if x.shape().c != self.in_channels() {
            return Err(Error::dim(format!(
                "head: level {level} has {} channels, head expects {}",
                x.shape().c,
                self.in_channels()
            )));
        }
        if self.cls.out_channels() != self.anchors_per_cell * self.num_logits
            || self.reg.out_channels() != self.anchors_per_cell * 4
        {
            return Err(Error::config(format!(
                "head: branch widths {} / {} do not match {} anchors x ({} logits | 4 deltas)",
                self.cls.out_channels(),
                self.reg.out_channels(),
                self.anchors_per_cell,
                self.num_logits
            )));
        }
        Ok(())
    }
}

impl ParamSet for HeadParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        self.shared.visit(&join(prefix, "shared"), f);
        self.cls.visit(&join(prefix, "cls"), f);
        self.reg.visit(&join(prefix, "reg"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        self.shared.visit_mut(&join(prefix, "shared"), f);
        self.cls.visit_mut(&join(prefix, "cls"), f);
        self.reg.visit_mut(&join(prefix, "reg"), f);
    }
}

/// Raw head outputs of one level: logits `(N, A·K, h, w)`, deltas `(N, A·4, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPrediction {
    pub logits: Tensor,
    pub deltas: Tensor,
}

impl LevelPrediction {
    pub fn zeros_like(&self) -> Self {
        Self {
            logits: Tensor::zeros(self.logits.shape()),
            deltas: Tensor::zeros(self.deltas.shape()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    inputs: Vec<Tensor>,
    hidden_pre: Vec<Tensor>,
    hidden: Vec<Tensor>,
}

pub fn head_forward(levels: &[Tensor], params: &HeadParams) -> Result<Vec<LevelPrediction>> {
    head_forward_traced(levels, params).map(|(p, _)| p)
}

pub fn head_forward_traced(levels: &[Tensor], params: &HeadParams) -> Result<(Vec<LevelPrediction>, HeadCache)> {
    let mut preds = Vec::with_capacity(levels.len());
    let mut cache = HeadCache {
        inputs: levels.to_vec(),
        hidden_pre: Vec::with_capacity(levels.len()),
        hidden: Vec::with_capacity(levels.len()),
    };
    for (i, x) in levels.iter().enumerate() {
        params.check(i, x)?;
        let pre = conv2d(x, &params.shared)?;
        let h = relu(&pre);
        preds.push(LevelPrediction {
            logits: conv2d(&h, &params.cls)?,
            deltas: conv2d(&h, &params.reg)?,
        });
        cache.hidden_pre.push(pre);
        cache.hidden.push(h);
    }
    Ok((preds, cache))
}

/// Gradients for every input level and for the shared head parameters,
/// summed over levels.
pub fn head_backward(
    cache: &HeadCache,
    params: &HeadParams,
    grads: &[LevelPrediction],
) -> Result<(Vec<Tensor>, HeadParams)> {
    if grads.len() != cache.inputs.len() {
        return Err(Error::dim(format!(
            "head backward: {} gradient levels for {} inputs",
            grads.len(),
            cache.inputs.len()
        )));
    }
    let mut g_params = params.clone();
    g_params.zero();
    let mut d_inputs = Vec::with_capacity(grads.len());
    let add = |into: &mut ConvParams, g: ConvParams| {
        let mut acc = into.flatten();
        acc.iter_mut().zip(g.flatten()).for_each(|(a, b)| *a += b);
        into.unflatten(&acc);
    };
    for (i, g) in grads.iter().enumerate() {
        let h = &cache.hidden[i];
        let (dh_cls, g_cls) = conv2d_backward(h, &params.cls, &g.logits)?.into_params(&params.cls);
        let (mut dh, g_reg) = conv2d_backward(h, &params.reg, &g.deltas)?.into_params(&params.reg);
        dh.add_assign(&dh_cls)?;
        let d_pre = relu_backward(&cache.hidden_pre[i], &dh)?;
        let (dx, g_shared) = conv2d_backward(&cache.inputs[i], &params.shared, &d_pre)?.into_params(&params.shared);
        add(&mut g_params.cls, g_cls);
        add(&mut g_params.reg, g_reg);
        add(&mut g_params.shared, g_shared);
        d_inputs.push(dx);
    }
    Ok((d_inputs, g_params))
}

/// Per-anchor predictions of one image across all levels, in anchor order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatPredictions {
    pub num_logits: usize,
    /// `anchors × num_logits`, row-major.
    pub logits: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

impl FlatPredictions {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn logits_of(&self, anchor: usize) -> &[f64] {
        &self.logits[anchor * self.num_logits..(anchor + 1) * self.num_logits]
    }

    pub fn zeros(anchors: usize, num_logits: usize) -> Self {
        Self {
            num_logits,
            logits: vec![0.0; anchors * num_logits],
            deltas: vec![[0.0; 4]; anchors],
        }
    }
}

fn anchors_in(shape: Shape, per_cell_channels: usize, what: usize) -> usize {
    shape.h * shape.w * (per_cell_channels / what)
}

/// Gathers batch item `n` into anchor order: level by level, then cell
/// `(y, x)` row-major, then anchor shape `a`.
pub fn flatten_predictions(preds: &[LevelPrediction], n: usize, anchors_per_cell: usize) -> FlatPredictions {
    let k = preds.first().map_or(0, |p| p.logits.shape().c / anchors_per_cell);
    let total: usize = preds.iter().map(|p| anchors_in(p.deltas.shape(), p.deltas.shape().c, 4)).sum();
    let mut out = FlatPredictions {
        num_logits: k,
        logits: Vec::with_capacity(total * k),
        deltas: Vec::with_capacity(total),
    };
    for p in preds {
        let s = p.logits.shape();
        for y in 0..s.h {
            for x in 0..s.w {
                for a in 0..anchors_per_cell {
                    for j in 0..k {
                        out.logits.push(p.logits.at(n, a * k + j, y, x));
                    }
                    let mut d = [0.0; 4];
                    for (j, v) in d.iter_mut().enumerate() {
                        *v = p.deltas.at(n, a * 4 + j, y, x);
                    }
                    out.deltas.push(d);
                }
            }
        }
    }
    out
}

/// Inverse of [`flatten_predictions`]: adds `flat` into batch item `n` of `grads`.
pub fn scatter_predictions(flat: &FlatPredictions, n: usize, anchors_per_cell: usize, grads: &mut [LevelPrediction]) {
    let k = flat.num_logits;
    let mut idx = 0;
    for g in grads.iter_mut() {
        let s = g.logits.shape();
        for y in 0..s.h {
            for x in 0..s.w {
                for a in 0..anchors_per_cell {
                    for j in 0..k {
                        *g.logits.at_mut(n, a * k + j, y, x) += flat.logits[idx * k + j];
                    }
                    for j in 0..4 {
                        *g.deltas.at_mut(n, a * 4 + j, y, x) += flat.deltas[idx][j];
                    }
                    idx += 1;
                }
            }
        }
    }
}
