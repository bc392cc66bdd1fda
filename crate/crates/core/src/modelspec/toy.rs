use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GraphSpec, LayerSpec, StageSpec};
use crate::aqm::{se_block_backward, se_block_forward, SeBlockParams, SeCache};
use crate::error::{Error, Result};
use crate::fusion::PyramidInputs;
use crate::kernels::{conv2d, conv2d_backward, relu, relu_backward, ConvParams};
use crate::params::{join, ParamSet};
use crate::tensor::Tensor;

/// Four stride-2 stages of `conv3×3 s2 → ReLU → conv3×3 → ReLU [→ SE]`.
/// The first stage doubles as the stem, so a 64×64 input yields C2..C5 at
/// 32, 16, 8 and 4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyBackboneConfig {
    pub input_channels: usize,
    pub channels: Vec<usize>,
    pub se: bool,
    pub se_reduction: usize,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self { input_channels: 3, channels: vec![16, 32, 64, 128], se: false, se_reduction: 8 }
    }
}

impl ToyBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 {
            return Err(Error::config(format!(
                "toy backbone needs exactly 4 stage widths (C2..C5), got {}",
                self.channels.len()
            )));
        }
        if self.input_channels == 0 || self.channels.contains(&0) {
            return Err(Error::config("toy backbone channel counts must be positive"));
        }
        if self.se {
            for &c in &self.channels {
                if self.se_reduction == 0 || c % self.se_reduction != 0 {
                    return Err(Error::config(format!(
                        "toy backbone: {c} channels not divisible by SE reduction {}",
                        self.se_reduction
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total downsampling of each pyramid input relative to the image.
    pub fn strides(&self) -> [usize; 4] {
        [2, 4, 8, 16]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyStage {
    pub conv_a: ConvParams,
    pub conv_b: ConvParams,
    pub se: Option<SeBlockParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone {
    pub stages: Vec<ToyStage>,
}

impl ParamSet for ToyStage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        self.conv_a.visit(&join(prefix, "conv_a"), f);
        self.conv_b.visit(&join(prefix, "conv_b"), f);
        self.se.visit(&join(prefix, "se"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        self.conv_a.visit_mut(&join(prefix, "conv_a"), f);
        self.conv_b.visit_mut(&join(prefix, "conv_b"), f);
        self.se.visit_mut(&join(prefix, "se"), f);
    }
}

impl ParamSet for ToyBackbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        self.stages.visit(&join(prefix, "stage"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        self.stages.visit_mut(&join(prefix, "stage"), f);
    }
}

impl ToyBackbone {
    pub fn channels(&self) -> [usize; 4] {
        let mut out = [0; 4];
        for (o, s) in out.iter_mut().zip(&self.stages) {
            *o = s.conv_b.out_channels();
        }
        out
    }
}

/// Kaiming-initialised weights with zero biases.
pub fn build_toy_backbone<R: Rng + ?Sized>(config: &ToyBackboneConfig, rng: &mut R) -> Result<ToyBackbone> {
    config.validate()?;
    let mut stages = Vec::with_capacity(4);
    let mut cin = config.input_channels;
    for &c in &config.channels {
        let conv_a = ConvParams::kaiming(c, cin, 3, 2, 1, rng);
        let conv_b = ConvParams::kaiming(c, c, 3, 1, 1, rng);
        let se = if config.se { Some(SeBlockParams::init(c, config.se_reduction, rng)?) } else { None };
        stages.push(ToyStage { conv_a, conv_b, se });
        cin = c;
    }
    Ok(ToyBackbone { stages })
}

struct StageCache {
    input: Tensor,
    a_pre: Tensor,
    b_pre: Tensor,
    se: Option<SeCache>,
}

pub struct ToyBackboneCache {
    stages: Vec<StageCache>,
}

pub fn toy_backbone_forward(image: &Tensor, net: &ToyBackbone) -> Result<(PyramidInputs, ToyBackboneCache)> {
    if net.stages.len() != 4 {
        return Err(Error::config(format!("toy backbone has {} stages, expected 4", net.stages.len())));
    }
    let mut x = image.clone();
    let mut outs = Vec::with_capacity(4);
    let mut caches = Vec::with_capacity(4);
    for stage in &net.stages {
        let a_pre = conv2d(&x, &stage.conv_a)?;
        let b_pre = conv2d(&relu(&a_pre), &stage.conv_b)?;
        let b = relu(&b_pre);
        let (out, se) = match &stage.se {
            Some(p) => {
                let (o, c) = se_block_forward(&b, p)?;
                (o, Some(c))
            }
            None => (b, None),
        };
        caches.push(StageCache { input: x, a_pre, b_pre, se });
        outs.push(out.clone());
        x = out;
    }
    let mut it = outs.into_iter();
    let (c2, c3, c4, c5) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok((PyramidInputs { c2, c3, c4, c5 }, ToyBackboneCache { stages: caches }))
}

/// Gradients with respect to the image and every parameter, given gradients
/// on each of C2..C5.
pub fn toy_backbone_backward(
    cache: &ToyBackboneCache,
    net: &ToyBackbone,
    grads: &PyramidInputs,
) -> Result<(Tensor, ToyBackbone)> {
    let upstream = grads.levels();
    let mut out_grads: Vec<ToyStage> = Vec::with_capacity(4);
    let mut carry: Option<Tensor> = None;
    for i in (0..4).rev() {
        let (stage, sc) = (&net.stages[i], &cache.stages[i]);
        let mut d = upstream[i].clone();
        if let Some(c) = carry.take() {
            d.add_assign(&c)?;
        }
        let (d, se_grad) = match (&stage.se, &sc.se) {
            (Some(p), Some(c)) => {
                let (dx, g) = se_block_backward(c, p, &d)?;
                (dx, Some(g))
            }
            _ => (d, None),
        };
        let d = relu_backward(&sc.b_pre, &d)?;
        let (d, gb) = conv2d_backward(&relu(&sc.a_pre), &stage.conv_b, &d)?.into_params(&stage.conv_b);
        let d = relu_backward(&sc.a_pre, &d)?;
        let (d, ga) = conv2d_backward(&sc.input, &stage.conv_a, &d)?.into_params(&stage.conv_a);
        out_grads.push(ToyStage { conv_a: ga, conv_b: gb, se: se_grad });
        carry = Some(d);
    }
    out_grads.reverse();
    Ok((carry.expect("four stages"), ToyBackbone { stages: out_grads }))
}

/// The toy backbone as a graph, for cost accounting.
pub fn toy_backbone_spec(config: &ToyBackboneConfig) -> Result<GraphSpec> {
    config.validate()?;
    let mut stages = Vec::new();
    let mut cin = config.input_channels;
    for (i, &c) in config.channels.iter().enumerate() {
        let conv = |cin, stride| LayerSpec::Conv {
            in_channels: cin,
            out_channels: c,
            kernel: 3,
            stride,
            padding: 1,
            bias: true,
            batch_norm: false,
            repeat: 1,
        };
        let mut layers = vec![conv(cin, 2), conv(c, 1)];
        if config.se {
            layers.push(LayerSpec::Se { channels: c, reduction: config.se_reduction });
        }
        stages.push(StageSpec { name: format!("C{}", i + 2), layers });
        cin = c;
    }
    Ok(GraphSpec { name: "toy".into(), input_channels: config.input_channels, stages })
}
