//! The trainable detector for every ablation mode: toy backbone, neck
//! (single map, unfused pyramid, or fusion with optional gating) and the
//! shared anchor head.

use lffn_core::aqm::{aqm_backward, aqm_forward_traced, AqmCache, AqmParams};
use lffn_core::detection::{
    generate_pyramid_anchors, head_backward, head_forward_traced, Bbox, HeadCache, HeadParams, LevelPrediction,
};
use lffn_core::fusion::{
    build_pyramid_backward, build_pyramid_forward, FusionConfig, FusionParams, PyramidCache, PyramidInputs, PyramidOutputs,
};
use lffn_core::kernels::{conv2d, conv2d_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, ConvParams, PoolMode};
use lffn_core::modelspec::{build_toy_backbone, toy_backbone_backward, toy_backbone_forward, ToyBackbone, ToyBackboneCache};
use lffn_core::params::{join, ParamSet};
use lffn_core::tensor::Shape;
use lffn_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AblationMode, RunConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub mode: AblationMode,
    pub backbone: ToyBackbone,
    pub fusion: Option<FusionParams>,
    pub fusion_config: FusionConfig,
    /// 1×1 projections: one on C5 for single-map, one per C level for the
    /// unfused pyramid.
    pub laterals: Vec<ConvParams>,
    /// One gating module per pyramid level.
    pub aqm: Vec<AqmParams>,
    pub head: HeadParams,
}

impl ParamSet for Detector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.laterals.visit(&join(prefix, "lateral"), f);
        self.aqm.visit(&join(prefix, "aqm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.laterals.visit_mut(&join(prefix, "lateral"), f);
        self.aqm.visit_mut(&join(prefix, "aqm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub const PYRAMID_LEVELS: usize = 5;

/// Anchor shapes per cell of the head for `config`. The single-map detector
/// carries every base size of the pyramid on its one map.
pub fn anchors_per_cell(config: &RunConfig) -> usize {
    match config.mode {
        AblationMode::SingleMap => config.anchors.anchors_per_cell() * config.anchors.levels(),
        _ => config.anchors.anchors_per_cell(),
    }
}

/// Anchors in head order for predictions of the given level sizes.
pub fn anchors_for(config: &RunConfig, sizes: &[(usize, usize)]) -> Result<Vec<Bbox>> {
    let a = &config.anchors;
    if config.mode != AblationMode::SingleMap {
        return generate_pyramid_anchors(sizes, a).map(|(v, _)| v);
    }
    let &[(h, w)] = sizes else {
        return Err(Error::Dimension(format!("single-map detector predicts on 1 map, got {}", sizes.len())));
    };
    let stride = a.strides[3] as f64;
    let mut out = Vec::with_capacity(h * w * anchors_per_cell(config));
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = (stride * (x as f64 + 0.5), stride * (y as f64 + 0.5));
            for &base in &a.base_sizes {
                for &r in &a.aspect_ratios {
                    out.push(Bbox::from_center(cx, cy, base / r.sqrt(), base * r.sqrt()));
                }
            }
        }
    }
    Ok(out)
}

impl Detector {
    pub fn init<R: Rng + ?Sized>(config: &RunConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = build_toy_backbone(&config.backbone, rng)?;
        let chans = backbone.channels();
        let out = config.fusion.output_channels;
        let fusion = if config.mode.uses_fusion() {
            Some(FusionParams::init(&config.fusion_config(), chans, rng)?)
        } else {
            None
        };
        let laterals = match config.mode {
            AblationMode::SingleMap => vec![ConvParams::kaiming(out, chans[3], 1, 1, 0, rng)],
            AblationMode::PyramidNoFuse => chans.iter().map(|&c| ConvParams::kaiming(out, c, 1, 1, 0, rng)).collect(),
            _ => Vec::new(),
        };
        let aqm = if config.mode == AblationMode::LffnAqm {
            (0..PYRAMID_LEVELS).map(|_| AqmParams::zeros(out, PoolMode::Train)).collect()
        } else {
            Vec::new()
        };
        let head = HeadParams::init(out, anchors_per_cell(config), config.num_logits(), rng);
        Ok(Self { mode: config.mode, backbone, fusion, fusion_config: config.fusion_config(), laterals, aqm, head })
    }

    /// Architecture with every parameter zero, for loading checkpoints.
    pub fn skeleton(config: &RunConfig) -> Result<Self> {
        let mut d = Self::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        d.zero();
        Ok(d)
    }
}

enum Neck {
    Single { c5: Tensor, pre: Tensor, lower: [Shape; 3] },
    Unfused { inputs: PyramidInputs, pres: Vec<Tensor>, p5: Tensor, p6_argmax: Vec<usize> },
    Fused { pyramid: Box<PyramidCache>, aqm: Vec<AqmCache> },
}

pub struct DetectorCache {
    backbone: ToyBackboneCache,
    neck: Neck,
    head: HeadCache,
}

/// Whether gating samples stochastically (training) or uses the expectation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

impl Detector {
    pub fn forward<R: Rng + ?Sized>(&self, image: &Tensor, phase: Phase, rng: &mut R) -> Result<Vec<LevelPrediction>> {
        self.forward_traced(image, phase, rng).map(|(p, _)| p)
    }

    pub fn forward_traced<R: Rng + ?Sized>(
        &self,
        image: &Tensor,
        phase: Phase,
        rng: &mut R,
    ) -> Result<(Vec<LevelPrediction>, DetectorCache)> {
        let (c, backbone) = toy_backbone_forward(image, &self.backbone)?;
        let (levels, neck) = match self.mode {
            AblationMode::SingleMap => {
                let pre = conv2d(&c.c5, &self.laterals[0])?;
                let lower = [c.c2.shape(), c.c3.shape(), c.c4.shape()];
                (vec![relu(&pre)], Neck::Single { c5: c.c5, pre, lower })
            }
            AblationMode::PyramidNoFuse => {
                let pres = c
                    .levels()
                    .iter()
                    .zip(&self.laterals)
                    .map(|(x, l)| conv2d(x, l))
                    .collect::<Result<Vec<_>>>()?;
                let mut levels: Vec<Tensor> = pres.iter().map(relu).collect();
                let pooled = maxpool2d(&levels[3], 1, 2)?;
                let p5 = levels[3].clone();
                levels.push(pooled.output);
                (levels, Neck::Unfused { inputs: c, pres, p5, p6_argmax: pooled.argmax })
            }
            _ => {
                let fusion = self.fusion.as_ref().ok_or_else(|| Error::Config("fusion parameters missing".into()))?;
                let (p, cache) = build_pyramid_forward(&c, fusion, &self.fusion_config)?;
                let mut levels = p.into_levels();
                let mut caches = Vec::with_capacity(self.aqm.len());
                for (l, a) in levels.iter_mut().zip(&self.aqm) {
                    let params = AqmParams {
                        mode: if phase == Phase::Train { PoolMode::Train } else { PoolMode::Eval },
                        ..a.clone()
                    };
                    let (gated, ac) = aqm_forward_traced(l, &params, rng)?;
                    *l = gated;
                    caches.push(ac);
                }
                (levels, Neck::Fused { pyramid: Box::new(cache), aqm: caches })
            }
        };
        let (preds, head) = head_forward_traced(&levels, &self.head)?;
        Ok((preds, DetectorCache { backbone, neck, head }))
    }

    /// Parameter gradients given gradients on every head output.
    pub fn backward(&self, cache: &DetectorCache, grads: &[LevelPrediction]) -> Result<Detector> {
        let (d_levels, g_head) = head_backward(&cache.head, &self.head, grads)?;
        let mut g = self.clone();
        g.zero();
        g.head = g_head;
        let d_c = match &cache.neck {
            Neck::Single { c5, pre, lower } => {
                let d_pre = relu_backward(pre, &d_levels[0])?;
                let (d_c5, gl) = conv2d_backward(c5, &self.laterals[0], &d_pre)?.into_params(&self.laterals[0]);
                g.laterals[0] = gl;
                PyramidInputs {
                    c2: Tensor::zeros(lower[0]),
                    c3: Tensor::zeros(lower[1]),
                    c4: Tensor::zeros(lower[2]),
                    c5: d_c5,
                }
            }
            Neck::Unfused { inputs, pres, p5, p6_argmax } => {
                let mut d_p5 = d_levels[3].clone();
                d_p5.add_assign(&maxpool2d_backward(p5.shape(), p6_argmax, &d_levels[4])?)?;
                let ups = [&d_levels[0], &d_levels[1], &d_levels[2], &d_p5];
                let mut d = Vec::with_capacity(4);
                for (i, x) in inputs.levels().iter().enumerate() {
                    let d_pre = relu_backward(&pres[i], ups[i])?;
                    let (dx, gl) = conv2d_backward(x, &self.laterals[i], &d_pre)?.into_params(&self.laterals[i]);
                    g.laterals[i] = gl;
                    d.push(dx);
                }
                let mut it = d.into_iter();
                PyramidInputs {
                    c2: it.next().unwrap(),
                    c3: it.next().unwrap(),
                    c4: it.next().unwrap(),
                    c5: it.next().unwrap(),
                }
            }
            Neck::Fused { pyramid, aqm } => {
                let mut d = d_levels;
                for (i, (ac, a)) in aqm.iter().zip(&self.aqm).enumerate() {
                    let (dy, dw) = aqm_backward(ac, a, &d[i])?;
                    d[i] = dy;
                    g.aqm[i].w_fc = dw;
                }
                let mut it = d.into_iter();
                let outs = PyramidOutputs {
                    p2: it.next().unwrap(),
                    p3: it.next().unwrap(),
                    p4: it.next().unwrap(),
                    p5: it.next().unwrap(),
                    p6: it.next().unwrap(),
                };
                let fusion = self.fusion.as_ref().expect("fused mode has fusion params");
                let (dc, gf) = build_pyramid_backward(pyramid, fusion, &self.fusion_config, &outs)?;
                g.fusion = Some(gf);
                dc
            }
        };
        let (_, gb) = toy_backbone_backward(&cache.backbone, &self.backbone, &d_c)?;
        g.backbone = gb;
        Ok(g)
    }
}
