//! Layer-weakening feature fusion.
//!
//! The top-down pathway upsamples each higher level with a ×2 deconvolution,
//! compresses it with a 1×1 convolution to a channel share that shrinks at
//! every lower merge, and concatenates it with a 1×1 lateral projection of
//! the bottom-up feature at the same resolution. Lateral and top-down shares
//! always add up to the output width, so every pyramid level has the same
//! channel count while lower levels are increasingly dominated by their own
//! lateral features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    concat_channels, concat_channels_backward, conv2d, conv2d_backward, deconv2d, deconv2d_backward, maxpool2d,
    maxpool2d_backward, relu, relu_backward, ConvParams, DeconvParams,
};
use crate::params::{join, ParamSet};
use crate::tensor::{Shape, Tensor};

/// How a lateral projection and the upsampled top-down map are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMode {
    /// Channel concatenation with the layer-weakening schedule.
    #[default]
    Concat,
    /// Element-wise sum at full width, as in FPN. Ignores the schedule.
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub output_channels: usize,
    /// Top-down channel share per merge, from the P4 merge down to the P2 merge.
    pub topdown_channel_schedule: Vec<usize>,
    pub post_merge_smoothing: bool,
    pub p5_channels: usize,
    pub merge_mode: MergeMode,
    /// Apply ReLU to every emitted level so downstream gating sees
    /// non-negative activations.
    pub output_relu: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            output_channels: 256,
            topdown_channel_schedule: vec![128, 64, 32],
            post_merge_smoothing: true,
            p5_channels: 256,
            merge_mode: MergeMode::Concat,
            output_relu: true,
        }
    }
}

pub const MERGE_STEPS: usize = 3;

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_channels == 0 {
            return Err(Error::config("fusion output_channels must be positive"));
        }
        if self.p5_channels != self.output_channels {
            return Err(Error::config(format!(
                "P5: p5_channels {} must equal output_channels {}",
                self.p5_channels, self.output_channels
            )));
        }
        if self.merge_mode == MergeMode::Add {
            return Ok(());
        }
        let s = &self.topdown_channel_schedule;
        if s.len() != MERGE_STEPS {
            return Err(Error::config(format!(
                "top-down schedule has {} entries, expected one per merge step ({MERGE_STEPS})",
                s.len()
            )));
        }
        for (i, &c) in s.iter().enumerate() {
            let level = level_name(i);
            if c == 0 || c >= self.output_channels {
                return Err(Error::config(format!(
                    "{level}: top-down share {c} must lie in 1..{}",
                    self.output_channels
                )));
            }
            if i > 0 && c >= s[i - 1] {
                return Err(Error::config(format!(
                    "{level}: top-down share {c} must be strictly smaller than the previous merge's {}",
                    s[i - 1]
                )));
            }
        }
        Ok(())
    }

    /// Channels contributed by the upsampled top-down map at merge `step`.
    pub fn topdown_share(&self, step: usize) -> usize {
        match self.merge_mode {
            MergeMode::Concat => self.topdown_channel_schedule[step],
            MergeMode::Add => self.output_channels,
        }
    }

    /// Channels contributed by the lateral projection at merge `step`.
    pub fn lateral_share(&self, step: usize) -> usize {
        match self.merge_mode {
            MergeMode::Concat => self.output_channels - self.topdown_channel_schedule[step],
            MergeMode::Add => self.output_channels,
        }
    }
}

/// Pyramid level produced by merge `step` (0 → P4, 1 → P3, 2 → P2).
pub fn level_name(step: usize) -> &'static str {
    ["P4", "P3", "P2"][step]
}

/// Bottom-up backbone features at strides 4, 8, 16 and 32.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidInputs {
    pub c2: Tensor,
    pub c3: Tensor,
    pub c4: Tensor,
    pub c5: Tensor,
}

impl PyramidInputs {
    pub fn levels(&self) -> [&Tensor; 4] {
        [&self.c2, &self.c3, &self.c4, &self.c5]
    }

    pub fn channels(&self) -> [usize; 4] {
        self.levels().map(|t| t.shape().c)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        for i in 0..3 {
            let (lo, hi) = (l[i].shape(), l[i + 1].shape());
            if lo.n != hi.n || lo.h != 2 * hi.h || lo.w != 2 * hi.w {
                return Err(Error::config(format!(
                    "C{}: spatial {}x{} is not exactly half of C{}'s {}x{}",
                    i + 3,
                    hi.h,
                    hi.w,
                    i + 2,
                    lo.h,
                    lo.w
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidOutputs {
    pub p2: Tensor,
    pub p3: Tensor,
    pub p4: Tensor,
    pub p5: Tensor,
    pub p6: Tensor,
}

impl PyramidOutputs {
    pub fn levels(&self) -> [&Tensor; 5] {
        [&self.p2, &self.p3, &self.p4, &self.p5, &self.p6]
    }

    pub fn into_levels(self) -> Vec<Tensor> {
        vec![self.p2, self.p3, self.p4, self.p5, self.p6]
    }
}

/// Parameters of one top-down merge.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeParams {
    pub deconv: DeconvParams,
    pub compress: ConvParams,
    pub lateral: ConvParams,
    pub smooth: Option<ConvParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub p5_lateral: ConvParams,
    /// Merges ordered P4, P3, P2.
    pub merges: Vec<MergeParams>,
}

impl ParamSet for MergeParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        self.deconv.visit(&join(prefix, "deconv"), f);
        self.compress.visit(&join(prefix, "compress"), f);
        self.lateral.visit(&join(prefix, "lateral"), f);
        self.smooth.visit(&join(prefix, "smooth"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        self.deconv.visit_mut(&join(prefix, "deconv"), f);
        self.compress.visit_mut(&join(prefix, "compress"), f);
        self.lateral.visit_mut(&join(prefix, "lateral"), f);
        self.smooth.visit_mut(&join(prefix, "smooth"), f);
    }
}

impl ParamSet for FusionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        self.p5_lateral.visit(&join(prefix, "p5_lateral"), f);
        self.merges.visit(&join(prefix, "merge"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        self.p5_lateral.visit_mut(&join(prefix, "p5_lateral"), f);
        self.merges.visit_mut(&join(prefix, "merge"), f);
    }
}

impl FusionParams {
    /// Randomly initialised parameters for backbone widths `[C2, C3, C4, C5]`.
    pub fn init<R: Rng + ?Sized>(config: &FusionConfig, backbone_channels: [usize; 4], rng: &mut R) -> Result<Self> {
        config.validate()?;
        let out = config.output_channels;
        let p5_lateral = ConvParams::kaiming(config.p5_channels, backbone_channels[3], 1, 1, 0, rng);
        let merges = (0..MERGE_STEPS)
            .map(|step| {
                let bottom_up = backbone_channels[2 - step];
                MergeParams {
                    deconv: DeconvParams::upsample2x(out, out, rng),
                    compress: ConvParams::kaiming(config.topdown_share(step), out, 1, 1, 0, rng),
                    lateral: ConvParams::kaiming(config.lateral_share(step), bottom_up, 1, 1, 0, rng),
                    smooth: config
                        .post_merge_smoothing
                        .then(|| ConvParams::kaiming(out, out, 3, 1, 1, rng)),
                }
            })
            .collect();
        Ok(Self { p5_lateral, merges })
    }

    /// Checks the channel-sum law and the schedule against `config`.
    pub fn validate(&self, config: &FusionConfig) -> Result<()> {
        config.validate()?;
        if self.p5_lateral.out_channels() != config.p5_channels {
            return Err(Error::config(format!(
                "P5: lateral emits {} channels, config wants {}",
                self.p5_lateral.out_channels(),
                config.p5_channels
            )));
        }
        if self.merges.len() != MERGE_STEPS {
            return Err(Error::config(format!("expected {MERGE_STEPS} merge steps, got {}", self.merges.len())));
        }
        for (step, m) in self.merges.iter().enumerate() {
            let level = level_name(step);
            let td = m.compress.out_channels();
            let lat = m.lateral.out_channels();
            if td != config.topdown_share(step) || lat != config.lateral_share(step) {
                return Err(Error::config(format!(
                    "{level}: top-down {td} + lateral {lat} channels do not match the configured shares {} + {}",
                    config.topdown_share(step),
                    config.lateral_share(step)
                )));
            }
            if m.smooth.is_some() != config.post_merge_smoothing {
                return Err(Error::config(format!("{level}: smoothing conv presence disagrees with config")));
            }
        }
        Ok(())
    }
}

/// Intermediate values of one expansion-compression, kept for backward.
#[derive(Clone, Debug)]
pub struct ExpandCompressCache {
    input: Tensor,
    up_pre: Tensor,
    up: Tensor,
    comp_pre: Tensor,
}

/// `ReLU(conv1x1(ReLU(deconv(x))))`: ×2 upsampling followed by channel compression.
pub fn expand_compress(x: &Tensor, dec: &DeconvParams, comp: &ConvParams) -> Result<Tensor> {
    expand_compress_forward(x, dec, comp).map(|(z, _)| z)
}

pub fn expand_compress_forward(
    x: &Tensor,
    dec: &DeconvParams,
    comp: &ConvParams,
) -> Result<(Tensor, ExpandCompressCache)> {
    if comp.kernel() != (1, 1) {
        return Err(Error::config("expand_compress: compression must be a 1x1 convolution"));
    }
    if comp.in_channels() != dec.out_channels() {
        return Err(Error::config(format!(
            "expand_compress: deconvolution emits {} channels but compression expects {}",
            dec.out_channels(),
            comp.in_channels()
        )));
    }
    let up_pre = deconv2d(x, dec)?;
    let (s, u) = (x.shape(), up_pre.shape());
    if u.h != 2 * s.h || u.w != 2 * s.w {
        return Err(Error::config(format!(
            "expand_compress: deconvolution maps {}x{} to {}x{}, not an exact x2 upsampling",
            s.h, s.w, u.h, u.w
        )));
    }
    let up = relu(&up_pre);
    let comp_pre = conv2d(&up, comp)?;
    let z = relu(&comp_pre);
    Ok((
        z,
        ExpandCompressCache {
            input: x.clone(),
            up_pre,
            up,
            comp_pre,
        },
    ))
}

pub fn expand_compress_backward(
    cache: &ExpandCompressCache,
    dec: &DeconvParams,
    comp: &ConvParams,
    upstream: &Tensor,
) -> Result<(Tensor, DeconvParams, ConvParams)> {
    let d_comp_pre = relu_backward(&cache.comp_pre, upstream)?;
    let (d_up, g_comp) = conv2d_backward(&cache.up, comp, &d_comp_pre)?.into_params(comp);
    let d_up_pre = relu_backward(&cache.up_pre, &d_up)?;
    let (dx, g_dec) = deconv2d_backward(&cache.input, dec, &d_up_pre)?.into_params(dec);
    Ok((dx, g_dec, g_comp))
}

fn check_merge_inputs(bottom_up: &Tensor, top_down: &Tensor) -> Result<()> {
    let (b, t) = (bottom_up.shape(), top_down.shape());
    if (b.n, b.h, b.w) != (t.n, t.h, t.w) {
        return Err(Error::dim(format!(
            "lateral merge: bottom-up {b} and top-down {t} disagree spatially (malformed pyramid)"
        )));
    }
    Ok(())
}

/// `concat(conv1x1(bottom_up), top_down)`, lateral channels first.
pub fn lateral_merge(bottom_up: &Tensor, top_down: &Tensor, lateral: &ConvParams) -> Result<Tensor> {
    merge(bottom_up, top_down, lateral, MergeMode::Concat)
}

pub fn merge(bottom_up: &Tensor, top_down: &Tensor, lateral: &ConvParams, mode: MergeMode) -> Result<Tensor> {
    check_merge_inputs(bottom_up, top_down)?;
    let lat = conv2d(bottom_up, lateral)?;
    match mode {
        MergeMode::Concat => concat_channels(&lat, top_down),
        MergeMode::Add => {
            if lat.shape() != top_down.shape() {
                return Err(Error::config(format!(
                    "additive merge needs equal widths, lateral {} vs top-down {}",
                    lat.shape(),
                    top_down.shape()
                )));
            }
            lat.zip_map(top_down, |a, b| a + b)
        }
    }
}

/// Returns gradients for the bottom-up input, the top-down input and the lateral conv.
pub fn merge_backward(
    bottom_up: &Tensor,
    lateral: &ConvParams,
    mode: MergeMode,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, ConvParams)> {
    let (d_lat, d_top) = match mode {
        MergeMode::Concat => concat_channels_backward(upstream, lateral.out_channels())?,
        MergeMode::Add => (upstream.clone(), upstream.clone()),
    };
    let (d_bottom, g_lat) = conv2d_backward(bottom_up, lateral, &d_lat)?.into_params(lateral);
    Ok((d_bottom, d_top, g_lat))
}

/// Everything the pyramid backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct PyramidCache {
    inputs: PyramidInputs,
    p5_pre: Tensor,
    steps: Vec<StepCache>,
    p5_out: Tensor,
    p6_argmax: Vec<usize>,
}

#[derive(Clone, Debug)]
struct StepCache {
    expand: ExpandCompressCache,
    merged: Tensor,
    smoothed: Tensor,
}

fn maybe_relu(t: Tensor, on: bool) -> Tensor {
    if on {
        relu(&t)
    } else {
        t
    }
}

fn maybe_relu_backward(pre: &Tensor, upstream: &Tensor, on: bool) -> Result<Tensor> {
    if on {
        relu_backward(pre, upstream)
    } else {
        Ok(upstream.clone())
    }
}

pub fn build_pyramid(inputs: &PyramidInputs, params: &FusionParams, config: &FusionConfig) -> Result<PyramidOutputs> {
    build_pyramid_forward(inputs, params, config).map(|(o, _)| o)
}

pub fn build_pyramid_forward(
    inputs: &PyramidInputs,
    params: &FusionParams,
    config: &FusionConfig,
) -> Result<(PyramidOutputs, PyramidCache)> {
    inputs.validate()?;
    params.validate(config)?;
    let bottom_up = [&inputs.c4, &inputs.c3, &inputs.c2];

    // The top-down path carries merged maps before smoothing and output activation.
    let p5_pre = conv2d(&inputs.c5, &params.p5_lateral)?;
    let mut top = p5_pre.clone();
    let mut outs = Vec::with_capacity(MERGE_STEPS);
    let mut steps = Vec::with_capacity(MERGE_STEPS);
    for (step, m) in params.merges.iter().enumerate() {
        let (z, expand) = expand_compress_forward(&top, &m.deconv, &m.compress)
            .map_err(|e| Error::config(format!("{}: {e}", level_name(step))))?;
        let merged = merge(bottom_up[step], &z, &m.lateral, config.merge_mode)?;
        let smoothed = match &m.smooth {
            Some(s) => conv2d(&merged, s)?,
            None => merged.clone(),
        };
        outs.push(maybe_relu(smoothed.clone(), config.output_relu));
        top = merged.clone();
        steps.push(StepCache {
            expand,
            merged,
            smoothed,
        });
    }
    let p5 = maybe_relu(p5_pre.clone(), config.output_relu);
    let pooled = maxpool2d(&p5, 1, 2)?;
    let p2 = outs.pop().expect("three merges");
    let p3 = outs.pop().expect("three merges");
    let p4 = outs.pop().expect("three merges");
    Ok((
        PyramidOutputs {
            p2,
            p3,
            p4,
            p5: p5.clone(),
            p6: pooled.output,
        },
        PyramidCache {
            inputs: inputs.clone(),
            p5_pre,
            steps,
            p5_out: p5,
            p6_argmax: pooled.argmax,
        },
    ))
}

/// Backpropagates gradients of all five levels to the backbone features and
/// the fusion parameters.
pub fn build_pyramid_backward(
    cache: &PyramidCache,
    params: &FusionParams,
    config: &FusionConfig,
    grads: &PyramidOutputs,
) -> Result<(PyramidInputs, FusionParams)> {
    let mut g_params = params.clone();
    g_params.zero();
    let mut d_bottom: Vec<Tensor> = Vec::with_capacity(MERGE_STEPS);
    let level_grads = [&grads.p4, &grads.p3, &grads.p2];

    // gradient flowing into the merged map of the step above
    let mut carry: Option<Tensor> = None;
    for step in (0..MERGE_STEPS).rev() {
        let m = &params.merges[step];
        let sc = &cache.steps[step];
        let d_smoothed = maybe_relu_backward(&sc.smoothed, level_grads[step], config.output_relu)?;
        let mut d_merged = match &m.smooth {
            Some(s) => {
                let (dm, gs) = conv2d_backward(&sc.merged, s, &d_smoothed)?.into_params(s);
                g_params.merges[step].smooth = Some(gs);
                dm
            }
            None => d_smoothed,
        };
        if let Some(c) = carry.take() {
            d_merged.add_assign(&c)?;
        }
        let bottom = [&cache.inputs.c4, &cache.inputs.c3, &cache.inputs.c2][step];
        let (d_b, d_z, g_lat) = merge_backward(bottom, &m.lateral, config.merge_mode, &d_merged)?;
        let (d_top, g_dec, g_comp) = expand_compress_backward(&sc.expand, &m.deconv, &m.compress, &d_z)?;
        let gm = &mut g_params.merges[step];
        gm.lateral = g_lat;
        gm.deconv = g_dec;
        gm.compress = g_comp;
        d_bottom.push(d_b);
        carry = Some(d_top);
    }

    let mut d_p5 = grads.p5.clone();
    d_p5.add_assign(&maxpool2d_backward(cache.p5_out.shape(), &cache.p6_argmax, &grads.p6)?)?;
    let mut d_p5_pre = maybe_relu_backward(&cache.p5_pre, &d_p5, config.output_relu)?;
    d_p5_pre.add_assign(&carry.expect("three merges"))?;
    let (d_c5, g_p5) = conv2d_backward(&cache.inputs.c5, &params.p5_lateral, &d_p5_pre)?.into_params(&params.p5_lateral);
    g_params.p5_lateral = g_p5;

    // d_bottom holds C2, C3, C4 gradients in that order after the reversed loop
    let mut it = d_bottom.into_iter();
    let d_c2 = it.next().expect("C2 gradient");
    let d_c3 = it.next().expect("C3 gradient");
    let d_c4 = it.next().expect("C4 gradient");
    Ok((
        PyramidInputs {
            c2: d_c2,
            c3: d_c3,
            c4: d_c4,
            c5: d_c5,
        },
        g_params,
    ))
}

/// Shapes of P2..P6 implied by the inputs and config, without running anything.
pub fn pyramid_output_shapes(inputs: &PyramidInputs, config: &FusionConfig) -> [Shape; 5] {
    let c = config.output_channels;
    let s5 = inputs.c5.shape();
    [
        inputs.c2.shape().with_channels(c),
        inputs.c3.shape().with_channels(c),
        inputs.c4.shape().with_channels(c),
        s5.with_channels(c),
        Shape::new(s5.n, c, s5.h.div_ceil(2), s5.w.div_ceil(2)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_weakening() {
        let c = FusionConfig::default();
        c.validate().unwrap();
        assert_eq!(c.lateral_share(2), 224);
        assert_eq!(c.topdown_share(2), 32);
    }

    #[test]
    fn schedule_violations_name_the_level() {
        let mut c = FusionConfig {
            topdown_channel_schedule: vec![128, 128, 32],
            ..Default::default()
        };
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("P3"), "{e}");
        c.topdown_channel_schedule = vec![256, 64, 32];
        assert!(c.validate().unwrap_err().to_string().contains("P4"));
        c.topdown_channel_schedule = vec![128, 64];
        assert!(c.validate().is_err());
        c.merge_mode = MergeMode::Add;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn misaligned_pyramid_rejected() {
        let inputs = PyramidInputs {
            c2: Tensor::zeros([1, 1, 8, 8]),
            c3: Tensor::zeros([1, 1, 4, 4]),
            c4: Tensor::zeros([1, 1, 3, 2]),
            c5: Tensor::zeros([1, 1, 1, 1]),
        };
        assert!(inputs.validate().unwrap_err().to_string().contains("C4"));
    }
}
