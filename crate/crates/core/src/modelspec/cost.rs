use serde::Serialize;

use super::{GraphSpec, LayerSpec, PoolOp, StridePlacement};
use crate::error::{Error, Result};
use crate::kernels::conv::conv_out_dim;
use crate::tensor::Shape;

pub const COST_CONVENTION: &str =
    "1 multiply-accumulate = 1 FLOP; batch norm adds 2C parameters and no MACs; projection shortcuts included";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCost {
    pub name: String,
    pub macs: u64,
    pub params: u64,
    /// Output `[C, H, W]` of the stage.
    pub output: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub name: String,
    pub convention: &'static str,
    pub input: [usize; 4],
    pub macs: u64,
    pub params: u64,
    pub stages: Vec<StageCost>,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.params as f64 / 1e6
    }
}

impl std::fmt::Display for CostReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "# {}", self.convention)?;
        let [n, c, h, w] = self.input;
        writeln!(f, "{} input {n}x{c}x{h}x{w}", self.name)?;
        for s in &self.stages {
            let [c, h, w] = s.output;
            writeln!(
                f,
                "  {:<10} {:>10.4} GFLOPs {:>10.4} M params  -> {c}x{h}x{w}",
                s.name,
                s.macs as f64 / 1e9,
                s.params as f64 / 1e6
            )?;
        }
        write!(f, "total {:.4} GFLOPs {:.4} M params", self.gflops(), self.mparams())
    }
}

/// Running shape plus accumulated cost while walking a graph.
struct Walker<'a> {
    at: &'a str,
    c: usize,
    h: usize,
    w: usize,
    batch: u64,
    macs: u64,
    params: u64,
}

impl Walker<'_> {
    fn err(&self, msg: String) -> Error {
        Error::config(format!("layer {}: {msg}", self.at))
    }

    fn expect_channels(&self, c: usize) -> Result<()> {
        if c != self.c {
            return Err(self.err(format!("expects {c} input channels but receives {}", self.c)));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, groups: usize, bias: bool, bn: bool) -> Result<()> {
        self.expect_channels(cin)?;
        if k == 0 || stride == 0 || groups == 0 || cin % groups != 0 || cout % groups != 0 || cout == 0 {
            return Err(self.err(format!(
                "invalid conv geometry: {cin}->{cout}, kernel {k}, stride {stride}, groups {groups}"
            )));
        }
        let (ho, wo) = match (conv_out_dim(self.h, k, stride, pad), conv_out_dim(self.w, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(self.err(format!("kernel {k} does not fit a {}x{} input", self.h, self.w))),
        };
        let per_out = (cin / groups * k * k) as u64;
        self.macs += self.batch * (cout * ho * wo) as u64 * per_out;
        self.params += cout as u64 * per_out + if bias { cout as u64 } else { 0 } + if bn { 2 * cout as u64 } else { 0 };
        (self.c, self.h, self.w) = (cout, ho, wo);
        Ok(())
    }

    fn se(&mut self, channels: usize, reduction: usize) -> Result<()> {
        self.expect_channels(channels)?;
        if reduction == 0 || channels % reduction != 0 {
            return Err(self.err(format!("SE: {channels} channels not divisible by reduction {reduction}")));
        }
        let mid = (channels / reduction) as u64;
        let c = channels as u64;
        self.macs += self.batch * (2 * c * mid + c * (self.h * self.w) as u64);
        self.params += 2 * c * mid + mid + c;
        Ok(())
    }

    fn layer(&mut self, layer: &LayerSpec) -> Result<()> {
        match *layer {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding, bias, batch_norm, repeat } => {
                for i in 0..repeat.max(1) {
                    let cin = if i == 0 { in_channels } else { out_channels };
                    self.conv(cin, out_channels, kernel, stride, padding, 1, bias, batch_norm)?;
                }
                if repeat == 0 {
                    return Err(self.err("repeat must be at least 1".into()));
                }
            }
            LayerSpec::GroupedConv { in_channels, out_channels, kernel, groups, stride, padding, bias, batch_norm, repeat } => {
                if repeat == 0 {
                    return Err(self.err("repeat must be at least 1".into()));
                }
                for i in 0..repeat {
                    let cin = if i == 0 { in_channels } else { out_channels };
                    self.conv(cin, out_channels, kernel, stride, padding, groups, bias, batch_norm)?;
                }
            }
            LayerSpec::Fc { in_features, out_features, bias } => {
                if self.c * self.h * self.w != in_features {
                    return Err(self.err(format!(
                        "fc expects {in_features} inputs but receives {}x{}x{}",
                        self.c, self.h, self.w
                    )));
                }
                self.macs += self.batch * (in_features * out_features) as u64;
                self.params += (in_features * out_features) as u64 + if bias { out_features as u64 } else { 0 };
                (self.c, self.h, self.w) = (out_features, 1, 1);
            }
            LayerSpec::Pool { kernel, stride, padding, op } => {
                let (ho, wo) = match (conv_out_dim(self.h, kernel, stride, padding), conv_out_dim(self.w, kernel, stride, padding)) {
                    (Some(a), Some(b)) if stride > 0 => (a, b),
                    _ => return Err(self.err(format!("pool kernel {kernel} stride {stride} does not fit {}x{}", self.h, self.w))),
                };
                if op == PoolOp::Avg {
                    self.macs += self.batch * (self.c * ho * wo * kernel * kernel) as u64;
                }
                (self.h, self.w) = (ho, wo);
            }
            LayerSpec::GlobalPool => {
                self.macs += self.batch * (self.c * self.h * self.w) as u64;
                (self.h, self.w) = (1, 1);
            }
            LayerSpec::Se { channels, reduction } => self.se(channels, reduction)?,
            LayerSpec::ResidualBlock { in_channels, mid_channels, out_channels, stride, groups, se_reduction, stride_on, repeat } => {
                if repeat == 0 {
                    return Err(self.err("repeat must be at least 1".into()));
                }
                for i in 0..repeat {
                    let (cin, s) = if i == 0 { (in_channels, stride) } else { (out_channels, 1) };
                    self.expect_channels(cin)?;
                    let (h0, w0) = (self.h, self.w);
                    let (s1, s2) = match stride_on {
                        StridePlacement::First => (s, 1),
                        StridePlacement::Middle => (1, s),
                    };
                    self.conv(cin, mid_channels, 1, s1, 0, 1, false, true)?;
                    self.conv(mid_channels, mid_channels, 3, s2, 1, groups, false, true)?;
                    self.conv(mid_channels, out_channels, 1, 1, 0, 1, false, true)?;
                    if let Some(r) = se_reduction {
                        self.se(out_channels, r)?;
                    }
                    if cin != out_channels || s != 1 {
                        let (c, h, w) = (self.c, self.h, self.w);
                        (self.c, self.h, self.w) = (cin, h0, w0);
                        self.conv(cin, out_channels, 1, s, 0, 1, false, true)?;
                        if (self.c, self.h, self.w) != (c, h, w) {
                            return Err(self.err("shortcut and residual branch disagree in shape".into()));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Analytical multiply-accumulates and parameters of `spec` on `input`.
pub fn count_cost(spec: &GraphSpec, input: Shape) -> Result<CostReport> {
    if input.c != spec.input_channels {
        return Err(Error::config(format!(
            "{}: input has {} channels, spec expects {}",
            spec.name, input.c, spec.input_channels
        )));
    }
    let mut stages = Vec::with_capacity(spec.stages.len());
    let (mut c, mut h, mut w) = (input.c, input.h, input.w);
    for stage in &spec.stages {
        let mut macs = 0;
        let mut params = 0;
        for (i, layer) in stage.layers.iter().enumerate() {
            let at = format!("{}[{i}]", stage.name);
            let mut walker = Walker { at: &at, c, h, w, batch: input.n as u64, macs: 0, params: 0 };
            walker.layer(layer)?;
            (c, h, w) = (walker.c, walker.h, walker.w);
            macs += walker.macs;
            params += walker.params;
        }
        stages.push(StageCost { name: stage.name.clone(), macs, params, output: [c, h, w] });
    }
    Ok(CostReport {
        name: spec.name.clone(),
        convention: COST_CONVENTION,
        input: input.dims(),
        macs: stages.iter().map(|s| s.macs).sum(),
        params: stages.iter().map(|s| s.params).sum(),
        stages,
    })
}
