//! Declarative network descriptions, analytical cost counting and the
//! small executable backbone used for training at desk scale.

mod cost;
mod toy;
mod zoo;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cost::{count_cost, CostReport, StageCost, COST_CONVENTION};
pub use toy::{
    build_toy_backbone, toy_backbone_backward, toy_backbone_forward, toy_backbone_spec, ToyBackbone, ToyBackboneCache,
    ToyBackboneConfig, ToyStage,
};
pub use zoo::{resnet50_spec, resnet50_spec_with, se_resnext50_spec, se_resnext50_spec_with};

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolOp {
    #[default]
    Max,
    Avg,
}

/// Which convolution of a bottleneck block carries the stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StridePlacement {
    /// The leading 1×1 reduction.
    #[default]
    First,
    /// The 3×3 convolution.
    Middle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
        #[serde(default)]
        batch_norm: bool,
        #[serde(default = "one")]
        repeat: usize,
    },
    GroupedConv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        groups: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
        #[serde(default)]
        batch_norm: bool,
        #[serde(default = "one")]
        repeat: usize,
    },
    Fc {
        in_features: usize,
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Pool {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        op: PoolOp,
    },
    GlobalPool,
    Se {
        channels: usize,
        reduction: usize,
    },
    /// Bottleneck residual blocks: 1×1 reduce, 3×3 (grouped) conv, 1×1
    /// expand, each with batch norm, plus a projection shortcut on the first
    /// block when the shape changes. Later repeats keep stride 1.
    ResidualBlock {
        in_channels: usize,
        mid_channels: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "one")]
        groups: usize,
        #[serde(default)]
        se_reduction: Option<usize>,
        #[serde(default)]
        stride_on: StridePlacement,
        #[serde(default = "one")]
        repeat: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub name: String,
    pub input_channels: usize,
    pub stages: Vec<StageSpec>,
}

impl GraphSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].lines().count().max(1));
            Error::parse(line, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialise graph spec: {e}")))
    }

    /// Runs `other` on the output of `self`.
    pub fn then(&self, other: &GraphSpec) -> GraphSpec {
        let mut out = self.clone();
        out.name = format!("{}+{}", self.name, other.name);
        out.stages.extend(other.stages.iter().cloned());
        out
    }

    /// Checks channel chaining and spatial feasibility for an `h × w` input.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        cost::count_cost(self, crate::tensor::Shape::new(1, self.input_channels, h, w)).map(|_| ())
    }
}
