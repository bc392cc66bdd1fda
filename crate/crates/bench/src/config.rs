//! Run configuration, loaded from versioned TOML files.

use std::path::Path;
use std::str::FromStr;

use lffn_core::detection::{AnchorConfig, TargetConfig};
use lffn_core::eval::EvalConfig;
use lffn_core::fusion::{FusionConfig, MergeMode};
use lffn_core::modelspec::ToyBackboneConfig;
use lffn_core::nms::NmsConfig;
use lffn_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;

pub const CONFIG_VERSION: u32 = 1;

/// The ablation ladder, from a single feature map to the full detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "single-map")]
    SingleMap,
    #[serde(rename = "pyramid-nofuse")]
    PyramidNoFuse,
    #[serde(rename = "fpn-add")]
    FpnAdd,
    #[default]
    #[serde(rename = "lffn")]
    Lffn,
    #[serde(rename = "lffn+aqm")]
    LffnAqm,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::SingleMap,
        AblationMode::PyramidNoFuse,
        AblationMode::FpnAdd,
        AblationMode::Lffn,
        AblationMode::LffnAqm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::SingleMap => "single-map",
            AblationMode::PyramidNoFuse => "pyramid-nofuse",
            AblationMode::FpnAdd => "fpn-add",
            AblationMode::Lffn => "lffn",
            AblationMode::LffnAqm => "lffn+aqm",
        }
    }

    pub fn uses_fusion(self) -> bool {
        matches!(self, AblationMode::FpnAdd | AblationMode::Lffn | AblationMode::LffnAqm)
    }

    pub fn merge_mode(self) -> MergeMode {
        if self == AblationMode::FpnAdd {
            MergeMode::Add
        } else {
            MergeMode::Concat
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.001, momentum: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Write `checkpoint_<iter>.lffc` every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Weight of the localisation term.
    pub loss_lambda: f64,
    /// Window of the moving average used for smoothed losses.
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 200, checkpoint_every: 100, loss_lambda: 1.0, smoothing_window: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub pre_nms_top_k: usize,
    pub max_per_image: usize,
    pub nms: NmsConfig,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, pre_nms_top_k: 1000, max_per_image: 100, nms: NmsConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub mode: AblationMode,
    pub dataset: DatasetConfig,
    pub backbone: ToyBackboneConfig,
    pub fusion: FusionConfig,
    pub anchors: AnchorConfig,
    pub targets: TargetConfig,
    pub optimizer: SgdConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 7,
            mode: AblationMode::Lffn,
            dataset: DatasetConfig::default(),
            backbone: ToyBackboneConfig::default(),
            fusion: FusionConfig {
                output_channels: 64,
                topdown_channel_schedule: vec![32, 16, 8],
                p5_channels: 64,
                ..FusionConfig::default()
            },
            anchors: AnchorConfig {
                strides: vec![2, 4, 8, 16, 32],
                base_sizes: vec![6.0, 10.0, 16.0, 26.0, 40.0],
                ..AnchorConfig::default()
            },
            targets: TargetConfig::default(),
            optimizer: SgdConfig::default(),
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].lines().count().max(1));
            let at = line.map(|l| format!(" at line {l}")).unwrap_or_default();
            Error::Config(format!("config{at}: {}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if !(self.optimizer.learning_rate.is_finite() && self.optimizer.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.optimizer.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.optimizer.momentum)));
        }
        if self.train.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.train.smoothing_window == 0 {
            return Err(Error::Config("smoothing_window must be at least 1".into()));
        }
        if !(self.train.loss_lambda.is_finite() && self.train.loss_lambda >= 0.0) {
            return Err(Error::Config("loss_lambda must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.detect.score_threshold) {
            return Err(Error::Config("score_threshold must lie in [0, 1]".into()));
        }
        if self.detect.max_per_image == 0 || self.detect.pre_nms_top_k == 0 {
            return Err(Error::Config("max_per_image and pre_nms_top_k must be positive".into()));
        }
        self.dataset.validate()?;
        self.backbone.validate()?;
        self.fusion_config().validate()?;
        self.anchors.validate()?;
        if self.anchors.levels() != 5 {
            return Err(Error::Config(format!(
                "anchor config has {} levels, the detector predicts on 5 (P2..P6)",
                self.anchors.levels()
            )));
        }
        let strides = self.backbone.strides();
        if self.anchors.strides[..4] != strides || self.anchors.strides[4] != 2 * strides[3] {
            return Err(Error::Config(format!(
                "anchor strides {:?} do not match the backbone feature strides {:?} plus P6",
                self.anchors.strides, strides
            )));
        }
        self.targets.validate()?;
        self.detect.nms.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// The fusion config with the merge mode implied by the ablation mode.
    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig { merge_mode: self.mode.merge_mode(), ..self.fusion.clone() }
    }

    /// Logits per anchor: background plus one per class.
    pub fn num_logits(&self) -> usize {
        self.dataset.classes.len() + 1
    }
}
