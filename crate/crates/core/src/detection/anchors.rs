use serde::{Deserialize, Serialize};

use super::boxes::Bbox;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Height over width of each anchor shape.
    pub aspect_ratios: Vec<f64>,
    pub scale: usize,
    pub strides: Vec<usize>,
    pub base_sizes: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            aspect_ratios: vec![0.5, 1.0, 2.0],
            scale: 8,
            strides: vec![4, 8, 16, 32, 64],
            base_sizes: vec![32.0, 64.0, 128.0, 512.0, 1024.0],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::config("anchor aspect ratios must be positive and non-empty"));
        }
        if self.strides.len() != self.base_sizes.len() || self.strides.is_empty() {
            return Err(Error::config(format!(
                "anchor config has {} strides but {} base sizes",
                self.strides.len(),
                self.base_sizes.len()
            )));
        }
        if self.strides.contains(&0) {
            return Err(Error::config("anchor strides must be positive"));
        }
        if self.base_sizes[0] <= 0.0 || self.base_sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("anchor base sizes must be positive and strictly increasing"));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len()
    }

    pub fn levels(&self) -> usize {
        self.base_sizes.len()
    }
}

/// Anchors of one pyramid level in `(y, x, ratio)` order, so anchor
/// `(y * w + x) * A + a` belongs to output channel group `a` at cell `(y, x)`.
pub fn generate_anchors(level: usize, feature_h: usize, feature_w: usize, config: &AnchorConfig) -> Result<Vec<Bbox>> {
    config.validate()?;
    if level >= config.levels() {
        return Err(Error::config(format!(
            "anchor level {level} out of range, config has {} levels",
            config.levels()
        )));
    }
    let stride = config.strides[level] as f64;
    let base = config.base_sizes[level];
    let shapes: Vec<(f64, f64)> = config
        .aspect_ratios
        .iter()
        .map(|&r| (base / r.sqrt(), base * r.sqrt()))
        .collect();
    let mut out = Vec::with_capacity(feature_h * feature_w * shapes.len());
    for y in 0..feature_h {
        for x in 0..feature_w {
            let cx = stride * (x as f64 + 0.5);
            let cy = stride * (y as f64 + 0.5);
            out.extend(shapes.iter().map(|&(w, h)| Bbox::from_center(cx, cy, w, h)));
        }
    }
    Ok(out)
}

/// Anchors of several levels concatenated, plus the start offset of each level.
pub fn generate_pyramid_anchors(sizes: &[(usize, usize)], config: &AnchorConfig) -> Result<(Vec<Bbox>, Vec<usize>)> {
    let mut all = Vec::new();
    let mut offsets = Vec::with_capacity(sizes.len());
    for (level, &(h, w)) in sizes.iter().enumerate() {
        offsets.push(all.len());
        all.extend(generate_anchors(level, h, w, config)?);
    }
    Ok((all, offsets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_has_one_anchor_per_ratio() {
        let a = generate_anchors(1, 1, 1, &AnchorConfig::default()).unwrap();
        assert_eq!(a.len(), 3);
        for b in &a {
            assert_eq!(b.center(), (4.0, 4.0));
            assert!((b.area() - 64.0 * 64.0).abs() < 1e-9);
        }
        let half = a[0];
        assert!((half.width() - 64.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((half.height() - 64.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unknown_level_is_config_error() {
        assert!(matches!(generate_anchors(5, 2, 2, &AnchorConfig::default()), Err(Error::Config(_))));
    }
}
