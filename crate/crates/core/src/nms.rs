//! Greedy non-maximum suppression, traditional and stochastic.
//!
//! Both variants repeatedly take the highest-scoring remaining detection `M`.
//! Traditional NMS drops every other detection with `iou(M, b) ≥ N_t`.
//! The stochastic variant instead keeps such a `b` with probability
//! `area(M ∩ b) / area(b)`, so frames mostly covered by `M` tend to survive
//! and frames that merely overlap it tend to go. Retained scores are never
//! rescaled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{iou, Bbox};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Bbox,
    pub score: f64,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMode {
    #[default]
    Traditional,
    Stochastic,
}

/// How the retention probability of an overlapping frame is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Retention {
    /// `area(M ∩ b) / area(b)`.
    #[default]
    IntersectionOverArea,
    /// `iou(M, b) / area(b)`, clamped; tiny for any box larger than a pixel.
    IouOverArea,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub threshold: f64,
    pub mode: NmsMode,
    pub seed: u64,
    pub retention: Retention,
}

pub const PROPOSAL_NMS_THRESHOLD: f64 = 0.7;
pub const DETECTION_NMS_THRESHOLD: f64 = 0.45;

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            threshold: DETECTION_NMS_THRESHOLD,
            mode: NmsMode::Traditional,
            seed: 0,
            retention: Retention::IntersectionOverArea,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("NMS threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// Decides whether an overlapping frame with retention probability `p` survives a round.
pub trait RetentionSampler {
    fn retain(&mut self, p: f64) -> bool;
}

/// Independent Bernoulli draw per frame per round.
pub struct Bernoulli<'a, R: Rng + ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> RetentionSampler for Bernoulli<'_, R> {
    fn retain(&mut self, p: f64) -> bool {
        self.0.random::<f64>() < p
    }
}

/// Always removes: stochastic NMS degenerates to the traditional rule.
pub struct AlwaysRemove;

impl RetentionSampler for AlwaysRemove {
    fn retain(&mut self, _: f64) -> bool {
        false
    }
}

/// Always retains: nothing is ever suppressed.
pub struct AlwaysRetain;

impl RetentionSampler for AlwaysRetain {
    fn retain(&mut self, _: f64) -> bool {
        true
    }
}

pub fn retention_probability(m: &Bbox, b: &Bbox, rule: Retention) -> f64 {
    let area = b.area();
    if area <= 0.0 {
        return 0.0;
    }
    let p = match rule {
        Retention::IntersectionOverArea => m.intersection_area(b) / area,
        Retention::IouOverArea => iou(m, b) / area,
    };
    p.clamp(0.0, 1.0)
}

/// Indices sorted by score descending, ties broken by input position.
fn order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    idx
}

fn greedy(dets: &[Detection], threshold: f64, mut keep_overlap: impl FnMut(&Bbox, &Bbox) -> bool) -> Vec<Detection> {
    let mut remaining = order(dets);
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let m = remaining.remove(0);
        let mb = dets[m].bbox;
        out.push(dets[m]);
        remaining.retain(|&i| iou(&mb, &dets[i].bbox) < threshold || keep_overlap(&mb, &dets[i].bbox));
    }
    out
}

/// Single-class greedy NMS; output sorted by score descending.
pub fn nms_traditional(dets: &[Detection], config: &NmsConfig) -> Vec<Detection> {
    greedy(dets, config.threshold, |_, _| false)
}

pub fn stochastic_nms_with<S: RetentionSampler + ?Sized>(
    dets: &[Detection],
    config: &NmsConfig,
    sampler: &mut S,
) -> Vec<Detection> {
    let rule = config.retention;
    greedy(dets, config.threshold, |m, b| sampler.retain(retention_probability(m, b, rule)))
}

pub fn stochastic_nms<R: Rng + ?Sized>(dets: &[Detection], config: &NmsConfig, rng: &mut R) -> Vec<Detection> {
    stochastic_nms_with(dets, config, &mut Bernoulli(rng))
}

/// Seed for one class group, so groups are independent of each other's sizes.
pub fn class_seed(seed: u64, class_id: usize) -> u64 {
    seed ^ (class_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs NMS separately for every class and merges the survivors by score.
pub fn nms_per_class(dets: &[Detection], config: &NmsConfig) -> Result<Vec<Detection>> {
    config.validate()?;
    if let Some(d) = dets.iter().find(|d| !(d.score.is_finite() && d.score >= 0.0)) {
        return Err(Error::Domain(format!("detection score {} is not a finite non-negative value", d.score)));
    }
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for c in classes {
        let group: Vec<Detection> = dets.iter().copied().filter(|d| d.class_id == c).collect();
        out.extend(match config.mode {
            NmsMode::Traditional => nms_traditional(&group, config),
            NmsMode::Stochastic => {
                let mut rng = ChaCha8Rng::seed_from_u64(class_seed(config.seed, c));
                stochastic_nms(&group, config, &mut rng)
            }
        });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}
