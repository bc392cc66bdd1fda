//! Anchor labeling and minibatch sampling.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::boxes::{encode_box, iou, Bbox, GtBox};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub batch_size: usize,
    /// Negatives per positive in a full minibatch.
    pub neg_to_pos: f64,
    /// Label anchors that cross the image border as ignore instead of keeping them.
    pub ignore_cross_boundary: bool,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.7,
            neg_iou: 0.3,
            batch_size: 128,
            neg_to_pos: 3.0,
            ignore_cross_boundary: false,
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| t > 0.0 && t < 1.0;
        if !ok(self.pos_iou) || !ok(self.neg_iou) || self.neg_iou >= self.pos_iou {
            return Err(Error::config(format!(
                "IoU thresholds must satisfy 0 < neg ({}) < pos ({}) < 1",
                self.neg_iou, self.pos_iou
            )));
        }
        self.max_positives().map(|_| ())
    }

    /// Positive quota of a full minibatch; the batch must split exactly.
    pub fn max_positives(&self) -> Result<usize> {
        let share = self.batch_size as f64 / (1.0 + self.neg_to_pos);
        if self.batch_size == 0 || !(self.neg_to_pos >= 0.0) || (share - share.round()).abs() > 1e-9 {
            return Err(Error::config(format!(
                "minibatch of {} does not split at {}:1 negatives to positives",
                self.batch_size, self.neg_to_pos
            )));
        }
        Ok(share.round() as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelState {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorLabel {
    pub state: LabelState,
    /// Ground-truth index, present exactly for positives.
    pub matched: Option<usize>,
}

impl AnchorLabel {
    pub const NEGATIVE: Self = Self {
        state: LabelState::Negative,
        matched: None,
    };
    pub const IGNORE: Self = Self {
        state: LabelState::Ignore,
        matched: None,
    };

    pub fn positive(gt: usize) -> Self {
        Self {
            state: LabelState::Positive,
            matched: Some(gt),
        }
    }
}

/// Positive above `pos_iou` with any ground truth or when the anchor attains
/// some ground truth's best overlap; negative when every overlap is below
/// `neg_iou`; ignored otherwise.
pub fn label_anchors(anchors: &[Bbox], gts: &[Bbox], config: &TargetConfig) -> Result<Vec<AnchorLabel>> {
    config.validate()?;
    if anchors.is_empty() {
        return Err(Error::config("cannot label an empty anchor list"));
    }
    if gts.is_empty() {
        return Ok(vec![AnchorLabel::NEGATIVE; anchors.len()]);
    }
    let overlaps: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    let mut labels: Vec<AnchorLabel> = overlaps
        .iter()
        .map(|row| {
            let (best, best_iou) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            if best_iou > config.pos_iou {
                AnchorLabel::positive(best)
            } else if best_iou < config.neg_iou {
                AnchorLabel::NEGATIVE
            } else {
                AnchorLabel::IGNORE
            }
        })
        .collect();
    for j in 0..gts.len() {
        let best = overlaps.iter().map(|row| row[j]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (i, row) in overlaps.iter().enumerate() {
            if row[j] == best {
                labels[i] = AnchorLabel::positive(j);
            }
        }
    }
    Ok(labels)
}

/// Turns every anchor not fully inside the image into an ignored one.
pub fn ignore_cross_boundary(labels: &mut [AnchorLabel], anchors: &[Bbox], width: f64, height: f64) {
    for (l, a) in labels.iter_mut().zip(anchors) {
        if !a.inside(width, height) {
            *l = AnchorLabel::IGNORE;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Minibatch {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], amount: usize) -> Vec<usize> {
    let mut out: Vec<usize> = sample(rng, pool.len(), amount.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect();
    out.sort_unstable();
    out
}

/// Uniform sampling without replacement; missing positives are made up
/// with extra negatives.
pub fn sample_minibatch<R: Rng + ?Sized>(labels: &[AnchorLabel], rng: &mut R, config: &TargetConfig) -> Result<Minibatch> {
    let quota = config.max_positives()?;
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].state == LabelState::Positive).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].state == LabelState::Negative).collect();
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::Sampling("no positive or negative anchors to sample from".into()));
    }
    let positives = pick(rng, &pos, quota);
    let negatives = pick(rng, &neg, config.batch_size - positives.len());
    Ok(Minibatch { positives, negatives })
}

/// Per-anchor training targets of one image.
#[derive(Clone, Debug)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
    /// 0 for background, `class_id + 1` for positives.
    pub classes: Vec<usize>,
    /// Encoded regression targets; zero for anything but positives.
    pub deltas: Vec<[f64; 4]>,
}

/// Labels every anchor and encodes regression targets. With
/// `class_aware` false every positive gets target class 1 (objectness).
pub fn build_targets(
    anchors: &[Bbox],
    gts: &[GtBox],
    config: &TargetConfig,
    class_aware: bool,
    image_size: (f64, f64),
) -> Result<AnchorTargets> {
    let boxes: Vec<Bbox> = gts.iter().map(|g| g.bbox).collect();
    let mut labels = label_anchors(anchors, &boxes, config)?;
    if config.ignore_cross_boundary {
        ignore_cross_boundary(&mut labels, anchors, image_size.0, image_size.1);
    }
    let mut classes = vec![0; anchors.len()];
    let mut deltas = vec![[0.0; 4]; anchors.len()];
    for (i, l) in labels.iter().enumerate() {
        if let Some(j) = l.matched {
            classes[i] = if class_aware { gts[j].class_id + 1 } else { 1 };
            deltas[i] = encode_box(&anchors[i], &gts[j].bbox)?;
        }
    }
    Ok(AnchorTargets { labels, classes, deltas })
}
