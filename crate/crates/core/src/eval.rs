//! Detection matching, precision/recall curves and average precision.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::detection::iou;
use crate::error::{Error, Result};
use crate::formats::{GtRecord, PredRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMethod {
    /// Mean of the interpolated precision at recall 0, 0.1, …, 1.
    ElevenPoint,
    /// Area under the right-to-left maximum precision envelope.
    #[default]
    Continuous,
}

impl std::str::FromStr for ApMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elevenpoint" => Ok(Self::ElevenPoint),
            "continuous" => Ok(Self::Continuous),
            _ => Err(Error::config(format!("unknown AP method '{s}', expected elevenpoint or continuous"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub method: ApMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            method: ApMethod::Continuous,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::config(format!("match IoU threshold {} outside (0, 1]", self.iou_threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matched {
    pub score: f64,
    pub true_positive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

/// Greedy matching of one class: detections in descending score order each
/// take the unmatched ground truth of the same image with the highest IoU,
/// provided it reaches the threshold. Returned in that descending order.
pub fn match_detections(preds: &[PredRecord], gts: &[GtRecord], config: &EvalConfig) -> Vec<Matched> {
    let mut by_image: HashMap<&str, Vec<(usize, &GtRecord)>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push((i, g));
    }
    let mut used = vec![false; gts.len()];
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|i| {
            let p = &preds[i];
            let mut best: Option<(usize, f64)> = None;
            for &(j, g) in by_image.get(p.image_id.as_str()).into_iter().flatten() {
                if used[j] || g.class_id != p.class_id {
                    continue;
                }
                let v = iou(&p.bbox, &g.bbox);
                if v >= config.iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            Matched {
                score: p.score,
                true_positive: best.is_some(),
            }
        })
        .collect()
}

/// Cumulative precision and recall after each detection; empty without ground truth.
pub fn pr_curve(matched: &[Matched], total_gts: usize) -> Vec<PrPoint> {
    if total_gts == 0 {
        return Vec::new();
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    matched
        .iter()
        .map(|m| {
            if m.true_positive {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                recall: tp as f64 / total_gts as f64,
                precision: tp as f64 / (tp + fp) as f64,
                score: m.score,
            }
        })
        .collect()
}

pub fn average_precision(curve: &[PrPoint], method: ApMethod) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    match method {
        ApMethod::ElevenPoint => {
            let sum: f64 = (0..=10)
                .map(|i| {
                    let r = i as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|p| p.recall >= r)
                        .map(|p| p.precision)
                        .fold(0.0, f64::max)
                })
                .sum();
            sum / 11.0
        }
        ApMethod::Continuous => {
            let mut recall = vec![0.0];
            recall.extend(curve.iter().map(|p| p.recall));
            recall.push(1.0);
            let mut precision = vec![0.0];
            precision.extend(curve.iter().map(|p| p.precision));
            precision.push(0.0);
            for i in (0..precision.len() - 1).rev() {
                precision[i] = precision[i].max(precision[i + 1]);
            }
            (1..recall.len())
                .map(|i| (recall[i] - recall[i - 1]) * precision[i])
                .sum()
        }
    }
}

pub fn mean_ap(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::config("mAP needs at least one class"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub ap: f64,
    pub num_gts: usize,
    pub num_detections: usize,
    /// Set when the class has no ground truth, so its AP is 0 by definition.
    pub no_ground_truth: bool,
    pub curve: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub classes: Vec<ClassReport>,
    pub map: f64,
}

impl EvalReport {
    pub fn ap_of(&self, class_id: usize) -> Option<f64> {
        self.classes.iter().find(|c| c.class_id == class_id).map(|c| c.ap)
    }
}

/// Evaluates every class in `classes`, or every class with ground truth when `None`.
pub fn evaluate(
    preds: &[PredRecord],
    gts: &[GtRecord],
    classes: Option<&[usize]>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let class_ids: Vec<usize> = match classes {
        Some(c) => c.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
        None => gts.iter().map(|g| g.class_id).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let reports: Vec<ClassReport> = class_ids
        .iter()
        .map(|&c| {
            let p: Vec<PredRecord> = preds.iter().filter(|d| d.class_id == c).cloned().collect();
            let g: Vec<GtRecord> = gts.iter().filter(|d| d.class_id == c).cloned().collect();
            let curve = pr_curve(&match_detections(&p, &g, config), g.len());
            ClassReport {
                class_id: c,
                ap: average_precision(&curve, config.method),
                num_gts: g.len(),
                num_detections: p.len(),
                no_ground_truth: g.is_empty(),
                curve,
            }
        })
        .collect();
    let map = mean_ap(&reports.iter().map(|r| r.ap).collect::<Vec<_>>())?;
    Ok(EvalReport {
        config: *config,
        classes: reports,
        map,
    })
}
