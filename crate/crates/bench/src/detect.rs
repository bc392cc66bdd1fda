//! Inference: forward pass, decoding, score threshold and per-class NMS.

use lffn_core::detection::{decode_box_clamped, flatten_predictions, Bbox};
use lffn_core::formats::{format_predictions, PredRecord, PRED_HEADER};
use lffn_core::kernels::softmax;
use lffn_core::nms::{nms_per_class, Detection, NmsConfig};
use lffn_core::{Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{DetectConfig, RunConfig};
use crate::model::{anchors_for, anchors_per_cell, Detector, Phase};

/// NMS seed of the `index`-th image, so stochastic runs are reproducible
/// regardless of how images are scheduled.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Candidate detections above the score threshold, before NMS, best first.
pub fn candidates(detector: &Detector, config: &RunConfig, detect: &DetectConfig, image: &Tensor) -> Result<Vec<Detection>> {
    let s = image.shape();
    if s.n != 1 {
        return Err(Error::Dimension(format!("detect expects one image at a time, got batch {}", s.n)));
    }
    // Evaluation-mode gating is deterministic, the generator is never drawn from.
    let preds = detector.forward(image, Phase::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
    let sizes: Vec<(usize, usize)> = preds.iter().map(|p| (p.logits.shape().h, p.logits.shape().w)).collect();
    let anchors = anchors_for(config, &sizes)?;
    let flat = flatten_predictions(&preds, 0, anchors_per_cell(config));
    let (w, h) = (s.w as f64, s.h as f64);
    let mut out = Vec::new();
    for (i, anchor) in anchors.iter().enumerate() {
        let probs = softmax(flat.logits_of(i));
        let mut decoded: Option<Option<Bbox>> = None;
        for (k, &p) in probs.iter().enumerate().skip(1) {
            if p < detect.score_threshold || !p.is_finite() {
                continue;
            }
            let b = *decoded.get_or_insert_with(|| {
                let b = decode_box_clamped(anchor, &flat.deltas[i]).clip(w, h);
                (b.width() > 1e-6 && b.height() > 1e-6).then_some(b)
            });
            if let Some(bbox) = b {
                out.push(Detection { bbox, score: p, class_id: k - 1 });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(detect.pre_nms_top_k);
    Ok(out)
}

pub fn detect_image(
    detector: &Detector,
    config: &RunConfig,
    detect: &DetectConfig,
    image: &Tensor,
    index: usize,
) -> Result<Vec<Detection>> {
    let cands = candidates(detector, config, detect, image)?;
    let nms = NmsConfig { seed: image_seed(detect.nms.seed, index), ..detect.nms };
    let mut kept = nms_per_class(&cands, &nms)?;
    kept.truncate(detect.max_per_image);
    Ok(kept)
}

/// Detections for every image, in input order.
pub fn detect_images(
    detector: &Detector,
    config: &RunConfig,
    detect: &DetectConfig,
    images: &[(String, Tensor)],
) -> Result<Vec<PredRecord>> {
    detect.nms.validate()?;
    let per_image: Vec<Vec<PredRecord>> = images
        .par_iter()
        .enumerate()
        .map(|(i, (id, img))| {
            let dets = detect_image(detector, config, detect, img, i)?;
            Ok(dets.iter().map(|d| PredRecord::from_detection(id, d)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn predictions_text(records: &[PredRecord]) -> String {
    format!("{PRED_HEADER}\n{}", format_predictions(records))
}
