//! Batch-size-one SGD with momentum over the joint classification and
//! box-regression loss.

use std::fmt::Write as _;
use std::path::Path;

use lffn_core::container::TensorArchive;
use lffn_core::detection::{
    build_targets, compute_loss, flatten_predictions, sample_minibatch, scatter_predictions, AnchorTargets, Bbox,
    LevelPrediction,
};
use lffn_core::params::ParamSet;
use lffn_core::{Error, Result};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{AblationMode, RunConfig};
use crate::dataset::SyntheticDataset;
use crate::io::write_atomic;
use crate::model::{anchors_for, anchors_per_cell, Phase};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub iteration: usize,
    pub image_id: String,
    pub total: f64,
    pub classification: f64,
    pub localization: f64,
    pub positives: usize,
    pub negatives: usize,
}

pub const LOSS_CSV_HEADER: &str = "iteration,image_id,total,classification,localization,positives,negatives";

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration, r.image_id, r.total, r.classification, r.localization, r.positives, r.negatives
        );
    }
    out
}

/// Mean of the first and of the last `window` totals.
pub fn smoothed_endpoints(rows: &[LossRow], window: usize) -> Option<(f64, f64)> {
    if rows.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(rows.len());
    let mean = |s: &[LossRow]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
    Some((mean(&rows[..w]), mean(&rows[rows.len() - w..])))
}

/// Spatial sizes of the head inputs for a square image.
pub fn level_sizes(config: &RunConfig) -> Vec<(usize, usize)> {
    let mut s = config.dataset.image_size;
    let mut sizes = Vec::with_capacity(5);
    for _ in 0..5 {
        s = s.div_ceil(2);
        sizes.push((s, s));
    }
    if config.mode == AblationMode::SingleMap {
        vec![sizes[3]]
    } else {
        sizes
    }
}

/// Anchors and per-image targets, fixed for the whole run.
pub struct TrainingSet<'a> {
    pub dataset: &'a SyntheticDataset,
    pub anchors: Vec<Bbox>,
    pub targets: Vec<AnchorTargets>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(config: &RunConfig, dataset: &'a SyntheticDataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Sampling("training set is empty".into()));
        }
        let anchors = anchors_for(config, &level_sizes(config))?;
        let s = config.dataset.image_size as f64;
        let targets = dataset
            .gts
            .iter()
            .map(|g| build_targets(&anchors, g, &config.targets, true, (s, s)))
            .collect::<Result<_>>()?;
        Ok(Self { dataset, anchors, targets })
    }
}

/// Runs iterations `state.iteration + 1 ..= until`. With an output directory,
/// checkpoints are written on the configured period and a diagnostic dump is
/// written before aborting on a non-finite loss.
pub fn train_until(state: &mut Checkpoint, set: &TrainingSet, until: usize, out_dir: Option<&Path>) -> Result<Vec<LossRow>> {
    let config = state.config.clone();
    let a = anchors_per_cell(&config);
    let mut rows = Vec::with_capacity(until.saturating_sub(state.iteration));
    while state.iteration < until {
        let it = state.iteration + 1;
        let idx = (it - 1) % set.dataset.len();
        let image = &set.dataset.images[idx];
        let targets = &set.targets[idx];
        let batch = sample_minibatch(&targets.labels, &mut state.rng, &config.targets)?;
        let (preds, cache) = state.detector.forward_traced(image, Phase::Train, &mut state.rng)?;
        let flat = flatten_predictions(&preds, 0, a);
        if flat.len() != set.anchors.len() {
            return Err(Error::Dimension(format!(
                "head produced {} anchors, expected {}",
                flat.len(),
                set.anchors.len()
            )));
        }
        let outcome = compute_loss(&flat, &batch, targets, config.train.loss_lambda);
        let (loss, g) = match outcome {
            Ok(v) if v.0.total.is_finite() => v,
            Ok((l, _)) => return Err(diverged(state, set, idx, it, &format!("loss {}", l.total), out_dir)),
            Err(Error::Numeric(m)) => return Err(diverged(state, set, idx, it, &m, out_dir)),
            Err(e) => return Err(e),
        };
        let mut grads: Vec<LevelPrediction> = preds.iter().map(|p| p.zeros_like()).collect();
        scatter_predictions(&g, 0, a, &mut grads);
        let dp = state.detector.backward(&cache, &grads)?;
        sgd_step(state, &dp.flatten());
        state.iteration = it;
        rows.push(LossRow {
            iteration: it,
            image_id: set.dataset.ids[idx].clone(),
            total: loss.total,
            classification: loss.classification,
            localization: loss.localization,
            positives: loss.positives,
            negatives: loss.negatives,
        });
        if let Some(dir) = out_dir {
            let every = config.train.checkpoint_every;
            if every > 0 && it % every == 0 {
                state.save(&dir.join(format!("checkpoint_{it:06}.lffc")))?;
            }
        }
    }
    Ok(rows)
}

/// `v ← μv + g`, `w ← w − ηv`.
fn sgd_step(state: &mut Checkpoint, grad: &[f64]) {
    let (lr, mu) = (state.config.optimizer.learning_rate, state.config.optimizer.momentum);
    let mut w = state.detector.flatten();
    for ((wi, vi), gi) in w.iter_mut().zip(state.velocity.iter_mut()).zip(grad) {
        *vi = mu * *vi + gi;
        *wi -= lr * *vi;
    }
    state.detector.unflatten(&w);
}

fn diverged(state: &Checkpoint, set: &TrainingSet, idx: usize, it: usize, what: &str, out_dir: Option<&Path>) -> Error {
    let id = &set.dataset.ids[idx];
    let mut msg = format!("non-finite training loss at iteration {it} on image {id} ({what})");
    if let Some(dir) = out_dir {
        let path = dir.join(format!("diverged_{it:06}.lfft"));
        let mut dump = TensorArchive::default();
        dump.metadata.insert("iteration".into(), it.to_string());
        dump.metadata.insert("image_id".into(), id.clone());
        dump.metadata.insert("cause".into(), what.to_string());
        let gts: Vec<String> = set.dataset.gts[idx]
            .iter()
            .map(|g| format!("{} {} {} {} {}", g.class_id, g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2))
            .collect();
        dump.metadata.insert("ground_truth".into(), gts.join("; "));
        dump.metadata.insert("config".into(), state.config.to_toml());
        dump.tensors.push((id.clone(), set.dataset.images[idx].clone()));
        if write_atomic(&path, &dump.to_bytes()).is_ok() {
            let _ = write!(msg, "; batch dumped to {}", path.display());
        }
    }
    Error::Numeric(msg)
}
