//! Trains and evaluates every ablation mode on one shared dataset.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use lffn_core::eval::evaluate;
use lffn_core::params::ParamSet;
use lffn_core::Result;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{AblationMode, RunConfig};
use crate::dataset::{gen_synthetic, Split, SyntheticDataset};
use crate::detect::detect_images;
use crate::io::write_atomic;
use crate::train::{loss_csv, smoothed_endpoints, train_until, TrainingSet};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub params: usize,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub map: f64,
    pub class_ap: Vec<f64>,
    pub small_object_ap: f64,
    /// This mode's small-object AP minus the single-map detector's.
    pub small_object_gain: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub small_object_class: usize,
    pub rows: Vec<AblationRow>,
    /// Wall-clock seconds per mode; kept out of the CSV so it stays reproducible.
    pub seconds: Vec<(AblationMode, f64)>,
}

impl AblationReport {
    /// Whether the single-map detector is no better than the full fusion
    /// detector on the small-object class. Reported, not enforced.
    pub fn single_map_small_ap_le_lffn(&self) -> Option<bool> {
        let ap = |m| self.rows.iter().find(|r| r.mode == m).map(|r| r.small_object_ap);
        Some(ap(AblationMode::SingleMap)? <= ap(AblationMode::Lffn)?)
    }

    pub fn csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("mode,params,iterations,initial_smoothed_loss,final_smoothed_loss,map");
        for n in class_names {
            let _ = write!(out, ",ap_{n}");
        }
        out.push_str(",small_object_ap,small_object_ap_gain_vs_single_map\n");
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{},{},{}", r.mode, r.params, r.iterations, r.initial_loss, r.final_loss, r.map);
            for ap in &r.class_ap {
                let _ = write!(out, ",{ap}");
            }
            let _ = writeln!(out, ",{},{}", r.small_object_ap, r.small_object_gain);
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("mode,seconds\n");
        for (m, s) in &self.seconds {
            let _ = writeln!(out, "{m},{s:.3}");
        }
        out
    }
}

fn run_mode(config: &RunConfig, train: &SyntheticDataset, test: &SyntheticDataset, out_dir: Option<&Path>) -> Result<AblationRow> {
    let set = TrainingSet::new(config, train)?;
    let mut state = Checkpoint::fresh(config)?;
    let rows = train_until(&mut state, &set, config.train.iterations, None)?;
    if let Some(dir) = out_dir {
        let name = config.mode.name().replace('+', "_");
        write_atomic(&dir.join(format!("ablate_{name}_loss.csv")), loss_csv(&rows).as_bytes())?;
    }
    let (initial_loss, final_loss) = smoothed_endpoints(&rows, config.train.smoothing_window).unwrap_or((0.0, 0.0));
    let images: Vec<_> = test.ids.iter().cloned().zip(test.images.iter().cloned()).collect();
    let preds = detect_images(&state.detector, config, &config.detect, &images)?;
    let classes: Vec<usize> = (0..config.dataset.classes.len()).collect();
    let report = evaluate(&preds, &test.gt_records(), Some(&classes), &config.eval)?;
    let small = config.dataset.small_class();
    Ok(AblationRow {
        mode: config.mode,
        params: state.detector.num_params(),
        iterations: config.train.iterations,
        initial_loss,
        final_loss,
        map: report.map,
        class_ap: classes.iter().map(|&c| report.ap_of(c).unwrap_or(0.0)).collect(),
        small_object_ap: report.ap_of(small).unwrap_or(0.0),
        small_object_gain: 0.0,
    })
}

/// Every mode sees the same seed, datasets and iteration budget.
pub fn ablate(config: &RunConfig, out_dir: Option<&Path>) -> Result<AblationReport> {
    config.validate()?;
    let train = gen_synthetic(&config.dataset, config.seed, Split::Train)?;
    let test = gen_synthetic(&config.dataset, config.seed, Split::Test)?;
    let mut rows = Vec::new();
    let mut seconds = Vec::new();
    for mode in AblationMode::ALL {
        let cfg = RunConfig { mode, ..config.clone() };
        let start = Instant::now();
        rows.push(run_mode(&cfg, &train, &test, out_dir)?);
        seconds.push((mode, start.elapsed().as_secs_f64()));
    }
    let base = rows.iter().find(|r| r.mode == AblationMode::SingleMap).map(|r| r.small_object_ap).unwrap_or(0.0);
    for r in &mut rows {
        r.small_object_gain = r.small_object_ap - base;
    }
    Ok(AblationReport { small_object_class: config.dataset.small_class(), rows, seconds })
}
