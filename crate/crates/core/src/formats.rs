//! Line-oriented annotation and prediction files.
//!
//! Ground truth: `image_id class_id x1 y1 x2 y2` per line.
//! Predictions: `image_id class_id score x1 y1 x2 y2` per line.
//! Fields are whitespace separated; blank lines and lines starting with `#`
//! are skipped.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detection::{Bbox, GtBox};
use crate::error::{Error, Result};
use crate::nms::Detection;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: Bbox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    pub bbox: Bbox,
}

impl GtRecord {
    pub fn gt_box(&self) -> GtBox {
        GtBox {
            bbox: self.bbox,
            class_id: self.class_id,
        }
    }
}

impl PredRecord {
    pub fn detection(&self) -> Detection {
        Detection {
            bbox: self.bbox,
            score: self.score,
            class_id: self.class_id,
        }
    }

    pub fn from_detection(image_id: &str, d: &Detection) -> Self {
        Self {
            image_id: image_id.to_string(),
            class_id: d.class_id,
            score: d.score,
            bbox: d.bbox,
        }
    }
}

fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        Some((i + 1, line.split_whitespace().collect()))
    })
}

fn num<T: std::str::FromStr>(line: usize, what: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(Some(line), format!("{what} '{s}' is not a valid number")))
}

fn bbox(line: usize, f: &[&str]) -> Result<Bbox> {
    let v: Vec<f64> = f
        .iter()
        .map(|s| num::<f64>(line, "coordinate", s))
        .collect::<Result<_>>()?;
    Bbox::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::parse(Some(line), e.to_string()))
}

fn check_len(line: usize, f: &[&str], want: usize, layout: &str) -> Result<()> {
    if f.len() != want {
        return Err(Error::parse(
            Some(line),
            format!("expected {want} fields ({layout}), found {}", f.len()),
        ));
    }
    Ok(())
}

pub const GT_HEADER: &str = "# image_id class_id x1 y1 x2 y2";
pub const PRED_HEADER: &str = "# image_id class_id score x1 y1 x2 y2";

pub fn parse_gt(text: &str) -> Result<Vec<GtRecord>> {
    records(text)
        .map(|(line, f)| {
            check_len(line, &f, 6, "image_id class_id x1 y1 x2 y2")?;
            Ok(GtRecord {
                image_id: f[0].to_string(),
                class_id: num(line, "class id", f[1])?,
                bbox: bbox(line, &f[2..6])?,
            })
        })
        .collect()
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredRecord>> {
    records(text)
        .map(|(line, f)| {
            check_len(line, &f, 7, "image_id class_id score x1 y1 x2 y2")?;
            let score: f64 = num(line, "score", f[2])?;
            if !(score.is_finite() && score >= 0.0) {
                return Err(Error::parse(Some(line), format!("score {score} must be finite and non-negative")));
            }
            Ok(PredRecord {
                image_id: f[0].to_string(),
                class_id: num(line, "class id", f[1])?,
                score,
                bbox: bbox(line, &f[3..7])?,
            })
        })
        .collect()
}

pub fn format_gt(records: &[GtRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let b = r.bbox;
        let _ = writeln!(out, "{} {} {} {} {} {}", r.image_id, r.class_id, b.x1, b.y1, b.x2, b.y2);
    }
    out
}

pub fn format_predictions(records: &[PredRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let b = r.bbox;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            r.image_id, r.class_id, r.score, b.x1, b.y1, b.x2, b.y2
        );
    }
    out
}
