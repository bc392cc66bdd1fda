//! Seeded synthetic detection scenes: class-coloured shapes on textured noise.

use lffn_core::container::TensorArchive;
use lffn_core::detection::{iou, Bbox, GtBox};
use lffn_core::formats::{format_gt, GtRecord, GT_HEADER};
use lffn_core::{Error, Result, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Disk,
    Ring,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub shape: ShapeKind,
    /// Inclusive range of the box width in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Height over width.
    pub aspect: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub train_images: usize,
    pub test_images: usize,
    /// Inclusive range of objects placed in each image.
    pub objects_per_image: [usize; 2],
    pub classes: Vec<ClassSpec>,
    pub noise_std: f64,
    /// Largest IoU allowed between two objects of the same image.
    pub max_overlap: f64,
    /// Placement attempts per object before generation fails.
    pub max_retries: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let class = |name: &str, shape, min_size, max_size, aspect, color| ClassSpec {
            name: name.into(),
            shape,
            min_size,
            max_size,
            aspect,
            color,
        };
        Self {
            image_size: 64,
            train_images: 50,
            test_images: 20,
            objects_per_image: [1, 4],
            classes: vec![
                class("plane", ShapeKind::Cross, 5, 9, 1.0, [0.95, 0.2, 0.2]),
                class("bridge", ShapeKind::Rect, 12, 24, 0.4, [0.2, 0.9, 0.3]),
                class("storage", ShapeKind::Disk, 10, 18, 1.0, [0.25, 0.35, 0.95]),
                class("harbor", ShapeKind::Ring, 20, 32, 1.0, [0.95, 0.85, 0.2]),
            ],
            noise_std: 0.05,
            max_overlap: 0.1,
            max_retries: 200,
        }
    }
}

fn box_height(width: usize, aspect: f64) -> usize {
    ((width as f64 * aspect).round() as usize).max(2)
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("dataset: {m}")));
        if self.image_size < 8 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        let [lo, hi] = self.objects_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("objects_per_image [{lo}, {hi}] must satisfy 1 <= min <= max"));
        }
        for c in &self.classes {
            let h = box_height(c.max_size, c.aspect);
            if c.min_size < 2 || c.min_size > c.max_size || c.max_size > self.image_size || h > self.image_size {
                return bad(format!(
                    "class '{}' size range [{}, {}] does not fit a {} image",
                    c.name, c.min_size, c.max_size, self.image_size
                ));
            }
            if !(c.aspect.is_finite() && c.aspect > 0.0) {
                return bad(format!("class '{}' aspect must be positive", c.name));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("max_overlap must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Ratio of the largest to the smallest object width over all classes.
    pub fn scale_spread(&self) -> f64 {
        let lo = self.classes.iter().map(|c| c.min_size).min().unwrap_or(1);
        let hi = self.classes.iter().map(|c| c.max_size).max().unwrap_or(1);
        hi as f64 / lo as f64
    }

    /// Class whose objects are smallest on average.
    pub fn small_class(&self) -> usize {
        let mean_area = |c: &ClassSpec| {
            let n = (c.max_size - c.min_size + 1) as f64;
            (c.min_size..=c.max_size).map(|w| (w * box_height(w, c.aspect)) as f64).sum::<f64>() / n
        };
        (0..self.classes.len())
            .min_by(|&a, &b| mean_area(&self.classes[a]).total_cmp(&mean_area(&self.classes[b])))
            .unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1 << 32,
            Split::Test => 2 << 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub split: Split,
    pub ids: Vec<String>,
    /// One `1 × 3 × S × S` tensor per image.
    pub images: Vec<Tensor>,
    pub gts: Vec<Vec<GtBox>>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn gt_records(&self) -> Vec<GtRecord> {
        self.ids
            .iter()
            .zip(&self.gts)
            .flat_map(|(id, gts)| {
                gts.iter().map(move |g| GtRecord { image_id: id.clone(), class_id: g.class_id, bbox: g.bbox })
            })
            .collect()
    }

    pub fn gt_text(&self) -> String {
        format!("{GT_HEADER}\n{}", format_gt(&self.gt_records()))
    }

    pub fn image_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::default();
        archive.metadata.insert("split".into(), self.split.name().into());
        archive.tensors = self.ids.iter().cloned().zip(self.images.iter().cloned()).collect();
        archive
    }

    /// Images of an archive written by [`SyntheticDataset::image_archive`],
    /// without ground truth.
    pub fn images_from_archive(archive: &TensorArchive) -> Result<Vec<(String, Tensor)>> {
        for (id, t) in &archive.tensors {
            let s = t.shape();
            if s.n != 1 || s.c != 3 {
                return Err(Error::Dimension(format!("image '{id}' has shape {s}, expected 1x3xHxW")));
            }
        }
        Ok(archive.tensors.clone())
    }
}

/// Generates `count` images of `split`. Image `i` depends only on
/// `(seed, split, i)`, so images can be produced in parallel.
pub fn gen_synthetic(config: &DatasetConfig, seed: u64, split: Split) -> Result<SyntheticDataset> {
    config.validate()?;
    let count = match split {
        Split::Train => config.train_images,
        Split::Test => config.test_images,
    };
    let scenes: Vec<(Tensor, Vec<GtBox>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(split.stream() + i as u64);
            render_scene(config, &mut rng).map_err(|e| match e {
                Error::Sampling(m) => Error::Sampling(format!("{}{i:04}: {m}", split.name())),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let ids = (0..count).map(|i| format!("{}{i:04}", split.name())).collect();
    let (images, gts) = scenes.into_iter().unzip();
    Ok(SyntheticDataset { split, ids, images, gts })
}

fn place<R: Rng + ?Sized>(config: &DatasetConfig, class_id: usize, placed: &[GtBox], rng: &mut R) -> Result<GtBox> {
    let spec = &config.classes[class_id];
    let s = config.image_size;
    for _ in 0..config.max_retries.max(1) {
        let w = rng.random_range(spec.min_size..=spec.max_size);
        let h = box_height(w, spec.aspect);
        let x = rng.random_range(0..=s - w);
        let y = rng.random_range(0..=s - h);
        let bbox = Bbox { x1: x as f64, y1: y as f64, x2: (x + w) as f64, y2: (y + h) as f64 };
        if placed.iter().all(|p| iou(&p.bbox, &bbox) <= config.max_overlap) {
            return Ok(GtBox { bbox, class_id });
        }
    }
    Err(Error::Sampling(format!(
        "could not place a '{}' after {} attempts; lower objects_per_image or raise max_overlap",
        spec.name, config.max_retries
    )))
}

/// Whether the pixel centred at `(px, py)` is covered by `shape` inscribed in `b`.
fn covers(shape: ShapeKind, b: &Bbox, px: f64, py: f64) -> bool {
    if px < b.x1 || px >= b.x2 || py < b.y1 || py >= b.y2 {
        return false;
    }
    let (cx, cy) = b.center();
    let u = (px - cx) / (b.width() / 2.0);
    let v = (py - cy) / (b.height() / 2.0);
    match shape {
        ShapeKind::Rect => true,
        ShapeKind::Disk => u * u + v * v <= 1.0,
        ShapeKind::Ring => (0.36..=1.0).contains(&(u * u + v * v)),
        ShapeKind::Cross => u.abs() <= 0.34 || v.abs() <= 0.34,
    }
}

fn render_scene<R: Rng + ?Sized>(config: &DatasetConfig, rng: &mut R) -> Result<(Tensor, Vec<GtBox>)> {
    let s = config.image_size;
    let [lo, hi] = config.objects_per_image;
    let n_obj = rng.random_range(lo..=hi);
    let mut gts = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class_id = rng.random_range(0..config.classes.len());
        let g = place(config, class_id, &gts, rng)?;
        gts.push(g);
    }

    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    let base: f64 = rng.random_range(0.3..0.5);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut img = Tensor::zeros([1, 3, s, s]);
    for y in 0..s {
        for x in 0..s {
            let texture: f64 = waves
                .iter()
                .map(|&(a, fx, fy, ph)| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let owner = gts.iter().rev().find(|g| covers(config.classes[g.class_id].shape, &g.bbox, px, py));
            for c in 0..3 {
                let v = match owner {
                    Some(g) => config.classes[g.class_id].color[c],
                    None => base + texture,
                };
                *img.at_mut(0, c, y, x) = v + noise.sample(rng);
            }
        }
    }
    Ok((img, gts))
}
