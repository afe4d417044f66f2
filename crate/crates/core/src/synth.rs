//! Procedural scenes standing in for backbone features and object proposals.
//!
//! Each scene is rendered directly at feature-map resolution. Channel layout
//! for `K` classes: `0..K` class-identity plateaus, `K` objectness, `K + 1`
//! vertical-edge ridges, `K + 2` horizontal-edge ridges, remaining channels
//! background only. Every channel also carries a smooth random field plus
//! white noise, and some scenes contain class-colored clutter with no
//! objectness or edges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{Dataset, Scene};
use crate::detect::{select_scale, ScaleConfig};
use crate::geometry::{iou, BBox};
use crate::roipool::FeatureMap;
use crate::sampler::{AnnotatedImage, GroundTruth};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub stride: f64,
    pub min_side: f64,
    pub max_side: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Jittered proposals drawn around every ground-truth box.
    pub proposals_per_object: usize,
    /// Uniformly placed proposals per image.
    pub random_proposals: usize,
    pub max_clutter: usize,
    pub background_amplitude: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            channels: 8,
            stride: 16.0,
            min_side: 320.0,
            max_side: 480.0,
            min_objects: 1,
            max_objects: 4,
            min_object_size: 64.0,
            max_object_size: 200.0,
            proposals_per_object: 40,
            random_proposals: 100,
            max_clutter: 4,
            background_amplitude: 0.5,
            noise_std: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one object class".into()));
        }
        if self.channels < self.num_classes + 3 {
            return Err(Error::Config(format!(
                "{} channels cannot hold {} class channels plus objectness and two edge channels",
                self.channels, self.num_classes
            )));
        }
        if !(self.stride > 0.0 && self.min_side > 0.0 && self.min_side <= self.max_side) {
            return Err(Error::Config(
                "image sides and stride must be positive and ordered".into(),
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(
                "object count range must be 1 <= min <= max".into(),
            ));
        }
        if !(self.min_object_size > 0.0
            && self.min_object_size <= self.max_object_size
            && self.max_object_size <= self.min_side)
        {
            return Err(Error::Config(
                "object size range must fit inside the smallest image".into(),
            ));
        }
        if self.proposals_per_object == 0 {
            return Err(Error::Config(
                "need at least one proposal per object".into(),
            ));
        }
        Ok(())
    }
}

/// Soft indicator of `[lo, hi]` with a linear ramp of width `ramp` at each end.
fn soft_span(x: f64, lo: f64, hi: f64, ramp: f64) -> f64 {
    ((x - lo) / ramp + 0.5).clamp(0.0, 1.0) * ((hi - x) / ramp + 0.5).clamp(0.0, 1.0)
}

fn ridge(x: f64, at: f64, width: f64) -> f64 {
    let d = (x - at) / width;
    (-d * d).exp()
}

fn random_box<R: Rng>(rng: &mut R, w: f64, h: f64, min: f64, max: f64) -> BBox {
    let bw = rng.random_range(min..=max.min(w));
    let bh = rng.random_range(min..=max.min(h));
    let x1 = rng.random_range(0.0..=(w - bw));
    let y1 = rng.random_range(0.0..=(h - bh));
    BBox {
        x1,
        y1,
        x2: x1 + bw,
        y2: y1 + bh,
    }
}

fn jitter<R: Rng>(rng: &mut R, gt: &BBox, shift: f64, log_scale: f64) -> BBox {
    let (cx, cy) = gt.center();
    let (w, h) = (gt.width(), gt.height());
    BBox::from_center(
        cx + rng.random_range(-shift..=shift) * w,
        cy + rng.random_range(-shift..=shift) * h,
        w * rng.random_range(-log_scale..=log_scale).exp(),
        h * rng.random_range(-log_scale..=log_scale).exp(),
    )
}

/// Renders scene `index` of the stream identified by `seed`.
///
/// Scenes are independent of each other, so a dataset of `n` scenes is a
/// prefix of any longer dataset with the same seed.
pub fn generate_scene(cfg: &SynthConfig, seed: u64, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let width = rng.random_range(cfg.min_side..=cfg.max_side).round();
    let height = rng.random_range(cfg.min_side..=cfg.max_side).round();

    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        for _attempt in 0..50 {
            let b = random_box(
                &mut rng,
                width,
                height,
                cfg.min_object_size,
                cfg.max_object_size,
            );
            if gts.iter().all(|g| iou(&g.bbox, &b) < 0.2) {
                gts.push(GroundTruth {
                    bbox: b,
                    class: rng.random_range(1..=cfg.num_classes),
                });
                break;
            }
        }
    }
    if gts.is_empty() {
        return Err(Error::Insufficient(format!(
            "could not place objects in scene {index}"
        )));
    }

    let mut proposals = Vec::new();
    for g in &gts {
        let mut has_fg = false;
        for _ in 0..cfg.proposals_per_object {
            let p = jitter(&mut rng, &g.bbox, 0.35, 0.45).clamp_to(width, height);
            if p.has_positive_extent() {
                has_fg |= iou(&p, &g.bbox) >= 0.5;
                proposals.push(p);
            }
        }
        if !has_fg {
            proposals.push(jitter(&mut rng, &g.bbox, 0.03, 0.03).clamp_to(width, height));
        }
    }
    for _ in 0..cfg.random_proposals {
        proposals.push(random_box(
            &mut rng,
            width,
            height,
            24.0,
            cfg.max_object_size * 1.25,
        ));
    }

    let n_clutter = rng.random_range(0..=cfg.max_clutter);
    let clutter: Vec<(BBox, usize, f64)> = (0..n_clutter)
        .map(|_| {
            (
                random_box(&mut rng, width, height, 24.0, 120.0),
                rng.random_range(0..cfg.num_classes),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();

    let factor = select_scale(width, height, &ScaleConfig::default())?;
    let cell = cfg.stride / factor;
    let fh = (height / cell).ceil() as usize;
    let fw = (width / cell).ceil() as usize;
    let k = cfg.num_classes;

    struct Bump {
        cx: f64,
        cy: f64,
        inv2s2: f64,
        amp: f64,
    }
    let bumps: Vec<Vec<Bump>> = (0..cfg.channels)
        .map(|_| {
            (0..5)
                .map(|_| {
                    let s: f64 = rng.random_range(30.0..120.0);
                    Bump {
                        cx: rng.random_range(0.0..width),
                        cy: rng.random_range(0.0..height),
                        inv2s2: 1.0 / (2.0 * s * s),
                        amp: rng.random_range(-cfg.background_amplitude..=cfg.background_amplitude),
                    }
                })
                .collect()
        })
        .collect();
    let noise =
        Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let mut data = vec![0.0; cfg.channels * fh * fw];
    let plane = fh * fw;
    for i in 0..fh {
        let y = (i as f64 + 0.5) * cell;
        for j in 0..fw {
            let x = (j as f64 + 0.5) * cell;
            let at = i * fw + j;
            for (ch, bs) in bumps.iter().enumerate() {
                let field: f64 = bs
                    .iter()
                    .map(|b| {
                        let (dx, dy) = (x - b.cx, y - b.cy);
                        b.amp * (-(dx * dx + dy * dy) * b.inv2s2).exp()
                    })
                    .sum();
                data[ch * plane + at] = field + noise.sample(&mut rng);
            }
            for g in &gts {
                let b = &g.bbox;
                let sx = soft_span(x, b.x1, b.x2, cell);
                let sy = soft_span(y, b.y1, b.y2, cell);
                let inside = sx * sy;
                data[(g.class - 1) * plane + at] += inside;
                data[k * plane + at] += 0.8 * inside;
                let in_rows = soft_span(y, b.y1, b.y2, cell);
                let in_cols = soft_span(x, b.x1, b.x2, cell);
                data[(k + 1) * plane + at] +=
                    (ridge(x, b.x1, cell) + ridge(x, b.x2, cell)) * in_rows;
                data[(k + 2) * plane + at] +=
                    (ridge(y, b.y1, cell) + ridge(y, b.y2, cell)) * in_cols;
            }
            for (b, ch, amp) in &clutter {
                data[ch * plane + at] +=
                    amp * soft_span(x, b.x1, b.x2, cell) * soft_span(y, b.y1, b.y2, cell);
            }
        }
    }
    let features = FeatureMap::new(cfg.channels, fh, fw, data)?;
    let image = AnnotatedImage::new(format!("img{index:05}"), width, height, gts, proposals)?;
    Ok(Scene {
        image,
        features,
        factor,
    })
}

/// Scenes `first..first + n` of the stream for `seed`.
pub fn generate_dataset(n: usize, cfg: &SynthConfig, seed: u64, first: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one image".into()));
    }
    let scenes = (first..first + n)
        .into_par_iter()
        .map(|i| generate_scene(cfg, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        scenes,
        stride: cfg.stride,
        num_classes: cfg.num_classes,
    })
}

pub const DEFAULT_TRAIN_IMAGES: usize = 200;
pub const DEFAULT_TEST_IMAGES: usize = 50;

/// Disjoint train and test sets drawn from one seed: scenes `0..n_train`
/// and `n_train..n_train + n_test`.
pub fn generate_split(
    n_train: usize,
    n_test: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    Ok((
        generate_dataset(n_train, cfg, seed, 0)?,
        generate_dataset(n_test, cfg, seed, n_train)?,
    ))
}

/// Every ground-truth box has at least one proposal with IoU >= 0.5.
pub fn is_learnable(image: &AnnotatedImage) -> bool {
    image
        .gts
        .iter()
        .all(|g| image.proposals.iter().any(|p| iou(p, &g.bbox) >= 0.5))
}
