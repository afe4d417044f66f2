//! Image-centric minibatch construction.
//!
//! A batch is built from `N` images taken from a seeded permutation of the
//! dataset, with `R / N` RoIs drawn from each: foreground proposals (max IoU
//! with ground truth `>= fg_iou_lo`) up to a quota, the rest background
//! (max IoU in `[bg_iou_lo, bg_iou_hi)`). Proposals below `bg_iou_lo` are
//! never sampled.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{encode, iou, BBox, TargetNormalizer};
use crate::losses::RoiLabel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    /// Object class in `1..=K`.
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub gts: Vec<GroundTruth>,
    pub proposals: Vec<BBox>,
}

impl AnnotatedImage {
    /// Builds an image, clipping every box to the image rectangle.
    pub fn new(
        id: impl Into<String>,
        width: f64,
        height: f64,
        gts: Vec<GroundTruth>,
        proposals: Vec<BBox>,
    ) -> Result<Self> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "image size {width}x{height} must be positive"
            )));
        }
        let clip = |b: &BBox| -> Result<BBox> {
            if !b.is_valid() {
                return Err(Error::InvalidGeometry(format!("{b:?}")));
            }
            Ok(b.clamp_to(width, height))
        };
        let gts = gts
            .iter()
            .map(|g| {
                if g.class == 0 {
                    return Err(Error::Config("ground-truth class must be >= 1".into()));
                }
                Ok(GroundTruth {
                    bbox: clip(&g.bbox)?,
                    class: g.class,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let proposals = proposals.iter().map(clip).collect::<Result<Vec<_>>>()?;
        Ok(AnnotatedImage {
            id: id.into(),
            width,
            height,
            gts,
            proposals,
        })
    }

    /// Mirror image: `x1' = W - x2`, `x2' = W - x1`.
    pub fn flip_horizontal(&self) -> AnnotatedImage {
        AnnotatedImage {
            id: self.id.clone(),
            width: self.width,
            height: self.height,
            gts: self
                .gts
                .iter()
                .map(|g| GroundTruth {
                    bbox: g.bbox.flip_horizontal(self.width),
                    class: g.class,
                })
                .collect(),
            proposals: self
                .proposals
                .iter()
                .map(|p| p.flip_horizontal(self.width))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub images_per_batch: usize,
    pub rois_per_batch: usize,
    pub fg_fraction: f64,
    pub fg_iou_lo: f64,
    pub bg_iou_lo: f64,
    pub bg_iou_hi: f64,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            images_per_batch: 2,
            rois_per_batch: 128,
            fg_fraction: 0.25,
            fg_iou_lo: 0.5,
            bg_iou_lo: 0.1,
            bg_iou_hi: 0.5,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.images_per_batch == 0 || self.rois_per_batch == 0 {
            return fail("images and RoIs per batch must be positive".into());
        }
        if !self.rois_per_batch.is_multiple_of(self.images_per_batch) {
            return fail(format!(
                "RoIs per batch ({}) must be divisible by images per batch ({})",
                self.rois_per_batch, self.images_per_batch
            ));
        }
        if !(0.0 <= self.bg_iou_lo
            && self.bg_iou_lo < self.bg_iou_hi
            && self.bg_iou_hi <= self.fg_iou_lo
            && self.fg_iou_lo <= 1.0)
        {
            return fail(format!(
                "need 0 <= bg_lo ({}) < bg_hi ({}) <= fg_lo ({}) <= 1",
                self.bg_iou_lo, self.bg_iou_hi, self.fg_iou_lo
            ));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) || !(0.0..=1.0).contains(&self.flip_prob) {
            return fail("fg_fraction and flip_prob must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn rois_per_image(&self) -> usize {
        self.rois_per_batch / self.images_per_batch
    }

    /// Foreground cap per image.
    pub fn fg_per_image(&self) -> usize {
        (self.fg_fraction * self.rois_per_image() as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Foreground,
    Background,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub max_iou: f64,
    /// Ground truth with the highest IoU (lowest index on ties); `None` without ground truth.
    pub gt_index: Option<usize>,
    pub role: Role,
}

pub fn assign_rois(
    proposals: &[BBox],
    gts: &[GroundTruth],
    cfg: &SamplerConfig,
) -> Vec<Assignment> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                let o = iou(p, &g.bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            let max_iou = best.map_or(0.0, |(_, o)| o);
            let role = if max_iou >= cfg.fg_iou_lo {
                Role::Foreground
            } else if max_iou >= cfg.bg_iou_lo && max_iou < cfg.bg_iou_hi {
                Role::Background
            } else {
                Role::Ignored
            };
            Assignment {
                max_iou,
                gt_index: best.map(|(gi, _)| gi),
                role,
            }
        })
        .collect()
}

/// Normalizer fitted on every foreground (proposal, matched gt) target of the dataset.
pub fn fit_dataset_normalizer(
    images: &[AnnotatedImage],
    cfg: &SamplerConfig,
) -> Result<(TargetNormalizer, bool)> {
    let mut targets = Vec::new();
    for img in images {
        for (p, a) in img
            .proposals
            .iter()
            .zip(assign_rois(&img.proposals, &img.gts, cfg))
        {
            if let (Role::Foreground, Some(gi)) = (a.role, a.gt_index) {
                if p.has_positive_extent() && img.gts[gi].bbox.has_positive_extent() {
                    targets.push(encode(p, &img.gts[gi].bbox)?);
                }
            }
        }
    }
    TargetNormalizer::fit(&targets)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchEntry {
    /// Index of the source image in the dataset slice.
    pub image: usize,
    /// Proposal in image coordinates (mirrored when `flipped`).
    pub proposal: BBox,
    pub label: RoiLabel,
    pub max_iou: f64,
    pub gt_index: Option<usize>,
    pub flipped: bool,
    /// Background drawn from the widened `[0, bg_iou_hi)` band.
    pub widened: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub entries: Vec<BatchEntry>,
    /// Distinct images in draw order, with their flip decision.
    pub images: Vec<(usize, bool)>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fg_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.label.is_foreground())
            .count()
    }

    /// Canonical little-endian serialization, used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for &(img, flip) in &self.images {
            out.extend_from_slice(&(img as u64).to_le_bytes());
            out.push(flip as u8);
        }
        for e in &self.entries {
            out.extend_from_slice(&(e.image as u64).to_le_bytes());
            for v in [
                e.proposal.x1,
                e.proposal.y1,
                e.proposal.x2,
                e.proposal.y2,
                e.max_iou,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(e.label.class() as u64).to_le_bytes());
            if let Some(t) = e.label.target() {
                for v in t.to_array() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out.extend_from_slice(&(e.gt_index.map_or(u64::MAX, |g| g as u64)).to_le_bytes());
            out.push(e.flipped as u8);
            out.push(e.widened as u8);
        }
        out
    }
}

struct ImagePools {
    fg: Vec<usize>,
    bg: Vec<usize>,
    widened: bool,
    assignments: Vec<Assignment>,
}

/// Seeded, single-owner minibatch sampler over a fixed dataset.
pub struct Sampler<'a> {
    images: &'a [AnnotatedImage],
    cfg: SamplerConfig,
    normalizer: TargetNormalizer,
    pools: Vec<Option<ImagePools>>,
    eligible: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> Sampler<'a> {
    pub fn new(
        images: &'a [AnnotatedImage],
        cfg: SamplerConfig,
        normalizer: TargetNormalizer,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut pools = Vec::with_capacity(images.len());
        let mut eligible = Vec::new();
        for (idx, img) in images.iter().enumerate() {
            let assignments = assign_rois(&img.proposals, &img.gts, &cfg);
            let usable = |i: &usize| img.proposals[*i].has_positive_extent();
            let fg: Vec<usize> = (0..assignments.len())
                .filter(|&i| assignments[i].role == Role::Foreground)
                .filter(usable)
                .collect();
            let mut bg: Vec<usize> = (0..assignments.len())
                .filter(|&i| assignments[i].role == Role::Background)
                .filter(usable)
                .collect();
            let mut widened = false;
            if bg.is_empty() {
                bg = (0..assignments.len())
                    .filter(|&i| assignments[i].max_iou < cfg.bg_iou_hi)
                    .filter(usable)
                    .collect();
                widened = true;
            }
            if img.gts.is_empty() || bg.is_empty() {
                log::warn!(
                    "sampler: image {} has no usable RoIs and is skipped",
                    img.id
                );
                pools.push(None);
                continue;
            }
            if widened {
                log::warn!(
                    "sampler: image {} has no background in band, widened to [0, {})",
                    img.id,
                    cfg.bg_iou_hi
                );
            }
            eligible.push(idx);
            pools.push(Some(ImagePools {
                fg,
                bg,
                widened,
                assignments,
            }));
        }
        if eligible.len() < cfg.images_per_batch {
            return Err(Error::Insufficient(format!(
                "{} usable images, need at least {} per batch",
                eligible.len(),
                cfg.images_per_batch
            )));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Sampler {
            images,
            cfg,
            normalizer,
            pools,
            eligible,
            order: Vec::new(),
            cursor: 0,
            rng,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn normalizer(&self) -> &TargetNormalizer {
        &self.normalizer
    }

    /// Dataset indices skipped because no RoI could be drawn from them.
    pub fn skipped_images(&self) -> Vec<usize> {
        (0..self.pools.len())
            .filter(|&i| self.pools[i].is_none())
            .collect()
    }

    fn next_image(&mut self, taken: &[usize]) -> usize {
        loop {
            if self.cursor >= self.order.len() {
                self.order = self.eligible.clone();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let idx = self.order[self.cursor];
            self.cursor += 1;
            if !taken.contains(&idx) {
                return idx;
            }
        }
    }

    pub fn sample(&mut self) -> Result<MiniBatch> {
        let n = self.cfg.images_per_batch;
        let per_image = self.cfg.rois_per_image();
        let fg_quota = self.cfg.fg_per_image();
        let mut taken = Vec::with_capacity(n);
        while taken.len() < n {
            let idx = self.next_image(&taken);
            taken.push(idx);
        }
        let mut entries = Vec::with_capacity(self.cfg.rois_per_batch);
        let mut images = Vec::with_capacity(n);
        for &idx in &taken {
            let flipped = self.rng.random_bool(self.cfg.flip_prob);
            images.push((idx, flipped));
            let pools = self.pools[idx]
                .as_ref()
                .expect("eligible images always have pools");
            let n_fg = fg_quota.min(pools.fg.len());
            let fg: Vec<usize> = pools
                .fg
                .choose_multiple(&mut self.rng, n_fg)
                .copied()
                .collect();
            let n_bg = per_image - n_fg;
            let mut bg: Vec<usize> = pools
                .bg
                .choose_multiple(&mut self.rng, n_bg.min(pools.bg.len()))
                .copied()
                .collect();
            while bg.len() < n_bg {
                bg.push(pools.bg[self.rng.random_range(0..pools.bg.len())]);
            }
            let img = &self.images[idx];
            for (pi, fg_entry) in fg
                .iter()
                .map(|&p| (p, true))
                .chain(bg.iter().map(|&p| (p, false)))
            {
                let a = pools.assignments[pi];
                let mut proposal = img.proposals[pi];
                let label = if fg_entry {
                    let gi = a.gt_index.expect("foreground has a matched gt");
                    let mut gt = img.gts[gi].bbox;
                    if flipped {
                        proposal = proposal.flip_horizontal(img.width);
                        gt = gt.flip_horizontal(img.width);
                    }
                    let v = self.normalizer.apply(&encode(&proposal, &gt)?);
                    RoiLabel::foreground(img.gts[gi].class, v)?
                } else {
                    if flipped {
                        proposal = proposal.flip_horizontal(img.width);
                    }
                    RoiLabel::background()
                };
                entries.push(BatchEntry {
                    image: idx,
                    proposal,
                    label,
                    max_iou: a.max_iou,
                    gt_index: a.gt_index,
                    flipped,
                    widened: !fg_entry && pools.widened,
                });
            }
        }
        Ok(MiniBatch { entries, images })
    }
}

/// Sliding-window box generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBoxConfig {
    /// Square-root box areas, pixels.
    pub scales: Vec<f64>,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
    pub stride: f64,
}

impl Default for DenseBoxConfig {
    /// Five scales 64..256 in `sqrt(2)` steps, three ratios, stride 8:
    /// 43,200 boxes on a 384x473 image.
    fn default() -> Self {
        DenseBoxConfig {
            scales: (0..5).map(|i| 64.0 * 2f64.powf(i as f64 / 2.0)).collect(),
            ratios: vec![0.5, 1.0, 2.0],
            stride: 8.0,
        }
    }
}

/// Boxes centered on a `stride` grid, for every scale and aspect ratio,
/// clipped to the image. Order: scale, ratio, row, column.
pub fn generate_dense_boxes(width: f64, height: f64, cfg: &DenseBoxConfig) -> Result<Vec<BBox>> {
    let positive = |v: f64| v.is_finite() && v > 0.0;
    if !positive(width)
        || !positive(height)
        || !positive(cfg.stride)
        || !cfg.scales.iter().chain(&cfg.ratios).all(|&v| positive(v))
    {
        return Err(Error::Config(
            "dense box parameters must be positive".into(),
        ));
    }
    let nx = (width / cfg.stride).ceil() as usize;
    let ny = (height / cfg.stride).ceil() as usize;
    let mut out = Vec::with_capacity(cfg.scales.len() * cfg.ratios.len() * nx * ny);
    for &s in &cfg.scales {
        for &r in &cfg.ratios {
            let w = s / r.sqrt();
            let h = s * r.sqrt();
            for iy in 0..ny {
                let cy = ((iy as f64 + 0.5) * cfg.stride).min(height);
                for ix in 0..nx {
                    let cx = ((ix as f64 + 0.5) * cfg.stride).min(width);
                    out.push(BBox::from_center(cx, cy, w, h).clamp_to(width, height));
                }
            }
        }
    }
    Ok(out)
}

/// Dense boxes of positive extent, as used for proposal lists.
pub fn dense_proposals(width: f64, height: f64, cfg: &DenseBoxConfig) -> Result<Vec<BBox>> {
    Ok(generate_dense_boxes(width, height, cfg)?
        .into_iter()
        .filter(BBox::has_positive_extent)
        .collect())
}
