//! Test-time pipeline: scale selection, proposal scoring, per-class NMS and
//! PASCAL-style average precision.
//!
//! AP uses all-points interpolation: the area under the precision envelope
//! at every recall change, not the 11-point approximation.

use ndarray::Array2;

use crate::geometry::{decode, iou, BBox, TargetNormalizer};
use crate::losses::softmax;
use crate::net::DetectionNet;
use crate::roipool::{map_image_roi_to_feature, roi_pool_forward, FeatureMap};
use crate::sampler::GroundTruth;
use crate::{Error, Result};

/// RoIs are sent to the pyramid level whose scaled area is nearest this.
pub const PYRAMID_TARGET_AREA: f64 = 224.0 * 224.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMode {
    Single,
    Pyramid,
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ScaleMode::Single),
            "pyramid" => Ok(ScaleMode::Pyramid),
            other => Err(Error::Config(format!(
                "scale mode must be `single` or `pyramid`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleConfig {
    pub mode: ScaleMode,
    /// Target shortest side in single-scale mode.
    pub single_scale: f64,
    pub single_max_side: f64,
    pub pyramid_scales: Vec<f64>,
    pub pyramid_max_side: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            mode: ScaleMode::Single,
            single_scale: 600.0,
            single_max_side: 1000.0,
            pyramid_scales: vec![480.0, 576.0, 688.0, 864.0, 1200.0],
            pyramid_max_side: 2000.0,
        }
    }
}

fn scale_factor(width: f64, height: f64, shortest: f64, max_side: f64) -> f64 {
    let short = width.min(height);
    let long = width.max(height);
    (shortest / short).min(max_side / long)
}

/// Resize factor for single-scale mode: shortest side to `single_scale`
/// unless that pushes the longest side past the cap.
pub fn select_scale(width: f64, height: f64, cfg: &ScaleConfig) -> Result<f64> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "image size {width}x{height}"
        )));
    }
    Ok(scale_factor(
        width,
        height,
        cfg.single_scale,
        cfg.single_max_side,
    ))
}

/// Resize factors of every pyramid level, same order as `pyramid_scales`.
pub fn pyramid_factors(width: f64, height: f64, cfg: &ScaleConfig) -> Result<Vec<f64>> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "image size {width}x{height}"
        )));
    }
    Ok(cfg
        .pyramid_scales
        .iter()
        .map(|&s| scale_factor(width, height, s, cfg.pyramid_max_side))
        .collect())
}

/// Level whose resized RoI area is closest to 224²; ties go to the lower level.
pub fn assign_roi_scale(roi: &BBox, factors: &[f64]) -> usize {
    assign_roi_scale_to(roi, factors, PYRAMID_TARGET_AREA)
}

pub fn assign_roi_scale_to(roi: &BBox, factors: &[f64], target_area: f64) -> usize {
    let area = roi.area();
    let mut best = 0;
    let mut best_gap = f64::INFINITY;
    for (i, &f) in factors.iter().enumerate() {
        let gap = (area * f * f - target_area).abs();
        if gap < best_gap {
            best_gap = gap;
            best = i;
        }
    }
    best
}

/// One scale of an image: its feature map and the image-to-resized factor.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub features: FeatureMap,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    /// Feature-map cell size in resized-image pixels.
    pub stride: f64,
    /// Apply the regression head; when false every class keeps the proposal box.
    pub use_bbox: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredProposal {
    pub proposal: BBox,
    /// Softmax over `K + 1` classes.
    pub probs: Vec<f64>,
    /// Refined box per object class (`boxes[k - 1]` for class `k`), clipped to the image.
    pub boxes: Vec<BBox>,
}

/// Scores proposals (image coordinates) against one or more pyramid levels.
pub fn score_proposals(
    net: &DetectionNet,
    levels: &[PyramidLevel],
    proposals: &[BBox],
    normalizer: &TargetNormalizer,
    image_size: (f64, f64),
    cfg: &ScoringConfig,
) -> Result<Vec<ScoredProposal>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    if levels.is_empty() {
        return Err(Error::Config("no feature levels to score against".into()));
    }
    let factors: Vec<f64> = levels.iter().map(|l| l.factor).collect();
    let dim = net.input_dim();
    let mut pooled = Array2::zeros((proposals.len(), dim));
    for (row, p) in proposals.iter().enumerate() {
        let level = if levels.len() == 1 {
            0
        } else {
            assign_roi_scale(p, &factors)
        };
        let lv = &levels[level];
        let mapped =
            map_image_roi_to_feature(&p.scale(lv.factor), cfg.stride, lv.features.shape())?;
        let res = roi_pool_forward(&lv.features, &mapped.rect, net.pooled_h, net.pooled_w)?;
        if res.output.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "pooled {} features, network expects {dim}",
                res.output.len()
            )));
        }
        pooled
            .row_mut(row)
            .assign(&ndarray::ArrayView1::from(&res.output));
    }
    let (_, out) = net.forward(pooled.view())?;
    let (w, h) = image_size;
    let mut scored = Vec::with_capacity(proposals.len());
    for (row, p) in proposals.iter().enumerate() {
        let probs = softmax(out.logits.row(row).as_slice().expect("contiguous"));
        let boxes = if cfg.use_bbox && p.has_positive_extent() {
            out.transforms(row)
                .iter()
                .map(|t| {
                    let raw = normalizer.unapply(t);
                    Ok(decode(p, &raw)?.bbox.clamp_to(w, h))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![p.clamp_to(w, h); net.num_classes]
        };
        scored.push(ScoredProposal {
            proposal: *p,
            probs,
            boxes,
        });
    }
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Object class in `1..=K`.
    pub class: usize,
    pub score: f64,
}

/// One candidate per (proposal, object class) with `p_k > score_floor`.
pub fn detections_from_scores(scored: &[ScoredProposal], score_floor: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for s in scored {
        for (k, b) in s.boxes.iter().enumerate() {
            let p = s.probs[k + 1];
            if p > score_floor {
                out.push(Detection {
                    bbox: *b,
                    class: k + 1,
                    score: p,
                });
            }
        }
    }
    out
}

fn rank_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// Greedy per-class suppression of boxes overlapping a kept box by more than
/// `iou_threshold`. Output is grouped by class (ascending), each group in
/// descending confidence.
pub fn nms_per_class(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut classes: Vec<usize> = detections.iter().map(|d| d.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut kept = Vec::new();
    for class in classes {
        let mut group: Vec<Detection> = detections
            .iter()
            .filter(|d| d.class == class)
            .copied()
            .collect();
        group.sort_by(rank_order);
        let mut suppressed = vec![false; group.len()];
        for i in 0..group.len() {
            if suppressed[i] {
                continue;
            }
            kept.push(group[i]);
            for j in i + 1..group.len() {
                if !suppressed[j] && iou(&group[i].bbox, &group[j].bbox) > iou_threshold {
                    suppressed[j] = true;
                }
            }
        }
    }
    kept
}

/// Ranked detections of one class with precision / recall at every rank.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub ranked: Vec<(f64, bool)>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
}

/// PR curve for `(confidence, is_true_positive)` pairs already in rank order.
pub fn pr_curve(ranked: Vec<(f64, bool)>, num_positives: usize) -> PrCurve {
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if num_positives == 0 {
            0.0
        } else {
            tp as f64 / num_positives as f64
        });
    }
    // precision envelope from the right, then area over recall steps
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    PrCurve {
        ranked,
        precision,
        recall,
        ap,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApReport {
    /// AP of class `k` at index `k - 1`; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// Per-class AP with greedy matching in confidence order; each ground truth
/// can be claimed once, by the detection with the highest IoU to it among
/// the same-class boxes of its image.
pub fn evaluate_ap(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    num_classes: usize,
    iou_match: f64,
) -> Result<ApReport> {
    if detections.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "detections for {} images, ground truth for {}",
            detections.len(),
            ground_truth.len()
        )));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 1..=num_classes {
        per_class.push(class_ap(detections, ground_truth, class, iou_match).map(|c| c.ap));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(ApReport { per_class, map })
}

/// PR curve for one class, or `None` when the class has no ground truth.
pub fn class_ap(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    class: usize,
    iou_match: f64,
) -> Option<PrCurve> {
    let npos: usize = ground_truth
        .iter()
        .map(|g| g.iter().filter(|g| g.class == class).count())
        .sum();
    if npos == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| {
            ds.iter()
                .filter(|d| d.class == class)
                .map(move |d| (img, *d))
        })
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| rank_order(a, b).then(ia.cmp(ib)));
    let mut claimed: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut pairs = Vec::with_capacity(ranked.len());
    for (img, d) in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in ground_truth[*img].iter().enumerate() {
            if g.class != class {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        let hit = match best {
            Some((gi, o)) if o >= iou_match && !claimed[*img][gi] => {
                claimed[*img][gi] = true;
                true
            }
            _ => false,
        };
        pairs.push((d.score, hit));
    }
    Some(pr_curve(pairs, npos))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub scoring: ScoringConfig,
    pub nms_threshold: f64,
    /// Detections with `p_k` at or below this are dropped before NMS.
    pub score_floor: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            scoring: ScoringConfig {
                stride: 16.0,
                use_bbox: true,
            },
            nms_threshold: 0.3,
            score_floor: 0.0,
        }
    }
}

/// Scores, thresholds and suppresses the proposals of one image.
pub fn detect_image(
    net: &DetectionNet,
    levels: &[PyramidLevel],
    proposals: &[BBox],
    normalizer: &TargetNormalizer,
    image_size: (f64, f64),
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let scored = score_proposals(net, levels, proposals, normalizer, image_size, &cfg.scoring)?;
    Ok(nms_per_class(
        &detections_from_scores(&scored, cfg.score_floor),
        cfg.nms_threshold,
    ))
}
