//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use frcnn::detect::Detection;
use frcnn::roipool::{FeatureMap, FeatureShape, RoiRect};
use frcnn::BBox;
use rand::Rng;

/// IoU of integer boxes by counting unit cells.
pub fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let cells = |bx: &BBox| {
        let mut set = std::collections::HashSet::new();
        for y in bx.y1 as i64..bx.y2 as i64 {
            for x in bx.x1 as i64..bx.x2 as i64 {
                set.insert((x, y));
            }
        }
        set
    };
    let (ca, cb) = (cells(a), cells(b));
    let inter = ca.intersection(&cb).count();
    let union = ca.len() + cb.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn random_int_box<R: Rng>(rng: &mut R, extent: i64) -> BBox {
    let x1 = rng.random_range(0..extent);
    let y1 = rng.random_range(0..extent);
    let x2 = rng.random_range(x1 + 1..=extent);
    let y2 = rng.random_range(y1 + 1..=extent);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap()
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BBox {
    let x1 = rng.random_range(0.0..extent * 0.9);
    let y1 = rng.random_range(0.0..extent * 0.9);
    let w = rng.random_range(1.0..extent - x1 + 1.0);
    let h = rng.random_range(1.0..extent - y1 + 1.0);
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// Feature map with values drawn from a small integer range, so ties are
/// common and exercise the tie-break rule.
pub fn random_map<R: Rng>(rng: &mut R, max_side: usize) -> FeatureMap {
    let c = rng.random_range(1..=3);
    let h = rng.random_range(1..=max_side);
    let w = rng.random_range(1..=max_side);
    let data = (0..c * h * w)
        .map(|_| rng.random_range(-6i32..=6) as f64 * 0.5)
        .collect();
    FeatureMap::new(c, h, w, data).unwrap()
}

pub fn random_roi<R: Rng>(rng: &mut R, shape: FeatureShape) -> RoiRect {
    let h = rng.random_range(1..=shape.height);
    let w = rng.random_range(1..=shape.width);
    RoiRect::new(
        rng.random_range(0..=shape.height - h),
        rng.random_range(0..=shape.width - w),
        h,
        w,
    )
}

/// Whether RoI-local cell `y` of an extent-`len` RoI touches output bin
/// `i` of `bins`, i.e. cell `[y, y + 1)` overlaps `[i len / bins, (i + 1) len / bins]`
/// with positive length.
fn in_bin(y: usize, i: usize, len: usize, bins: usize) -> bool {
    (y + 1) * bins > i * len && y * bins < (i + 1) * len
}

/// Max pooling by scanning every map cell and testing bin membership.
/// Returns pooled values and the flat index of the first maximum in
/// row-major order.
pub fn brute_pool(fm: &FeatureMap, roi: &RoiRect, ph: usize, pw: usize) -> (Vec<f64>, Vec<usize>) {
    let (c_n, h_n, w_n) = (fm.channels(), fm.height(), fm.width());
    let mut out = Vec::new();
    let mut arg = Vec::new();
    for c in 0..c_n {
        for i in 0..ph {
            for j in 0..pw {
                let mut best: Option<(f64, usize)> = None;
                for y in 0..h_n {
                    for x in 0..w_n {
                        if y < roi.r || y >= roi.r + roi.h || x < roi.c || x >= roi.c + roi.w {
                            continue;
                        }
                        if !in_bin(y - roi.r, i, roi.h, ph) || !in_bin(x - roi.c, j, roi.w, pw) {
                            continue;
                        }
                        let idx = (c * h_n + y) * w_n + x;
                        let v = fm.data()[idx];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("every bin is non-empty");
                out.push(v);
                arg.push(idx);
            }
        }
    }
    (out, arg)
}

/// Gradient at each input cell: the sum of upstream gradients over every
/// (RoI, output) pair whose brute-force argmax is that cell.
pub fn brute_pool_backward(
    fm: &FeatureMap,
    rois: &[RoiRect],
    ph: usize,
    pw: usize,
    grads: &[Vec<f64>],
) -> Vec<f64> {
    let switches: Vec<Vec<usize>> = rois.iter().map(|r| brute_pool(fm, r, ph, pw).1).collect();
    (0..fm.data().len())
        .map(|cell| {
            let mut acc = 0.0;
            for (sw, g) in switches.iter().zip(grads) {
                for (k, &a) in sw.iter().enumerate() {
                    if a == cell {
                        acc += g[k];
                    }
                }
            }
            acc
        })
        .collect()
}

/// Single-level spatial pyramid pooling over a whole map: an `n x m` grid
/// of max pools with floor/ceil bin edges.
pub fn spp_single_level(fm: &FeatureMap, n: usize, m: usize) -> Vec<f64> {
    let (h, w) = (fm.height(), fm.width());
    let mut out = Vec::new();
    for c in 0..fm.channels() {
        for i in 0..n {
            let y0 = (i * h) / n;
            let y1 = ((i + 1) * h).div_ceil(n);
            for j in 0..m {
                let x0 = (j * w) / m;
                let x1 = ((j + 1) * w).div_ceil(m);
                let mut best = f64::NEG_INFINITY;
                for y in y0..y1 {
                    for x in x0..x1 {
                        best = best.max(fm.get(c, y, x));
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Copy of a sub-window as its own feature map.
pub fn crop(fm: &FeatureMap, roi: &RoiRect) -> FeatureMap {
    let mut data = Vec::new();
    for c in 0..fm.channels() {
        for y in roi.r..roi.r + roi.h {
            for x in roi.c..roi.c + roi.w {
                data.push(fm.get(c, y, x));
            }
        }
    }
    FeatureMap::new(fm.channels(), roi.h, roi.w, data).unwrap()
}

fn plain_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Quadratic NMS: a detection survives iff no higher-ranked surviving
/// detection of its class overlaps it by more than `thr`. Output sorted by
/// (class, rank).
pub fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.total_cmp(&dets[a].score).then_with(|| {
            let (p, q) = (&dets[a].bbox, &dets[b].bbox);
            [p.x1, p.y1, p.x2, p.y2]
                .iter()
                .zip([q.x1, q.y1, q.x2, q.y2].iter())
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let n = order.len();
    let mut alive = vec![true; n];
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (&dets[order[j]], &dets[order[i]]);
            if alive[j] && a.class == b.class && plain_iou(&a.bbox, &b.bbox) > thr {
                alive[i] = false;
                break;
            }
        }
    }
    let mut kept: Vec<(usize, usize)> = (0..n)
        .filter(|&i| alive[i])
        .map(|i| (dets[order[i]].class, i))
        .collect();
    kept.sort();
    kept.into_iter().map(|(_, i)| dets[order[i]]).collect()
}

/// Sorts detections by (class, score desc, box) for set comparison.
pub fn canonical(mut dets: Vec<Detection>) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        a.class
            .cmp(&b.class)
            .then(b.score.total_cmp(&a.score))
            .then(a.bbox.lex_cmp(&b.bbox))
    });
    dets
}

/// Random detections on a coarse grid so exact duplicates and equal
/// scores occur.
pub fn random_detections<R: Rng>(rng: &mut R, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x1 = rng.random_range(0..40) as f64 * 5.0;
            let y1 = rng.random_range(0..40) as f64 * 5.0;
            let w = rng.random_range(1..20) as f64 * 5.0;
            let h = rng.random_range(1..20) as f64 * 5.0;
            Detection {
                bbox: BBox::new(x1, y1, x1 + w, y1 + h).unwrap(),
                class: rng.random_range(1..=classes),
                score: rng.random_range(0..50) as f64 / 50.0,
            }
        })
        .collect()
}

/// Pyramid level whose scaled RoI area is closest to `target`, found by
/// enumerating levels; the first level wins ties.
pub fn nearest_level(area: f64, factors: &[f64], target: f64) -> usize {
    let mut best = 0;
    for (i, f) in factors.iter().enumerate() {
        if (area * f * f - target).abs() < (area * factors[best] * factors[best] - target).abs() {
            best = i;
        }
    }
    best
}
