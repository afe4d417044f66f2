//! RoI max pooling over a `C x H x W` feature map.
//!
//! Forward pooling splits an `h x w` window into a fixed `H x W` grid using
//! `[floor(i*h/H), ceil((i+1)*h/H))` boundaries and records, for every output
//! unit, the flat feature-map index that won the max. Backward routes each
//! output gradient to that recorded index and sums collisions.

use rayon::prelude::*;

use crate::geometry::BBox;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense `C x H x W` map, row-major with channel outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: FeatureShape,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        let shape = FeatureShape {
            channels,
            height,
            width,
        };
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "{channels}x{height}x{width} map needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn zeros(shape: FeatureShape) -> Self {
        FeatureMap {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> FeatureShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    /// Mirror every channel left-to-right.
    pub fn flip_horizontal(&self) -> FeatureMap {
        let FeatureShape {
            channels,
            height,
            width,
        } = self.shape;
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..channels {
            for y in 0..height {
                for x in (0..width).rev() {
                    data.push(self.get(c, y, x));
                }
            }
        }
        FeatureMap {
            shape: self.shape,
            data,
        }
    }

    /// Bilinear resampling by `factor` (cell centers aligned).
    pub fn resample(&self, factor: f64) -> Result<FeatureMap> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::Config(format!(
                "resample factor {factor} must be positive"
            )));
        }
        let FeatureShape {
            channels,
            height,
            width,
        } = self.shape;
        let out_h = ((height as f64 * factor).round() as usize).max(1);
        let out_w = ((width as f64 * factor).round() as usize).max(1);
        let sy = height as f64 / out_h as f64;
        let sx = width as f64 / out_w as f64;
        let sample = |len: usize, pos: f64| -> (usize, usize, f64) {
            let p = (pos - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, p - lo as f64)
        };
        let mut data = Vec::with_capacity(channels * out_h * out_w);
        for c in 0..channels {
            for oy in 0..out_h {
                let (y0, y1, fy) = sample(height, (oy as f64 + 0.5) * sy);
                for ox in 0..out_w {
                    let (x0, x1, fx) = sample(width, (ox as f64 + 0.5) * sx);
                    let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
                    let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        FeatureMap::new(channels, out_h, out_w, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.shape.channels, self.shape.height, self.shape.width],
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.dims.as_slice() {
            &[c, h, w] => FeatureMap::new(c, h, w, t.to_f64()),
            &[h, w] => FeatureMap::new(1, h, w, t.to_f64()),
            dims => Err(Error::ShapeMismatch(format!(
                "feature map tensor must have rank 2 or 3, got {dims:?}"
            ))),
        }
    }
}

/// Integer RoI window on a feature map: top-left `(r, c)`, extent `h x w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RoiRect {
    pub r: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl RoiRect {
    pub fn new(r: usize, c: usize, h: usize, w: usize) -> Self {
        RoiRect { r, c, h, w }
    }

    pub fn full(shape: FeatureShape) -> Self {
        RoiRect::new(0, 0, shape.height, shape.width)
    }

    pub fn check_bounds(&self, shape: FeatureShape) -> Result<()> {
        if self.h == 0
            || self.w == 0
            || self.r + self.h > shape.height
            || self.c + self.w > shape.width
        {
            return Err(Error::RoiOutOfBounds {
                roi: format!("{self:?}"),
                height: shape.height,
                width: shape.width,
            });
        }
        Ok(())
    }
}

/// Pooled values plus the argmax switch of every output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolResult {
    pub channels: usize,
    pub pooled_h: usize,
    pub pooled_w: usize,
    /// `C x H x W` pooled values.
    pub output: Vec<f64>,
    /// Flat feature-map index selected for each output unit.
    pub argmax: Vec<usize>,
}

/// Half-open range of RoI-local cells covered by output cell `i` of `bins`.
#[inline]
pub fn bin_range(i: usize, extent: usize, bins: usize) -> (usize, usize) {
    let start = i * extent / bins;
    let end = ((i + 1) * extent).div_ceil(bins);
    (start, end)
}

pub fn roi_pool_forward(
    fm: &FeatureMap,
    roi: &RoiRect,
    pooled_h: usize,
    pooled_w: usize,
) -> Result<PoolResult> {
    if pooled_h == 0 || pooled_w == 0 {
        return Err(Error::Config(format!(
            "pooled size must be positive, got {pooled_h}x{pooled_w}"
        )));
    }
    roi.check_bounds(fm.shape())?;
    let channels = fm.channels();
    let n = channels * pooled_h * pooled_w;
    let mut output = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for ch in 0..channels {
        for i in 0..pooled_h {
            let (y0, y1) = bin_range(i, roi.h, pooled_h);
            for j in 0..pooled_w {
                let (x0, x1) = bin_range(j, roi.w, pooled_w);
                let mut best = fm.index(ch, roi.r + y0, roi.c + x0);
                let mut best_val = fm.data[best];
                for y in roi.r + y0..roi.r + y1 {
                    let row = fm.index(ch, y, 0);
                    for x in roi.c + x0..roi.c + x1 {
                        // strict `>` keeps the first maximum in row-major order
                        if fm.data[row + x] > best_val {
                            best_val = fm.data[row + x];
                            best = row + x;
                        }
                    }
                }
                output.push(best_val);
                argmax.push(best);
            }
        }
    }
    Ok(PoolResult {
        channels,
        pooled_h,
        pooled_w,
        output,
        argmax,
    })
}

/// Accumulates output gradients of several RoIs into a zeroed map of `shape`.
///
/// Channels are disjoint in index space, so they are reduced in parallel;
/// within a channel RoIs are summed in input order, giving the same result
/// as a serial loop.
pub fn roi_pool_backward<G: AsRef<[f64]> + Sync>(
    grad_out: &[G],
    results: &[PoolResult],
    shape: FeatureShape,
) -> Result<FeatureMap> {
    if grad_out.len() != results.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient blocks for {} pooled RoIs",
            grad_out.len(),
            results.len()
        )));
    }
    let plane = shape.height * shape.width;
    for (g, res) in grad_out.iter().zip(results) {
        let g = g.as_ref();
        if res.channels != shape.channels
            || res.output.len() != res.channels * res.pooled_h * res.pooled_w
            || res.argmax.len() != res.output.len()
            || g.len() != res.output.len()
        {
            return Err(Error::ShapeMismatch(format!(
                "gradient of length {} for pooled result {}x{}x{} on map {shape:?}",
                g.len(),
                res.channels,
                res.pooled_h,
                res.pooled_w
            )));
        }
        let per_channel = res.pooled_h * res.pooled_w;
        for (k, &idx) in res.argmax.iter().enumerate() {
            let ch = k / per_channel;
            if idx / plane != ch || idx >= shape.len() {
                return Err(Error::ShapeMismatch(format!(
                    "argmax index {idx} outside channel {ch} of map {shape:?}"
                )));
            }
        }
    }
    let mut grad = FeatureMap::zeros(shape);
    grad.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(ch, slab)| {
            let base = ch * plane;
            for (g, res) in grad_out.iter().zip(results) {
                let per_channel = res.pooled_h * res.pooled_w;
                let lo = ch * per_channel;
                let g = &g.as_ref()[lo..lo + per_channel];
                let sw = &res.argmax[lo..lo + per_channel];
                for (&dy, &idx) in g.iter().zip(sw) {
                    slab[idx - base] += dy;
                }
            }
        });
    Ok(grad)
}

/// Feature-map window for an image-space box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappedRoi {
    pub rect: RoiRect,
    /// Set when the box lay entirely outside the map and was pinned to a border cell.
    pub outside: bool,
}

/// Maps an image box onto a map with the given stride: origin rounded down,
/// far corner rounded up, extent at least one cell, clipped to the map.
pub fn map_image_roi_to_feature(roi: &BBox, stride: f64, shape: FeatureShape) -> Result<MappedRoi> {
    if !(stride.is_finite() && stride > 0.0) {
        return Err(Error::Config(format!("stride {stride} must be positive")));
    }
    if !roi.is_valid() {
        return Err(Error::InvalidGeometry(format!("{roi:?}")));
    }
    let axis = |lo: f64, hi: f64, len: usize| -> (usize, usize, bool) {
        let start = (lo / stride).floor();
        let end = (hi / stride).ceil();
        let outside = end <= 0.0 || start >= len as f64;
        let s = start.clamp(0.0, (len - 1) as f64) as usize;
        let e = (end.max(s as f64 + 1.0)).min(len as f64) as usize;
        let e = e.max(s + 1);
        (s, e - s, outside)
    };
    let (c, w, out_x) = axis(roi.x1, roi.x2, shape.width);
    let (r, h, out_y) = axis(roi.y1, roi.y2, shape.height);
    Ok(MappedRoi {
        rect: RoiRect { r, c, h, w },
        outside: out_x || out_y,
    })
}
