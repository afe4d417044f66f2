//! Truncated-SVD compression of fully connected layers.
//!
//! `W ~= U_t S_t V_t^T` is realized as two stacked affine maps with no
//! nonlinearity between them: a bias-free `t x v` layer holding `S_t V_t^T`
//! followed by a `u x t` layer holding `U_t` and the original bias.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2};

use crate::net::{FcLayer, Linear};
use crate::{Error, Result};

/// Off-diagonal tolerance for Jacobi convergence.
pub const JACOBI_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 80;

/// Thin SVD `A = U diag(s) V^T`, singular values descending.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// `m x k`, `k = min(m, n)`.
    pub u: Array2<f64>,
    pub s: Vec<f64>,
    /// `k x n`.
    pub vt: Array2<f64>,
    pub sweeps: usize,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xv, yv) = (*x, *y);
        *x = c * xv - s * yv;
        *y = s * xv + c * yv;
    }
}

fn two_columns(cols: &mut [Vec<f64>], p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = cols.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

/// Left singular vectors, singular values, right singular vectors (all as
/// columns) and the sweep count.
type ColumnSvd = (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>, usize);

/// One-sided (Hestenes) Jacobi on a tall matrix given as columns.
fn jacobi_tall(mut cols: Vec<Vec<f64>>) -> Result<ColumnSvd> {
    let n = cols.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let (cp, cq) = two_columns(&mut cols, p, q);
                let gamma = dot(cp, cq);
                let rel = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(rel);
                if rel <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cp, cq, c, s);
                norms[p] = alpha - t * gamma;
                norms[q] = beta + t * gamma;
                let (vp, vq) = two_columns(&mut v, p, q);
                rotate(vp, vq, c, s);
            }
        }
        residual = off;
        if off <= JACOBI_TOL {
            break;
        }
    }
    if residual > JACOBI_TOL {
        return Err(Error::SvdNoConvergence { sweeps, residual });
    }
    let s: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    Ok((cols, s, v, sweeps))
}

pub fn svd(a: ArrayView2<f64>) -> Result<Svd> {
    let (m, n) = a.dim();
    if m == 0 || n == 0 {
        return Err(Error::ShapeMismatch("SVD of an empty matrix".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SVD input".into()));
    }
    // work on the tall orientation; for wide inputs factor A^T = V S U^T
    let tall = m >= n;
    let work = if tall { a } else { a.t() };
    let (rows, k) = work.dim();
    let cols: Vec<Vec<f64>> = (0..k).map(|j| work.column(j).to_vec()).collect();
    let (cols, s, v, sweeps) = jacobi_tall(cols)?;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));

    let mut left = Array2::zeros((rows, k));
    let mut right = Array2::zeros((k, k));
    let mut sv = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = s[src];
        sv.push(sigma);
        if sigma > 0.0 {
            for i in 0..rows {
                left[[i, dst]] = cols[src][i] / sigma;
            }
        }
        for i in 0..k {
            right[[i, dst]] = v[src][i];
        }
    }
    let (u, vmat) = if tall { (left, right) } else { (right, left) };
    let mut u = u;
    let mut vt = vmat.reversed_axes();
    // largest-magnitude entry of each left singular vector is positive
    for j in 0..sv.len() {
        let col = u.column(j);
        let pivot = col.iter().copied().fold(
            0.0f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        if pivot < 0.0 {
            u.column_mut(j).mapv_inplace(|x| -x);
            vt.row_mut(j).mapv_inplace(|x| -x);
        }
    }
    Ok(Svd {
        u: u.as_standard_layout().to_owned(),
        s: sv,
        vt: vt.as_standard_layout().to_owned(),
        sweeps,
    })
}

/// Two-factor replacement for an `u x v` fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFcLayer {
    /// `t x v`, `S_t V_t^T`; no bias.
    pub first: Array2<f64>,
    /// `u x t`, `U_t`.
    pub second: Array2<f64>,
    /// Original bias, length `u`.
    pub bias: Array1<f64>,
}

impl CompressedFcLayer {
    pub fn new(first: Array2<f64>, second: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let t = first.nrows();
        if t == 0 || second.ncols() != t || second.nrows() != bias.len() {
            return Err(Error::ShapeMismatch(format!(
                "factors {:?} and {:?} with bias {}",
                first.shape(),
                second.shape(),
                bias.len()
            )));
        }
        Ok(CompressedFcLayer {
            first,
            second,
            bias,
        })
    }

    pub fn rank(&self) -> usize {
        self.first.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.first.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.second.nrows()
    }

    /// `t (u + v) + u`.
    pub fn param_count(&self) -> usize {
        self.first.len() + self.second.len() + self.bias.len()
    }

    /// Product of the two factors, i.e. the rank-`t` weight approximation.
    pub fn effective_weights(&self) -> Array2<f64> {
        self.second.dot(&self.first)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "compressed layer expects {} inputs, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        let hidden = x.dot(&self.first.t());
        Ok(hidden.dot(&self.second.t()) + &self.bias)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(self.forward_batch(view)?.row(0).to_vec())
    }
}

/// Keeps the top `t` singular triplets of the layer's weight matrix.
pub fn compress(layer: &FcLayer, t: usize) -> Result<CompressedFcLayer> {
    let (u, v) = layer.weights.dim();
    if t == 0 || t > u.min(v) {
        return Err(Error::Config(format!(
            "rank {t} outside 1..={} for a {u}x{v} layer",
            u.min(v)
        )));
    }
    let dec = svd(layer.weights.view())?;
    let mut first = dec.vt.slice(ndarray::s![..t, ..]).to_owned();
    for (mut row, &sigma) in first.rows_mut().into_iter().zip(&dec.s) {
        row.mapv_inplace(|x| x * sigma);
    }
    let second = dec.u.slice(ndarray::s![.., ..t]).to_owned();
    CompressedFcLayer::new(first, second, layer.bias.clone())
}

/// `||W - U_t S_t V_t^T||_F / ||W||_F`, 0 for an all-zero `W`.
pub fn reconstruction_error(layer: &FcLayer, compressed: &CompressedFcLayer) -> Result<f64> {
    if compressed.in_dim() != layer.in_dim() || compressed.out_dim() != layer.out_dim() {
        return Err(Error::ShapeMismatch(format!(
            "layer {:?} vs compressed {}x{}",
            layer.weights.shape(),
            compressed.out_dim(),
            compressed.in_dim()
        )));
    }
    let norm = layer.weights.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let diff = &layer.weights - &compressed.effective_weights();
    Ok(diff.iter().map(|v| v * v).sum::<f64>().sqrt() / norm)
}

/// Parameters of a dense `u x v` layer with bias.
pub fn dense_param_count(u: usize, v: usize) -> u64 {
    (u * v + u) as u64
}

/// Parameters of its rank-`t` factorization: `t(u + v)` weights plus the bias.
pub fn factored_param_count(u: usize, v: usize, t: usize) -> u64 {
    (t * (u + v) + u) as u64
}

/// Multiply-add count (times two) of one batched forward pass, bias excluded.
pub fn forward_flops(op: &Linear, rois: usize) -> u64 {
    let r = rois as u64;
    match op {
        Linear::Dense(l) => 2 * (l.out_dim() * l.in_dim()) as u64 * r,
        Linear::Factored(c) => 2 * (c.rank() * (c.out_dim() + c.in_dim())) as u64 * r,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub median: Duration,
    pub flops: u64,
}

/// Median wall time of `repeats` batched forward passes after one warm-up.
pub fn bench_throughput(op: &Linear, x: ArrayView2<f64>, repeats: usize) -> Result<Timing> {
    if x.nrows() == 0 {
        return Err(Error::Config("benchmark needs at least one RoI".into()));
    }
    let repeats = repeats.max(1);
    std::hint::black_box(op.forward_batch(x)?);
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let y = op.forward_batch(x)?;
        times.push(start.elapsed());
        std::hint::black_box(y);
    }
    times.sort();
    Ok(Timing {
        median: times[times.len() / 2],
        flops: forward_flops(op, x.nrows()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rois: usize,
    pub full: Timing,
    pub compressed: Timing,
}

impl BenchReport {
    pub fn flop_ratio(&self) -> f64 {
        self.compressed.flops as f64 / self.full.flops as f64
    }

    pub fn speedup(&self) -> f64 {
        self.full.median.as_secs_f64() / self.compressed.median.as_secs_f64().max(1e-12)
    }
}

/// Times the dense layer against its compressed form on the same RoI batch.
pub fn bench_compression(
    layer: &FcLayer,
    compressed: &CompressedFcLayer,
    x: ArrayView2<f64>,
    repeats: usize,
) -> Result<BenchReport> {
    let full = bench_throughput(&Linear::Dense(layer.clone()), x, repeats)?;
    let comp = bench_throughput(&Linear::Factored(compressed.clone()), x, repeats)?;
    Ok(BenchReport {
        rois: x.nrows(),
        full,
        compressed: comp,
    })
}
