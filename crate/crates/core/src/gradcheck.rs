//! Finite-difference gradient checks for every differentiable piece of the
//! head: smooth L1, both loss terms, affine layers, RoI pooling, and the
//! full chain from feature map to multi-task loss.

use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::BoxTransform;
use crate::losses::{
    cls_loss, loc_loss, multitask_loss, smooth_l1, smooth_l1_grad, ClassScores, RoiLabel,
};
use crate::net::{DetectionNet, FcLayer, Linear, NetConfig, NetGrads, SgdConfig};
use crate::roipool::{roi_pool_backward, roi_pool_forward, FeatureMap, FeatureShape, RoiRect};
use crate::Result;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Number of gradient components compared.
    pub compared: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<Check>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn format(&self) -> String {
        let mut out = String::from("check\tcompared\tmax_rel_error\ttolerance\tstatus\n");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.3e}\t{:.0e}\t{}",
                c.name,
                c.compared,
                c.max_rel_error,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

#[derive(Default)]
struct Tracker {
    max: f64,
    count: usize,
}

impl Tracker {
    fn add(&mut self, analytic: f64, numeric: f64) {
        self.max = self.max.max(rel_error(analytic, numeric));
        self.count += 1;
    }

    fn finish(self, name: &'static str, tolerance: f64) -> Check {
        Check {
            name,
            max_rel_error: self.max,
            tolerance,
            compared: self.count,
        }
    }
}

const LOSS_STEP: f64 = 1e-5;

pub fn check_smooth_l1<R: Rng + ?Sized>(rng: &mut R, cases: usize) -> Check {
    let mut t = Tracker::default();
    while t.count < cases {
        let x: f64 = rng.random_range(-3.0..3.0);
        if (x.abs() - 1.0).abs() < 1e-3 {
            continue;
        }
        t.add(smooth_l1_grad(x), central_diff(smooth_l1, x, LOSS_STEP));
    }
    t.finish("smooth_l1", 1e-6)
}

fn random_transform<R: Rng + ?Sized>(rng: &mut R, spread: f64) -> BoxTransform {
    BoxTransform::from_array(std::array::from_fn(|_| rng.random_range(-spread..spread)))
}

pub fn check_loc_loss<R: Rng + ?Sized>(rng: &mut R, cases: usize) -> Check {
    let mut t = Tracker::default();
    let mut done = 0;
    while done < cases {
        let (pred, target) = (random_transform(rng, 2.0), random_transform(rng, 2.0));
        let (p, v) = (pred.to_array(), target.to_array());
        if (0..4).any(|i| ((p[i] - v[i]).abs() - 1.0).abs() < 1e-3) {
            continue;
        }
        let (_, grad) = loc_loss(&pred, &target);
        for i in 0..4 {
            let f = |x: f64| {
                let mut q = p;
                q[i] = x;
                loc_loss(&BoxTransform::from_array(q), &target).0
            };
            t.add(grad[i], central_diff(f, p[i], LOSS_STEP));
        }
        done += 1;
    }
    t.finish("loc_loss", 1e-6)
}

pub fn check_cls_loss<R: Rng + ?Sized>(rng: &mut R, cases: usize) -> Result<Check> {
    let mut t = Tracker::default();
    for _ in 0..cases {
        let k1 = rng.random_range(2..8);
        let logits: Vec<f64> = (0..k1).map(|_| rng.random_range(-3.0..3.0)).collect();
        let u = rng.random_range(0..k1);
        let grad = cls_loss(&ClassScores::from_logits(&logits)?, u)?.grad_logits;
        for i in 0..k1 {
            let f = |x: f64| {
                let mut l = logits.clone();
                l[i] = x;
                cls_loss(&ClassScores::from_logits(&l).expect("finite"), u)
                    .expect("valid class")
                    .loss
            };
            t.add(grad[i], central_diff(f, logits[i], LOSS_STEP));
        }
    }
    Ok(t.finish("cls_loss", 1e-6))
}

fn random_label<R: Rng + ?Sized>(rng: &mut R, num_classes: usize) -> Result<RoiLabel> {
    if rng.random_bool(0.3) {
        Ok(RoiLabel::background())
    } else {
        RoiLabel::foreground(
            rng.random_range(1..=num_classes),
            random_transform(rng, 2.0),
        )
    }
}

/// Gradient of the per-RoI multi-task loss w.r.t. logits and every
/// regression output.
pub fn check_multitask_outputs<R: Rng + ?Sized>(rng: &mut R, cases: usize) -> Result<Check> {
    let mut t = Tracker::default();
    let k = 3;
    for _ in 0..cases {
        let logits: Vec<f64> = (0..=k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let reg: Vec<[f64; 4]> = (0..k)
            .map(|_| random_transform(rng, 1.0).to_array())
            .collect();
        let label = random_label(rng, k)?;
        let lambda = rng.random_range(0.5..2.0);
        let loss = |logits: &[f64], reg: &[[f64; 4]]| {
            let transforms: Vec<BoxTransform> =
                reg.iter().map(|r| BoxTransform::from_array(*r)).collect();
            multitask_loss(
                &ClassScores::from_logits(logits).expect("finite"),
                &transforms,
                &label,
                lambda,
            )
            .expect("valid")
        };
        let (_, grad) = loss(&logits, &reg);
        for i in 0..=k {
            let f = |x: f64| {
                let mut l = logits.clone();
                l[i] = x;
                loss(&l, &reg).0.total
            };
            t.add(grad.logits[i], central_diff(f, logits[i], LOSS_STEP));
        }
        for c in 0..k {
            for j in 0..4 {
                let f = |x: f64| {
                    let mut r = reg.clone();
                    r[c][j] = x;
                    loss(&logits, &r).0.total
                };
                t.add(grad.regression[c][j], central_diff(f, reg[c][j], LOSS_STEP));
            }
        }
    }
    Ok(t.finish("multitask_outputs", 1e-5))
}

fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Affine layer with the scalar objective `sum(C .* y)`.
pub fn check_fc_layer<R: Rng + ?Sized>(rng: &mut R) -> Result<Check> {
    let (out_dim, in_dim, batch) = (8, 6, 3);
    let layer = FcLayer::new(
        random_matrix(rng, out_dim, in_dim),
        Array1::from_shape_fn(out_dim, |_| rng.random_range(-1.0..1.0)),
    )?;
    let x = random_matrix(rng, batch, in_dim);
    let c = random_matrix(rng, batch, out_dim);
    let objective = |l: &FcLayer, x: &Array2<f64>| -> f64 {
        (l.forward_batch(x.view()).expect("shapes") * &c).sum()
    };
    let (gx, g) = layer.backward_batch(x.view(), c.view())?;
    let mut t = Tracker::default();
    for ((i, j), &a) in gx.indexed_iter() {
        let f = |v: f64| {
            let mut x2 = x.clone();
            x2[[i, j]] = v;
            objective(&layer, &x2)
        };
        t.add(a, central_diff(f, x[[i, j]], LOSS_STEP));
    }
    for ((i, j), &a) in g.weights.indexed_iter() {
        let f = |v: f64| {
            let mut l = layer.clone();
            l.weights[[i, j]] = v;
            objective(&l, &x)
        };
        t.add(a, central_diff(f, layer.weights[[i, j]], LOSS_STEP));
    }
    for (i, &a) in g.bias.indexed_iter() {
        let f = |v: f64| {
            let mut l = layer.clone();
            l.bias[i] = v;
            objective(&l, &x)
        };
        t.add(a, central_diff(f, layer.bias[i], LOSS_STEP));
    }
    Ok(t.finish("fc_layer", 1e-5))
}

fn check_net(rng: &mut ChaCha8Rng, channels: usize) -> Result<DetectionNet> {
    let cfg = NetConfig {
        channels,
        pooled_h: 2,
        pooled_w: 2,
        trunk_widths: vec![10, 8],
        num_classes: 3,
    };
    let sgd = SgdConfig {
        cls_init_std: 0.3,
        bbox_init_std: 0.3,
        ..SgdConfig::default()
    };
    let mut net = DetectionNet::init(&cfg, &sgd, rng)?;
    for layer in &mut net.trunk {
        if let Linear::Dense(d) = &mut layer.op {
            d.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
    }
    Ok(net)
}

/// Gradient reaching the shared trunk features is the sum of both heads'
/// contributions.
pub fn check_head_input(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = check_net(&mut rng, 2)?;
    let rows = 5;
    let features = random_matrix(&mut rng, rows, net.feature_dim());
    let labels = (0..rows)
        .map(|_| random_label(&mut rng, net.num_classes))
        .collect::<Result<Vec<_>>>()?;
    let head_loss = |feat: &Array2<f64>| -> Result<(f64, Array2<f64>, Array2<f64>)> {
        let out = net.head_forward(feat.view())?;
        let mut gl = Array2::zeros(out.logits.raw_dim());
        let mut gr = Array2::zeros(out.regression.raw_dim());
        let mut total = 0.0;
        for (r, label) in labels.iter().enumerate() {
            let scores = ClassScores::from_logits(&out.logits.row(r).to_vec())?;
            let (rep, g) = multitask_loss(&scores, &out.transforms(r), label, 1.0)?;
            total += rep.total;
            gl.row_mut(r).assign(&Array1::from(g.logits));
            for (k, row) in g.regression.iter().enumerate() {
                for j in 0..4 {
                    gr[[r, 4 * k + j]] = row[j];
                }
            }
        }
        Ok((total, gl, gr))
    };
    let (_, gl, gr) = head_loss(&features)?;
    let (gx, _, _) = net.head_backward(features.view(), gl.view(), gr.view())?;
    let mut t = Tracker::default();
    for ((i, j), &a) in gx.indexed_iter() {
        let f = |v: f64| {
            let mut x = features.clone();
            x[[i, j]] = v;
            head_loss(&x).expect("valid").0
        };
        t.add(a, central_diff(f, features[[i, j]], LOSS_STEP));
    }
    Ok(t.finish("head_input", 1e-5))
}

/// Feature map whose values are a shuffled evenly spaced grid in `[-1, 1]`,
/// so every max is unique by a margin far above any finite-difference step.
pub fn tie_free_map<R: Rng + ?Sized>(rng: &mut R, shape: FeatureShape) -> Result<FeatureMap> {
    let n = shape.channels * shape.height * shape.width;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let step = 2.0 / n as f64;
    let data = order
        .iter()
        .map(|&k| -1.0 + step * (k as f64 + 0.5))
        .collect();
    FeatureMap::new(shape.channels, shape.height, shape.width, data)
}

fn random_rois<R: Rng + ?Sized>(rng: &mut R, shape: FeatureShape, n: usize) -> Vec<RoiRect> {
    (0..n)
        .map(|_| {
            let h = rng.random_range(1..=shape.height);
            let w = rng.random_range(1..=shape.width);
            RoiRect::new(
                rng.random_range(0..=shape.height - h),
                rng.random_range(0..=shape.width - w),
                h,
                w,
            )
        })
        .collect()
}

const POOL_STEP: f64 = 1e-3;

/// RoI pooling alone, objective `sum_r sum(C_r .* pool(fm, r))`.
pub fn check_roi_pool(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = FeatureShape {
        channels: 3,
        height: 9,
        width: 11,
    };
    let (ph, pw) = (3, 2);
    let fm = tie_free_map(&mut rng, shape)?;
    let rois = random_rois(&mut rng, shape, 6);
    let coeffs: Vec<Vec<f64>> = rois
        .iter()
        .map(|_| {
            (0..3 * ph * pw)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let objective = |m: &FeatureMap| -> f64 {
        rois.iter()
            .zip(&coeffs)
            .map(|(r, c)| {
                let p = roi_pool_forward(m, r, ph, pw).expect("in bounds");
                p.output.iter().zip(c).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    };
    let pools = rois
        .iter()
        .map(|r| roi_pool_forward(&fm, r, ph, pw))
        .collect::<Result<Vec<_>>>()?;
    let grad = roi_pool_backward(&coeffs, &pools, shape)?;
    let mut t = Tracker::default();
    for i in 0..fm.data().len() {
        let f = |v: f64| {
            let mut m = fm.clone();
            m.data_mut()[i] = v;
            objective(&m)
        };
        t.add(grad.data()[i], central_diff(f, fm.data()[i], POOL_STEP));
    }
    Ok(t.finish("roi_pool", 1e-4))
}

/// Mean multi-task loss of `net` on RoIs pooled from `fm`, with gradients
/// for every parameter and for the feature map.
pub fn end_to_end_loss(
    net: &DetectionNet,
    fm: &FeatureMap,
    rois: &[RoiRect],
    labels: &[RoiLabel],
    lambda: f64,
) -> Result<(f64, NetGrads, FeatureMap)> {
    let pools = rois
        .iter()
        .map(|r| roi_pool_forward(fm, r, net.pooled_h, net.pooled_w))
        .collect::<Result<Vec<_>>>()?;
    let dim = net.input_dim();
    let x = Array2::from_shape_fn((rois.len(), dim), |(i, j)| pools[i].output[j]);
    let (report, grads, grad_input) = net.loss_and_grads(x.view(), labels, lambda)?;
    let rows: Vec<Vec<f64>> = grad_input.rows().into_iter().map(|r| r.to_vec()).collect();
    let grad_fm = roi_pool_backward(&rows, &pools, fm.shape())?;
    Ok((report.total, grads, grad_fm))
}

/// Parameter slot `slot` in `[trunk weights, trunk bias]..., cls, bbox` order.
fn param_mut(net: &mut DetectionNet, slot: usize) -> &mut [f64] {
    let n_trunk = net.trunk.len();
    let layer = if slot / 2 < n_trunk {
        match &mut net.trunk[slot / 2].op {
            Linear::Dense(d) => d,
            Linear::Factored(_) => panic!("gradient check needs dense layers"),
        }
    } else if slot / 2 == n_trunk {
        &mut net.cls
    } else {
        &mut net.bbox
    };
    if slot.is_multiple_of(2) {
        layer.weights.as_slice_mut().expect("standard layout")
    } else {
        layer.bias.as_slice_mut().expect("contiguous")
    }
}

fn grad_slots(g: &NetGrads) -> Vec<Vec<f64>> {
    g.trunk
        .iter()
        .chain([&g.cls, &g.bbox])
        .flat_map(|l| [l.weights.iter().copied().collect(), l.bias.to_vec()])
        .collect()
}

const E2E_STEP: f64 = 1e-5;

/// Feature map -> RoI pooling -> ReLU trunk -> both heads -> mean loss.
pub fn check_end_to_end(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = FeatureShape {
        channels: 3,
        height: 8,
        width: 10,
    };
    let mut net = check_net(&mut rng, shape.channels)?;
    let fm = tie_free_map(&mut rng, shape)?;
    let rois = random_rois(&mut rng, shape, 6);
    let labels = (0..rois.len())
        .map(|_| random_label(&mut rng, net.num_classes))
        .collect::<Result<Vec<_>>>()?;
    let lambda = 1.0;
    let (_, grads, grad_fm) = end_to_end_loss(&net, &fm, &rois, &labels, lambda)?;
    let mut t = Tracker::default();
    for (slot, analytic) in grad_slots(&grads).into_iter().enumerate() {
        for (i, a) in analytic.into_iter().enumerate() {
            let orig = param_mut(&mut net, slot)[i];
            let mut at = |v: f64| -> Result<f64> {
                param_mut(&mut net, slot)[i] = v;
                Ok(end_to_end_loss(&net, &fm, &rois, &labels, lambda)?.0)
            };
            let numeric = (at(orig + E2E_STEP)? - at(orig - E2E_STEP)?) / (2.0 * E2E_STEP);
            param_mut(&mut net, slot)[i] = orig;
            t.add(a, numeric);
        }
    }
    for i in 0..fm.data().len() {
        let f = |v: f64| {
            let mut m = fm.clone();
            m.data_mut()[i] = v;
            end_to_end_loss(&net, &m, &rois, &labels, lambda)
                .expect("valid")
                .0
        };
        t.add(grad_fm.data()[i], central_diff(f, fm.data()[i], E2E_STEP));
    }
    Ok(t.finish("end_to_end", 1e-4))
}

/// Runs every check with inputs drawn from `seed`.
pub fn run_all(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(GradcheckReport {
        checks: vec![
            check_smooth_l1(&mut rng, 1000),
            check_loc_loss(&mut rng, 250),
            check_cls_loss(&mut rng, 250)?,
            check_multitask_outputs(&mut rng, 100)?,
            check_fc_layer(&mut rng)?,
            check_head_input(seed.wrapping_add(1))?,
            check_roi_pool(seed.wrapping_add(2))?,
            check_end_to_end(seed.wrapping_add(3))?,
        ],
    })
}
