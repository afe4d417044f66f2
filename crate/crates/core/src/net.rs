//! Fully connected detection head trained with momentum SGD.
//!
//! Pooled RoI features (one row per RoI) pass through a ReLU trunk of
//! affine layers and then into two sibling affine heads: `K + 1` class
//! logits and `4K` class-specific box offsets.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::BoxTransform;
use crate::losses::{batch_multitask_loss, ClassScores, LossReport, RoiLabel};
use crate::svd::CompressedFcLayer;
use crate::{Error, Result};

/// Affine layer `y = W x + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub weight_lr_mult: f64,
    pub bias_lr_mult: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl FcGrads {
    pub fn zeros_like(layer: &FcLayer) -> Self {
        FcGrads {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

impl FcLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?} with bias of length {}",
                weights.shape(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(FcLayer {
            weights,
            bias,
            weight_lr_mult: 1.0,
            bias_lr_mult: 2.0,
        })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        FcLayer::new(Array2::zeros((out_dim, in_dim)), Array1::zeros(out_dim))
            .expect("zero layer is well formed")
    }

    /// Gaussian weights `N(0, std^2)`, zero bias.
    pub fn gaussian<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite stddev");
        let weights = Array2::from_shape_simple_fn((out_dim, in_dim), || normal.sample(rng));
        FcLayer::new(weights, Array1::zeros(out_dim)).expect("finite init")
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "layer expects {} inputs, got {cols}",
                self.in_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let x = ndarray::ArrayView1::from(x);
        Ok((self.weights.dot(&x) + &self.bias).to_vec())
    }

    /// Rows of `x` are independent inputs; returns `x W^T + b`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        Ok(x.dot(&self.weights.t()) + &self.bias)
    }

    /// Input gradient `grad_y W` and parameter gradients summed over the batch.
    pub fn backward_batch(
        &self,
        x: ArrayView2<f64>,
        grad_y: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, FcGrads)> {
        self.check_input(x.ncols())?;
        if grad_y.ncols() != self.out_dim() || grad_y.nrows() != x.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} for input {:?} and layer {:?}",
                grad_y.shape(),
                x.shape(),
                self.weights.shape()
            )));
        }
        let grad_x = grad_y.dot(&self.weights);
        let grads = FcGrads {
            weights: grad_y.t().dot(&x),
            bias: grad_y.sum_axis(Axis(0)),
        };
        Ok((grad_x, grads))
    }
}

/// A trunk layer: dense, or the two-factor form produced by SVD compression.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    Dense(FcLayer),
    Factored(CompressedFcLayer),
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        match self {
            Linear::Dense(l) => l.in_dim(),
            Linear::Factored(c) => c.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Linear::Dense(l) => l.out_dim(),
            Linear::Factored(c) => c.out_dim(),
        }
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Linear::Dense(l) => l.forward_batch(x),
            Linear::Factored(c) => c.forward_batch(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrunkLayer {
    pub name: String,
    pub op: Linear,
}

/// Which parameters an SGD step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub trunk: bool,
    pub cls: bool,
    pub bbox: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        trunk: true,
        cls: true,
        bbox: true,
    };
    pub const BBOX_ONLY: Trainable = Trainable {
        trunk: false,
        cls: false,
        bbox: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    /// Iteration at which the learning rate is multiplied by `lr_gamma`.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weight_lr_mult: f64,
    pub bias_lr_mult: f64,
    pub cls_init_std: f64,
    pub bbox_init_std: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.001,
            lr_step: 3000,
            lr_gamma: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            weight_lr_mult: 1.0,
            bias_lr_mult: 2.0,
            cls_init_std: 0.01,
            bbox_init_std: 0.001,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.base_lr,
            self.lr_gamma,
            self.momentum,
            self.weight_decay,
            self.weight_lr_mult,
            self.bias_lr_mult,
            self.cls_init_std,
            self.bbox_init_std,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(
                "SGD settings must be finite and non-negative".into(),
            ));
        }
        if self.lr_gamma > 1.0 {
            return Err(Error::Config(
                "learning-rate schedule must not increase".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        if iter >= self.lr_step {
            self.base_lr * self.lr_gamma
        } else {
            self.base_lr
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub channels: usize,
    pub pooled_h: usize,
    pub pooled_w: usize,
    pub trunk_widths: Vec<usize>,
    /// Object classes, background excluded.
    pub num_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: 8,
            pooled_h: 4,
            pooled_w: 4,
            trunk_widths: vec![256, 256],
            num_classes: 4,
        }
    }
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        self.channels * self.pooled_h * self.pooled_w
    }
}

/// Sibling-head outputs for a batch of RoIs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// `R x (K + 1)` class logits.
    pub logits: Array2<f64>,
    /// `R x 4K` normalized box offsets, class `k` in columns `4(k-1)..4k`.
    pub regression: Array2<f64>,
}

impl HeadOutputs {
    pub fn transforms(&self, row: usize) -> Vec<BoxTransform> {
        self.regression
            .row(row)
            .as_slice()
            .expect("standard layout")
            .chunks_exact(4)
            .map(|c| BoxTransform::new(c[0], c[1], c[2], c[3]))
            .collect()
    }
}

/// Intermediate activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every trunk layer, then the trunk output.
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn features(&self) -> &Array2<f64> {
        self.activations.last().expect("non-empty cache")
    }
}

/// Gradients for every layer in [`DetectionNet::layer_names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub trunk: Vec<FcGrads>,
    pub cls: FcGrads,
    pub bbox: FcGrads,
}

impl NetGrads {
    fn iter(&self) -> impl Iterator<Item = &FcGrads> {
        self.trunk.iter().chain([&self.cls, &self.bbox])
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(FcGrads::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionNet {
    pub pooled_h: usize,
    pub pooled_w: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub trunk: Vec<TrunkLayer>,
    pub cls: FcLayer,
    pub bbox: FcLayer,
}

pub fn init_heads<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SgdConfig,
    in_dim: usize,
    num_classes: usize,
) -> (FcLayer, FcLayer) {
    let mut cls = FcLayer::gaussian(num_classes + 1, in_dim, cfg.cls_init_std, rng);
    let mut bbox = FcLayer::gaussian(4 * num_classes, in_dim, cfg.bbox_init_std, rng);
    for l in [&mut cls, &mut bbox] {
        l.weight_lr_mult = cfg.weight_lr_mult;
        l.bias_lr_mult = cfg.bias_lr_mult;
    }
    (cls, bbox)
}

impl DetectionNet {
    /// Trunk layers use He initialization; heads follow [`init_heads`].
    pub fn init<R: Rng + ?Sized>(net: &NetConfig, sgd: &SgdConfig, rng: &mut R) -> Result<Self> {
        if net.num_classes == 0 || net.input_dim() == 0 || net.trunk_widths.contains(&0) {
            return Err(Error::Config(format!("degenerate network config {net:?}")));
        }
        let mut trunk = Vec::with_capacity(net.trunk_widths.len());
        let mut in_dim = net.input_dim();
        for (i, &width) in net.trunk_widths.iter().enumerate() {
            let mut layer = FcLayer::gaussian(width, in_dim, (2.0 / in_dim as f64).sqrt(), rng);
            layer.weight_lr_mult = sgd.weight_lr_mult;
            layer.bias_lr_mult = sgd.bias_lr_mult;
            trunk.push(TrunkLayer {
                name: format!("fc{}", 6 + i),
                op: Linear::Dense(layer),
            });
            in_dim = width;
        }
        let (cls, bbox) = init_heads(rng, sgd, in_dim, net.num_classes);
        Ok(DetectionNet {
            pooled_h: net.pooled_h,
            pooled_w: net.pooled_w,
            channels: net.channels,
            num_classes: net.num_classes,
            trunk,
            cls,
            bbox,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.pooled_h * self.pooled_w
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk
            .last()
            .map_or(self.input_dim(), |l| l.op.out_dim())
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.trunk
            .iter()
            .map(|l| l.name.clone())
            .chain(["cls_score".to_string(), "bbox_pred".to_string()])
            .collect()
    }

    pub fn trunk_forward(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "trunk expects {} pooled features, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut activations = Vec::with_capacity(self.trunk.len() + 1);
        activations.push(x.to_owned());
        for layer in &self.trunk {
            let mut y = layer.op.forward_batch(activations.last().unwrap().view())?;
            y.mapv_inplace(|v| v.max(0.0));
            activations.push(y);
        }
        Ok(ForwardCache { activations })
    }

    pub fn head_forward(&self, features: ArrayView2<f64>) -> Result<HeadOutputs> {
        Ok(HeadOutputs {
            logits: self.cls.forward_batch(features)?,
            regression: self.bbox.forward_batch(features)?,
        })
    }

    /// Both heads read the same features, so their input gradients add.
    pub fn head_backward(
        &self,
        features: ArrayView2<f64>,
        grad_logits: ArrayView2<f64>,
        grad_regression: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, FcGrads, FcGrads)> {
        let (gx_cls, g_cls) = self.cls.backward_batch(features, grad_logits)?;
        let (gx_box, g_box) = self.bbox.backward_batch(features, grad_regression)?;
        Ok((gx_cls + gx_box, g_cls, g_box))
    }

    /// Backpropagates a feature gradient through the ReLU trunk.
    pub fn trunk_backward(
        &self,
        cache: &ForwardCache,
        grad_features: Array2<f64>,
    ) -> Result<(Array2<f64>, Vec<FcGrads>)> {
        let mut grad = grad_features;
        let mut grads = Vec::with_capacity(self.trunk.len());
        for (i, layer) in self.trunk.iter().enumerate().rev() {
            let out = &cache.activations[i + 1];
            ndarray::Zip::from(&mut grad).and(out).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            });
            let dense = match &layer.op {
                Linear::Dense(l) => l,
                Linear::Factored(_) => {
                    return Err(Error::Config(format!(
                        "layer {} is compressed and cannot be trained",
                        layer.name
                    )))
                }
            };
            let (gx, g) = dense.backward_batch(cache.activations[i].view(), grad.view())?;
            grads.push(g);
            grad = gx;
        }
        grads.reverse();
        Ok((grad, grads))
    }

    pub fn forward(&self, pooled: ArrayView2<f64>) -> Result<(ForwardCache, HeadOutputs)> {
        let cache = self.trunk_forward(pooled)?;
        let out = self.head_forward(cache.features().view())?;
        Ok((cache, out))
    }

    /// Mean multi-task loss over the batch, parameter gradients, and the
    /// gradient with respect to the pooled input rows.
    pub fn loss_and_grads(
        &self,
        pooled: ArrayView2<f64>,
        labels: &[RoiLabel],
        lambda: f64,
    ) -> Result<(LossReport, NetGrads, Array2<f64>)> {
        if pooled.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} pooled rows for {} labels",
                pooled.nrows(),
                labels.len()
            )));
        }
        let (cache, out) = self.forward(pooled)?;
        let rows = labels.len();
        let scores = (0..rows)
            .map(|r| ClassScores::from_logits(out.logits.row(r).as_slice().expect("contiguous")))
            .collect::<Result<Vec<_>>>()?;
        let regression: Vec<Vec<BoxTransform>> = (0..rows).map(|r| out.transforms(r)).collect();
        let (report, per_roi) = batch_multitask_loss(&scores, &regression, labels, lambda)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let k1 = self.num_classes + 1;
        let mut grad_logits = Array2::zeros((rows, k1));
        let mut grad_reg = Array2::zeros((rows, 4 * self.num_classes));
        for (r, g) in per_roi.iter().enumerate() {
            grad_logits
                .row_mut(r)
                .assign(&ndarray::ArrayView1::from(&g.logits));
            let mut row = grad_reg.row_mut(r);
            for (k, t) in g.regression.iter().enumerate() {
                row.slice_mut(s![4 * k..4 * k + 4])
                    .assign(&ndarray::ArrayView1::from(t));
            }
        }
        let (grad_features, g_cls, g_box) =
            self.head_backward(cache.features().view(), grad_logits.view(), grad_reg.view())?;
        let (grad_input, trunk) = self.trunk_backward(&cache, grad_features)?;
        Ok((
            report,
            NetGrads {
                trunk,
                cls: g_cls,
                bbox: g_box,
            },
            grad_input,
        ))
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: NetGrads,
}

impl SgdState {
    pub fn new(net: &DetectionNet) -> Result<Self> {
        let trunk = net
            .trunk
            .iter()
            .map(|l| match &l.op {
                Linear::Dense(d) => Ok(FcGrads::zeros_like(d)),
                Linear::Factored(_) => Err(Error::Config(format!(
                    "layer {} is compressed and cannot be trained",
                    l.name
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SgdState {
            velocity: NetGrads {
                trunk,
                cls: FcGrads::zeros_like(&net.cls),
                bbox: FcGrads::zeros_like(&net.bbox),
            },
        })
    }
}

fn momentum_update(
    layer: &mut FcLayer,
    grad: &FcGrads,
    vel: &mut FcGrads,
    cfg: &SgdConfig,
    lr: f64,
) -> Result<()> {
    if grad.weights.raw_dim() != layer.weights.raw_dim() || grad.bias.len() != layer.bias.len() {
        return Err(Error::ShapeMismatch("gradient does not match layer".into()));
    }
    let (m, decay) = (cfg.momentum, cfg.weight_decay);
    let lr_w = lr * layer.weight_lr_mult;
    let lr_b = lr * layer.bias_lr_mult;
    ndarray::Zip::from(&mut layer.weights)
        .and(&grad.weights)
        .and(&mut vel.weights)
        .for_each(|p, &g, v| {
            *v = m * *v - lr_w * (g + decay * *p);
            *p += *v;
        });
    ndarray::Zip::from(&mut layer.bias)
        .and(&grad.bias)
        .and(&mut vel.bias)
        .for_each(|p, &g, v| {
            *v = m * *v - lr_b * (g + decay * *p);
            *p += *v;
        });
    Ok(())
}

/// One momentum step: `v = m v - lr_eff (g + decay p)`, `p += v`.
///
/// Non-finite gradients reject the whole step before any parameter changes.
/// Layers excluded by `trainable` keep both parameters and velocity.
pub fn sgd_step(
    net: &mut DetectionNet,
    grads: &NetGrads,
    state: &mut SgdState,
    cfg: &SgdConfig,
    iter: usize,
    trainable: Trainable,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!("gradients at iteration {iter}")));
    }
    if grads.trunk.len() != net.trunk.len() || state.velocity.trunk.len() != net.trunk.len() {
        return Err(Error::ShapeMismatch("gradient/trunk layer count".into()));
    }
    let lr = cfg.lr_at(iter);
    if trainable.trunk {
        for ((layer, g), v) in net
            .trunk
            .iter_mut()
            .zip(&grads.trunk)
            .zip(&mut state.velocity.trunk)
        {
            match &mut layer.op {
                Linear::Dense(d) => momentum_update(d, g, v, cfg, lr)?,
                Linear::Factored(_) => {
                    return Err(Error::Config(format!(
                        "layer {} is compressed and cannot be trained",
                        layer.name
                    )))
                }
            }
        }
    }
    if trainable.cls {
        momentum_update(&mut net.cls, &grads.cls, &mut state.velocity.cls, cfg, lr)?;
    }
    if trainable.bbox {
        momentum_update(
            &mut net.bbox,
            &grads.bbox,
            &mut state.velocity.bbox,
            cfg,
            lr,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer() {
        let l = FcLayer::new(Array2::eye(3), Array1::zeros(3)).unwrap();
        assert_eq!(l.forward(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
        assert!(l.forward(&[1.0]).is_err());
        assert!(FcLayer::new(Array2::eye(3), Array1::zeros(2)).is_err());
    }

    #[test]
    fn batch_matches_single_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = FcLayer::gaussian(4, 3, 1.0, &mut rng);
        l.bias = array![0.1, -0.2, 0.3, 0.0];
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.25]];
        let y = l.forward_batch(x.view()).unwrap();
        for r in 0..2 {
            let single = l.forward(x.row(r).as_slice().unwrap()).unwrap();
            for (a, b) in single.iter().zip(y.row(r)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_shapes_and_bias_sum() {
        let l = FcLayer::zeros(2, 3);
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let gy = array![[1.0, 0.0], [0.5, 2.0]];
        let (gx, g) = l.backward_batch(x.view(), gy.view()).unwrap();
        assert_eq!(gx.shape(), &[2, 3]);
        assert_eq!(g.bias, array![1.5, 2.0]);
        assert_eq!(g.weights[[0, 0]], 1.0 + 0.5 * 4.0);
        assert!(l.backward_batch(x.view(), gy.slice(s![..1, ..])).is_err());
    }

    #[test]
    fn schedule_drops_once() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.lr_at(0), 0.001);
        assert_eq!(cfg.lr_at(2999), 0.001);
        assert!((cfg.lr_at(3000) - 0.0001).abs() < 1e-18);
        cfg.validate().unwrap();
        let bad = SgdConfig {
            lr_gamma: 2.0,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let bad = SgdConfig {
            momentum: -0.1,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    fn tiny_net(seed: u64) -> DetectionNet {
        let cfg = NetConfig {
            channels: 2,
            pooled_h: 2,
            pooled_w: 2,
            trunk_widths: vec![5],
            num_classes: 2,
        };
        DetectionNet::init(
            &cfg,
            &SgdConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let a = tiny_net(9);
        assert_eq!(a, tiny_net(9));
        assert_ne!(a, tiny_net(10));
        assert!(a
            .cls
            .bias
            .iter()
            .chain(a.bbox.bias.iter())
            .all(|&b| b == 0.0));
        assert_eq!(a.cls.bias_lr_mult, 2.0 * a.cls.weight_lr_mult);
    }

    #[test]
    fn zero_bbox_head_regresses_nothing() {
        let mut net = tiny_net(1);
        net.bbox = FcLayer::zeros(8, 5);
        let x = Array2::from_elem((3, 8), 0.7);
        let (_, out) = net.forward(x.view()).unwrap();
        assert!(out.regression.iter().all(|&v| v == 0.0));
        assert_eq!(out.transforms(0), vec![BoxTransform::ZERO; 2]);
    }

    #[test]
    fn sgd_single_step_matches_rule() {
        let mut net = tiny_net(2);
        let before = net.clone();
        let mut state = SgdState::new(&net).unwrap();
        let cfg = SgdConfig::default();
        let mut grads = state.velocity.clone();
        grads.cls.weights.fill(0.5);
        grads.cls.bias.fill(0.5);
        sgd_step(&mut net, &grads, &mut state, &cfg, 0, Trainable::ALL).unwrap();
        let w0 = before.cls.weights[[0, 0]];
        let expect = w0 - 0.001 * (0.5 + 0.0005 * w0);
        assert!((net.cls.weights[[0, 0]] - expect).abs() < 1e-15);
        // bias starts at 0, bias lr is doubled
        assert!((net.cls.bias[0] - (-0.002 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_zero_decay_is_noop() {
        let mut net = tiny_net(4);
        let before = net.clone();
        let mut state = SgdState::new(&net).unwrap();
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let grads = state.velocity.clone();
        for it in 0..3 {
            sgd_step(&mut net, &grads, &mut state, &cfg, it, Trainable::ALL).unwrap();
        }
        assert_eq!(net, before);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // scalar recurrence: v1 = -lr g, p1 = p0 + v1, v2 = m v1 - lr g, p2 = p1 + v2
        let mut net = tiny_net(5);
        let mut state = SgdState::new(&net).unwrap();
        let cfg = SgdConfig {
            weight_decay: 0.0,
            base_lr: 0.1,
            ..SgdConfig::default()
        };
        let p0 = net.bbox.weights[[1, 2]];
        let mut grads = state.velocity.clone();
        grads.bbox.weights[[1, 2]] = 2.0;
        sgd_step(&mut net, &grads, &mut state, &cfg, 0, Trainable::ALL).unwrap();
        sgd_step(&mut net, &grads, &mut state, &cfg, 1, Trainable::ALL).unwrap();
        let v1 = -0.1 * 2.0;
        let v2 = 0.9 * v1 - 0.1 * 2.0;
        assert!((net.bbox.weights[[1, 2]] - (p0 + v1 + v2)).abs() < 1e-14);
    }

    #[test]
    fn sgd_rejects_non_finite_and_respects_freezing() {
        let mut net = tiny_net(6);
        let before = net.clone();
        let mut state = SgdState::new(&net).unwrap();
        let cfg = SgdConfig::default();
        let mut grads = state.velocity.clone();
        grads.trunk[0].weights[[0, 0]] = f64::NAN;
        assert!(sgd_step(&mut net, &grads, &mut state, &cfg, 0, Trainable::ALL).is_err());
        assert_eq!(net, before);
        grads.trunk[0].weights[[0, 0]] = 1.0;
        grads.cls.weights.fill(1.0);
        grads.bbox.weights.fill(1.0);
        sgd_step(&mut net, &grads, &mut state, &cfg, 0, Trainable::BBOX_ONLY).unwrap();
        assert_eq!(net.trunk, before.trunk);
        assert_eq!(net.cls, before.cls);
        assert_ne!(net.bbox, before.bbox);
    }

    #[test]
    fn lambda_zero_leaves_bbox_gradient_zero() {
        let net = tiny_net(7);
        let x = Array2::from_shape_fn((2, 8), |(i, j)| (i * 8 + j) as f64 * 0.1 - 0.3);
        let labels = [
            RoiLabel::foreground(1, BoxTransform::new(0.5, 0.5, 0.5, 0.5)).unwrap(),
            RoiLabel::background(),
        ];
        let (_, grads, _) = net.loss_and_grads(x.view(), &labels, 0.0).unwrap();
        assert!(grads.bbox.weights.iter().all(|&v| v == 0.0));
        assert!(grads.bbox.bias.iter().all(|&v| v == 0.0));
        let (_, grads, _) = net.loss_and_grads(x.view(), &labels, 1.0).unwrap();
        assert!(grads.bbox.weights.iter().any(|&v| v != 0.0));
    }
}
