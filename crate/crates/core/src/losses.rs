//! Multi-task detection loss: softmax log loss plus smooth-L1 box regression.

use crate::geometry::BoxTransform;
use crate::{Error, Result};

/// Lower clamp on the true-class probability inside `-ln p_u`.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Sum of smooth-L1 over the four coordinates and its gradient w.r.t. `t`.
pub fn loc_loss(t: &BoxTransform, v: &BoxTransform) -> (f64, [f64; 4]) {
    let (t, v) = (t.to_array(), v.to_array());
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d = t[i] - v[i];
        loss += smooth_l1(d);
        grad[i] = smooth_l1_grad(d);
    }
    (loss, grad)
}

/// Logits and their softmax over `K + 1` classes (index 0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ClassScores {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::ShapeMismatch("empty logit vector".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(ClassScores {
            logits: logits.to_vec(),
            probs: softmax(logits),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsLoss {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
    /// True when `p_u` fell below [`PROB_FLOOR`].
    pub clamped: bool,
}

pub fn cls_loss(scores: &ClassScores, u: usize) -> Result<ClsLoss> {
    let k1 = scores.num_classes();
    if u >= k1 {
        return Err(Error::ClassOutOfRange {
            class: u,
            num_classes: k1,
        });
    }
    let p_u = scores.probs[u];
    let clamped = p_u < PROB_FLOOR;
    let mut grad_logits = scores.probs.clone();
    grad_logits[u] -= 1.0;
    Ok(ClsLoss {
        loss: -p_u.max(PROB_FLOOR).ln(),
        grad_logits,
        clamped,
    })
}

/// Ground-truth class and, for foreground RoIs only, the normalized target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiLabel {
    class: usize,
    target: Option<BoxTransform>,
}

impl RoiLabel {
    pub fn background() -> Self {
        RoiLabel {
            class: 0,
            target: None,
        }
    }

    pub fn foreground(class: usize, target: BoxTransform) -> Result<Self> {
        if class == 0 {
            return Err(Error::Config(
                "foreground label needs a class index >= 1".into(),
            ));
        }
        Ok(RoiLabel {
            class,
            target: Some(target),
        })
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn target(&self) -> Option<&BoxTransform> {
        self.target.as_ref()
    }

    pub fn is_foreground(&self) -> bool {
        self.class >= 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
    pub lambda: f64,
    /// Set when any `p_u` hit the probability floor.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskGrad {
    pub logits: Vec<f64>,
    /// One row per object class `k = 1..=K` (row `k - 1`).
    pub regression: Vec<[f64; 4]>,
}

/// Loss for one RoI; `regression[k - 1]` holds the normalized offsets for class `k`.
pub fn multitask_loss(
    scores: &ClassScores,
    regression: &[BoxTransform],
    label: &RoiLabel,
    lambda: f64,
) -> Result<(LossReport, MultitaskGrad)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    if regression.len() + 1 != scores.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "{} regression rows for {} classes including background",
            regression.len(),
            scores.num_classes()
        )));
    }
    let cls = cls_loss(scores, label.class())?;
    let mut grad_reg = vec![[0.0; 4]; regression.len()];
    let mut loc = 0.0;
    if let (true, Some(v)) = (label.is_foreground(), label.target()) {
        let (l, g) = loc_loss(&regression[label.class() - 1], v);
        loc = l;
        grad_reg[label.class() - 1] = g.map(|gi| lambda * gi);
    }
    let gate = if label.is_foreground() { 1.0 } else { 0.0 };
    let report = LossReport {
        total: cls.loss + lambda * gate * loc,
        cls: cls.loss,
        loc,
        lambda,
        clamped: cls.clamped,
    };
    Ok((
        report,
        MultitaskGrad {
            logits: cls.grad_logits,
            regression: grad_reg,
        },
    ))
}

/// Mean over RoIs of both loss terms; per-RoI gradients are scaled by `1/R`.
pub fn batch_multitask_loss(
    scores: &[ClassScores],
    regression: &[Vec<BoxTransform>],
    labels: &[RoiLabel],
    lambda: f64,
) -> Result<(LossReport, Vec<MultitaskGrad>)> {
    if scores.len() != labels.len() || regression.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} score rows, {} regression rows, {} labels",
            scores.len(),
            regression.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Insufficient("empty minibatch".into()));
    }
    let inv = 1.0 / labels.len() as f64;
    let mut report = LossReport {
        lambda,
        ..LossReport::default()
    };
    let mut fg_loc = 0.0;
    let mut grads = Vec::with_capacity(labels.len());
    for ((s, t), label) in scores.iter().zip(regression).zip(labels) {
        let (r, mut g) = multitask_loss(s, t, label, lambda)?;
        report.cls += r.cls * inv;
        report.loc += r.loc * inv;
        if label.is_foreground() {
            fg_loc += r.loc * inv;
        }
        report.clamped |= r.clamped;
        g.logits.iter_mut().for_each(|v| *v *= inv);
        g.regression
            .iter_mut()
            .for_each(|row| row.iter_mut().for_each(|v| *v *= inv));
        grads.push(g);
    }
    report.total = report.cls + lambda * fg_loc;
    Ok((report, grads))
}
