//! Loss terms with analytic gradients and the two joint objectives.

use crate::error::{Error, Result};
use crate::geometry::BoxTransform;
use crate::supervision::WeakMask;
use crate::tinynet::Tensor;

/// Weighted two-class softmax cross-entropy on `(background, foreground)`
/// logits. Returns the loss and its gradient with respect to the logits.
pub fn softmax_ce(logits: [f64; 2], label: usize, weight: f64) -> (f64, [f64; 2]) {
    debug_assert!(label < 2);
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    let log_z = m + z.ln();
    let p = [e0 / z, e1 / z];
    let loss = weight * (log_z - logits[label]);
    let mut grad = [weight * p[0], weight * p[1]];
    grad[label] -= weight;
    (loss, grad)
}

/// Sum over the four coordinates of the robust L1 penalty:
/// `0.5 d^2` for `|d| < 1`, `|d| - 0.5` otherwise. The gradient is with
/// respect to `pred` and lies in `[-1, 1]`.
pub fn smooth_l1(pred: &BoxTransform, target: &BoxTransform) -> (f64, [f64; 4]) {
    let p = pred.as_array();
    let t = target.as_array();
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d = p[k] - t[k];
        if d.abs() < 1.0 {
            loss += 0.5 * d * d;
            grad[k] = d;
        } else {
            loss += d.abs() - 0.5;
            grad[k] = d.signum();
        }
    }
    (loss, grad)
}

/// Per-location weighted softmax loss of a `(2, H, W)` logit map against a
/// weak mask. Returns the weighted sum (not averaged) and logit gradients.
pub fn segmentation_loss(logits: &Tensor, mask: &WeakMask) -> Result<(f64, Tensor)> {
    let (c, h, w) = logits.chw()?;
    if c != 2 || h != mask.height || w != mask.width {
        return Err(Error::ShapeMismatch {
            context: "segmentation logits vs mask".into(),
            expected: vec![2, mask.height, mask.width],
            got: logits.shape().to_vec(),
        });
    }
    let n = h * w;
    let data = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let g = grad.data_mut();
    let mut loss = 0.0;
    for i in 0..n {
        let weight = mask.weights[i];
        if weight == 0.0 {
            continue;
        }
        let (l, gi) = softmax_ce([data[i], data[n + i]], mask.values[i] as usize, weight);
        loss += l;
        g[i] = gi[0];
        g[n + i] = gi[1];
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub classification: f64,
    pub regression: f64,
    pub segmentation: f64,
}

impl LossWeights {
    /// lambda_c = lambda_s = 1, lambda_r = 5.
    pub const fn rpn_default() -> Self {
        LossWeights {
            classification: 1.0,
            regression: 5.0,
            segmentation: 1.0,
        }
    }

    /// lambda_c = lambda_s = 1; the classifier stage has no regression term.
    pub const fn bcn_default() -> Self {
        LossWeights {
            classification: 1.0,
            regression: 0.0,
            segmentation: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub classification: f64,
    pub regression: f64,
    pub segmentation: f64,
    pub total: f64,
    pub weights_used: LossWeights,
}

impl LossBreakdown {
    fn combine(classification: f64, regression: f64, segmentation: f64, w: LossWeights) -> Self {
        LossBreakdown {
            classification,
            regression,
            segmentation,
            total: w.classification * classification
                + w.regression * regression
                + w.segmentation * segmentation,
            weights_used: w,
        }
    }
}

fn mean_over(sum: f64, batch: usize) -> f64 {
    if batch == 0 {
        0.0
    } else {
        sum / batch as f64
    }
}

/// Proposal-stage objective. Classification and regression term sums are
/// averaged over the sampled minibatch size `batch` (regression terms exist
/// for foreground samples only); `segmentation` is the already-averaged
/// segmentation loss.
pub fn rpn_joint_loss(
    cls_terms: &[f64],
    reg_terms: &[f64],
    segmentation: f64,
    batch: usize,
    weights: LossWeights,
) -> LossBreakdown {
    LossBreakdown::combine(
        mean_over(cls_terms.iter().sum(), batch),
        mean_over(reg_terms.iter().sum(), batch),
        segmentation,
        weights,
    )
}

/// Classifier-stage objective: cost-weighted classification averaged over
/// the proposals, plus segmentation.
pub fn bcn_joint_loss(
    cls_terms: &[f64],
    cost_weights: &[f64],
    segmentation: f64,
    weights: LossWeights,
) -> LossBreakdown {
    debug_assert_eq!(cls_terms.len(), cost_weights.len());
    let weighted: f64 = cls_terms.iter().zip(cost_weights).map(|(l, w)| l * w).sum();
    LossBreakdown::combine(
        mean_over(weighted, cls_terms.len()),
        0.0,
        segmentation,
        LossWeights {
            regression: 0.0,
            ..weights
        },
    )
}
