use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{crop_warp, rpn_infer, Dataset, PipelineConfig};
use crate::error::{Error, Result};
use crate::geometry::{encode_transform, pad_box, AnchorGrid, BBox, BoxTransform};
use crate::losses::{
    bcn_joint_loss, rpn_joint_loss, segmentation_loss, smooth_l1, softmax_ce, LossBreakdown,
    LossWeights,
};
use crate::supervision::{
    cost_weight, label_proposals, mean_gt_height, proposal_mask, rasterize_weak_mask,
    sample_minibatch, Annotation, LabelClass, ProposalLabel, WeakMask,
};
use crate::tinynet::arch::{build_bcn, build_rpn, CLASSIFIER_HEAD, PROPOSAL_HEAD, SEGMENTATION_HEAD};
use crate::tinynet::gradcheck::Objective;
use crate::tinynet::{sgd_step, HeadGrads, Network, OptimState, Record, Tensor};

const SALT_RPN_INIT: u64 = 1;
const SALT_BCN_INIT: u64 = 2;
const SALT_ORDER: u64 = 3;
const SALT_SAMPLE: u64 = 4;

pub(crate) fn mix(seed: u64, salt: u64, n: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(n.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, SALT_ORDER, epoch as u64)));
    order
}

fn head<'r>(record: &'r Record, name: &str) -> Result<&'r Tensor> {
    record
        .head_output(name)
        .ok_or_else(|| Error::InvalidArgument(format!("record holds no output for head `{name}`")))
}

fn scale(t: &mut Tensor, s: f64) {
    t.data_mut().iter_mut().for_each(|v| *v *= s);
}

/// Weighted segmentation term of one map: `(weighted sum, gradient of
/// lambda_s * sum / normalizer)`.
fn seg_term(record: &Record, mask: &WeakMask, lambda: f64, normalizer: usize) -> Result<(f64, Tensor)> {
    let (sum, mut grad) = segmentation_loss(head(record, SEGMENTATION_HEAD)?, mask)?;
    scale(&mut grad, if normalizer == 0 { 0.0 } else { lambda / normalizer as f64 });
    Ok((sum, grad))
}

/// Proposal-stage loss of one image: sampled anchor classification,
/// foreground box regression and the weak segmentation mask.
#[derive(Debug, Clone)]
pub struct RpnObjective<'a> {
    pub grid: &'a AnchorGrid,
    pub gts: &'a [Annotation],
    pub labels: Vec<ProposalLabel>,
    /// Sampled anchor indices.
    pub selected: Vec<usize>,
    /// `None` when the segmentation weight is zero.
    pub mask: Option<WeakMask>,
    pub weights: LossWeights,
}

impl<'a> RpnObjective<'a> {
    pub fn new(
        grid: &'a AnchorGrid,
        gts: &'a [Annotation],
        cfg: &PipelineConfig,
        mean_height: Option<f64>,
        sample_seed: u64,
    ) -> Self {
        let labels = label_proposals(&grid.anchors, gts, &cfg.rpn_policy);
        let selected = sample_minibatch(&labels, cfg.rpn_batch, cfg.rpn_fg_fraction, sample_seed);
        let mask = (cfg.rpn_weights.segmentation != 0.0)
            .then(|| rasterize_weak_mask(gts, grid.cols, grid.rows, grid.stride as f64, mean_height));
        RpnObjective {
            grid,
            gts,
            labels,
            selected,
            mask,
            weights: cfg.rpn_weights,
        }
    }

    /// Heads whose outputs the objective reads.
    pub fn heads(&self) -> &'static [&'static str] {
        if self.mask.is_some() {
            &[PROPOSAL_HEAD, SEGMENTATION_HEAD]
        } else {
            &[PROPOSAL_HEAD]
        }
    }

    pub fn breakdown(&self, record: &Record) -> Result<(LossBreakdown, HeadGrads)> {
        let out = head(record, PROPOSAL_HEAD)?;
        let (c, h, w) = out.chw()?;
        let na = self.grid.num_scales();
        if c != 6 * na || h != self.grid.rows || w != self.grid.cols {
            return Err(Error::ShapeMismatch {
                context: "proposal head output vs anchor grid".into(),
                expected: vec![6 * na, self.grid.rows, self.grid.cols],
                got: out.shape().to_vec(),
            });
        }
        let at = |ch: usize, y: usize, x: usize| (ch * h + y) * w + x;
        let values = out.data();
        let mut grad = Tensor::zeros(out.shape());
        let g = grad.data_mut();
        let batch = self.selected.len();
        let norm = if batch == 0 { 0.0 } else { 1.0 / batch as f64 };
        let (lc, lr) = (self.weights.classification * norm, self.weights.regression * norm);

        let mut cls = Vec::with_capacity(batch);
        let mut reg = Vec::new();
        for &a in &self.selected {
            let (cy, cx, s) = self.grid.position(a);
            let label = &self.labels[a];
            let fg = label.class == LabelClass::Foreground;
            let (ib, ifg) = (at(2 * s, cy, cx), at(2 * s + 1, cy, cx));
            let (l, gl) = softmax_ce([values[ib], values[ifg]], fg as usize, 1.0);
            cls.push(l);
            g[ib] += lc * gl[0];
            g[ifg] += lc * gl[1];
            if fg {
                let gt = &self.gts[label.matched_gt.expect("foreground has a match")];
                let target = encode_transform(&self.grid.anchors[a], &gt.bbox);
                let idx: [usize; 4] = std::array::from_fn(|k| at(2 * na + 4 * s + k, cy, cx));
                let pred = BoxTransform::from_array(idx.map(|i| values[i]));
                let (r, gr) = smooth_l1(&pred, &target);
                reg.push(r);
                for k in 0..4 {
                    g[idx[k]] += lr * gr[k];
                }
            }
        }

        let mut grads = HeadGrads::new();
        grads.add(PROPOSAL_HEAD, grad)?;
        let mut seg = 0.0;
        if let Some(mask) = &self.mask {
            let active = mask.active_cells();
            let (sum, sg) = seg_term(record, mask, self.weights.segmentation, active)?;
            seg = if active == 0 { 0.0 } else { sum / active as f64 };
            grads.add(SEGMENTATION_HEAD, sg)?;
        }
        Ok((rpn_joint_loss(&cls, &reg, seg, batch, self.weights), grads))
    }
}

impl Objective for RpnObjective<'_> {
    fn evaluate(&self, record: &Record) -> Result<(f64, HeadGrads)> {
        let (b, g) = self.breakdown(record)?;
        Ok((b.total, g))
    }
}

/// Classifier-stage loss contribution of one crop, normalized by the
/// image-level counts so that per-crop contributions sum to the joint loss.
#[derive(Debug, Clone)]
pub struct BcnObjective {
    pub label: usize,
    pub cost_weight: f64,
    pub mask: WeakMask,
    pub weights: LossWeights,
    /// Crops in the image's minibatch.
    pub crops: usize,
    /// Active mask cells summed over the minibatch.
    pub active_cells: usize,
}

impl BcnObjective {
    pub fn heads(&self) -> &'static [&'static str] {
        if self.weights.segmentation != 0.0 {
            &[CLASSIFIER_HEAD, SEGMENTATION_HEAD]
        } else {
            &[CLASSIFIER_HEAD]
        }
    }

    /// `(unweighted cross-entropy, weighted segmentation sum, gradients)`.
    pub fn parts(&self, record: &Record) -> Result<(f64, f64, HeadGrads)> {
        let out = head(record, CLASSIFIER_HEAD)?;
        let &[bg, fg] = out.data() else {
            return Err(Error::ShapeMismatch {
                context: "classifier output".into(),
                expected: vec![2],
                got: out.shape().to_vec(),
            });
        };
        let (ce, gl) = softmax_ce([bg, fg], self.label, 1.0);
        let s = self.weights.classification * self.cost_weight / self.crops.max(1) as f64;
        let mut grads = HeadGrads::new();
        grads.add(CLASSIFIER_HEAD, Tensor::from_vec(out.shape(), vec![s * gl[0], s * gl[1]])?)?;
        let mut seg_sum = 0.0;
        if self.weights.segmentation != 0.0 {
            let (sum, sg) = seg_term(record, &self.mask, self.weights.segmentation, self.active_cells)?;
            seg_sum = sum;
            grads.add(SEGMENTATION_HEAD, sg)?;
        }
        Ok((ce, seg_sum, grads))
    }
}

impl Objective for BcnObjective {
    fn evaluate(&self, record: &Record) -> Result<(f64, HeadGrads)> {
        let (ce, seg_sum, grads) = self.parts(record)?;
        let seg = if self.active_cells == 0 {
            0.0
        } else {
            seg_sum / self.active_cells as f64
        };
        let total = self.weights.classification * self.cost_weight * ce / self.crops.max(1) as f64
            + self.weights.segmentation * seg;
        Ok((total, grads))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    /// One entry per parameter update.
    pub history: Vec<LossBreakdown>,
    /// Mean training gt height used for cost-sensitive weights, when enabled.
    pub mean_height: Option<f64>,
}

fn load_annotations(data: &dyn Dataset, cfg: &PipelineConfig) -> Result<(Vec<Vec<Annotation>>, Option<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let annotations = (0..data.len()).map(|i| data.annotations(i)).collect::<Result<Vec<_>>>()?;
    let mean_height = if cfg.cost_sensitive {
        Some(mean_gt_height(annotations.iter().map(Vec::as_slice))?)
    } else {
        None
    };
    Ok((annotations, mean_height))
}

fn step(net: &mut Network, opt: &mut OptimState, b: &LossBreakdown, iteration: usize) -> Result<()> {
    if !b.total.is_finite() {
        return Err(Error::Diverged {
            iteration,
            detail: format!(
                "loss is {} (cls {}, reg {}, seg {})",
                b.total, b.classification, b.regression, b.segmentation
            ),
        });
    }
    sgd_step(net, opt).map_err(|e| Error::Diverged {
        iteration,
        detail: e.to_string(),
    })
}

pub fn train_rpn(data: &dyn Dataset, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    train_rpn_observed(data, cfg, &mut |_, _| {})
}

/// Proposal-network training, one image per update. `observer` sees every
/// iteration's loss.
pub fn train_rpn_observed(
    data: &dyn Dataset,
    cfg: &PipelineConfig,
    observer: &mut dyn FnMut(usize, &LossBreakdown),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (annotations, mean_height) = load_annotations(data, cfg)?;
    let mut net = build_rpn(&cfg.arch, cfg.num_anchors(), mix(cfg.seed, SALT_RPN_INIT, 0))?;
    let mut opt = OptimState::new(&net, cfg.learning_rate, cfg.momentum);
    let mut history = Vec::new();
    let mut grid: Option<AnchorGrid> = None;
    for epoch in 0..cfg.rpn_epochs {
        for i in epoch_order(data.len(), cfg.seed, epoch) {
            let iteration = history.len();
            let image = data.image(i)?;
            let (_, h, w) = image.chw()?;
            if grid.as_ref().is_none_or(|g| g.image_w != w || g.image_h != h) {
                grid = Some(cfg.anchor_grid(w, h)?);
            }
            let grid = grid.as_ref().expect("grid built above");
            let objective = RpnObjective::new(
                grid,
                &annotations[i],
                cfg,
                mean_height,
                mix(cfg.seed, SALT_SAMPLE, iteration as u64),
            );
            net.zero_grad();
            let record = net.forward_heads(&image, Some(objective.heads()))?;
            let (loss, grads) = objective.breakdown(&record)?;
            net.backward(&record, &grads)?;
            step(&mut net, &mut opt, &loss, iteration)?;
            observer(iteration, &loss);
            history.push(loss);
        }
    }
    Ok(TrainOutcome {
        net,
        history,
        mean_height,
    })
}

/// Top `n_b_train` proposals of the (fixed) proposal network per image.
pub fn bcn_training_proposals(data: &dyn Dataset, rpn: &Network, cfg: &PipelineConfig) -> Result<Vec<Vec<BBox>>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let proposals = rpn_infer(&data.image(i)?, rpn, cfg)?;
            Ok(proposals.iter().take(cfg.n_b_train).map(|p| p.bbox).collect())
        })
        .collect()
}

pub fn train_bcn(data: &dyn Dataset, rpn: &Network, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    train_bcn_observed(data, rpn, cfg, &mut |_, _| {})
}

/// Classifier-network training on the proposal network's top proposals.
/// The trunk starts from the proposal network's trunk; images whose
/// proposals are all ignored are skipped.
pub fn train_bcn_observed(
    data: &dyn Dataset,
    rpn: &Network,
    cfg: &PipelineConfig,
    observer: &mut dyn FnMut(usize, &LossBreakdown),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (annotations, mean_height) = load_annotations(data, cfg)?;
    let proposals = bcn_training_proposals(data, rpn, cfg)?;
    let mut net = build_bcn(&cfg.arch, mix(cfg.seed, SALT_BCN_INIT, 0))?;
    net.copy_trunk_from(rpn)?;
    let mut opt = OptimState::new(&net, cfg.learning_rate, cfg.momentum);
    let grid = cfg.arch.bcn_grid();
    let mut history = Vec::new();
    for epoch in 0..cfg.bcn_epochs {
        for i in epoch_order(data.len(), cfg.seed, epoch) {
            let gts = &annotations[i];
            let labels = label_proposals(&proposals[i], gts, &cfg.bcn_policy);
            let image = data.image(i)?;
            let (_, h, w) = image.chw()?;
            let mut items = Vec::new();
            for (p, label) in proposals[i].iter().zip(&labels) {
                if label.class == LabelClass::Ignored {
                    continue;
                }
                let Some(region) = pad_box(p, cfg.pad_fraction, w as f64, h as f64) else {
                    continue;
                };
                let crop = crop_warp(&image, p, cfg.pad_fraction, cfg.arch.bcn_input)?;
                let mask = proposal_mask(&region, gts, grid, mean_height);
                let weight = mean_height.map_or(1.0, |m| cost_weight(p.h, m));
                items.push((crop, mask, (label.class == LabelClass::Foreground) as usize, weight));
            }
            if items.is_empty() {
                continue;
            }
            let iteration = history.len();
            let crops = items.len();
            let active_cells = items.iter().map(|it| it.1.active_cells()).sum();
            let mut cls_terms = Vec::with_capacity(crops);
            let mut cost_weights = Vec::with_capacity(crops);
            let mut seg_sum = 0.0;
            net.zero_grad();
            for (crop, mask, label, weight) in items {
                let objective = BcnObjective {
                    label,
                    cost_weight: weight,
                    mask,
                    weights: cfg.bcn_weights,
                    crops,
                    active_cells,
                };
                let record = net.forward_heads(&crop, Some(objective.heads()))?;
                let (ce, seg, grads) = objective.parts(&record)?;
                net.backward(&record, &grads)?;
                cls_terms.push(ce);
                cost_weights.push(weight);
                seg_sum += seg;
            }
            let seg = if active_cells == 0 { 0.0 } else { seg_sum / active_cells as f64 };
            let loss = bcn_joint_loss(&cls_terms, &cost_weights, seg, cfg.bcn_weights);
            step(&mut net, &mut opt, &loss, iteration)?;
            observer(iteration, &loss);
            history.push(loss);
        }
    }
    Ok(TrainOutcome {
        net,
        history,
        mean_height,
    })
}

/// `iteration,total,classification,regression,segmentation` rows.
pub fn write_loss_csv(history: &[LossBreakdown], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,total,classification,regression,segmentation\n");
    for (i, b) in history.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{},{},{}", b.total, b.classification, b.regression, b.segmentation);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
