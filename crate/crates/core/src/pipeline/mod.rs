//! The two-stage detector: proposal network, crop-pad-warp, box classifier
//! network and score fusion.

mod dataset;
mod train;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    decode_clipped, foreground_probability, generate_anchor_grid, geometric_scales, nms, pad_box,
    AnchorGrid, BBox, BoxTransform, ScoredBox,
};
use crate::losses::LossWeights;
use crate::supervision::{LabelPolicy, PolicyName};
use crate::tinynet::arch::{ArchConfig, CLASSIFIER_HEAD, PROPOSAL_HEAD};
use crate::tinynet::{Network, Tensor};

pub use dataset::{Dataset, InMemoryDataset};
pub use train::{
    bcn_training_proposals, train_bcn, train_bcn_observed, train_rpn, train_rpn_observed,
    write_loss_csv, BcnObjective, RpnObjective, TrainOutcome,
};

/// Largest log-scale box delta accepted at decode time.
pub const MAX_LOG_DELTA: f64 = 4.135166556742356; // ln(1000 / 16)

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub arch: ArchConfig,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratio: f64,
    pub nms_iou: f64,
    /// Candidates kept before NMS.
    pub pre_nms_top: usize,
    /// Proposals kept after NMS.
    pub post_nms_top: usize,
    pub n_b_train: usize,
    pub n_b_test: usize,
    pub pad_fraction: f64,
    pub rpn_batch: usize,
    pub rpn_fg_fraction: f64,
    pub rpn_policy: LabelPolicy,
    pub bcn_policy: LabelPolicy,
    pub rpn_weights: LossWeights,
    pub bcn_weights: LossWeights,
    pub cost_sensitive: bool,
    pub fusion: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    pub rpn_epochs: usize,
    pub bcn_epochs: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            arch: ArchConfig::default(),
            anchor_scales: geometric_scales(25.0, 350.0, 9),
            anchor_ratio: 0.41,
            nms_iou: 0.5,
            pre_nms_top: 2000,
            post_nms_top: 300,
            n_b_train: 20,
            n_b_test: 15,
            pad_fraction: 0.2,
            rpn_batch: 120,
            rpn_fg_fraction: 1.0 / 6.0,
            rpn_policy: LabelPolicy::rpn(),
            bcn_policy: LabelPolicy::bcn_strict(),
            rpn_weights: LossWeights::rpn_default(),
            bcn_weights: LossWeights::bcn_default(),
            cost_sensitive: true,
            fusion: true,
            learning_rate: 0.001,
            momentum: 0.9,
            rpn_epochs: 1,
            bcn_epochs: 1,
            seed: 7,
        }
    }
}

impl PipelineConfig {
    pub fn num_anchors(&self) -> usize {
        self.anchor_scales.len()
    }

    pub fn stride(&self) -> usize {
        ArchConfig::STRIDE
    }

    pub fn anchor_grid(&self, image_w: usize, image_h: usize) -> Result<AnchorGrid> {
        generate_anchor_grid(image_w, image_h, self.stride(), &self.anchor_scales, self.anchor_ratio)
    }

    /// Classifier-stage foreground rule with IoU >= 0.5 in place of > 0.7.
    pub fn relaxed_bcn_policy() -> LabelPolicy {
        LabelPolicy {
            name: PolicyName::BcnStrict,
            ..LabelPolicy::rpn()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.anchor_scales.is_empty() || self.anchor_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("anchor scales must be positive");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("nms_iou must lie in [0, 1]");
        }
        if !(self.pad_fraction >= 0.0 && self.pad_fraction.is_finite()) {
            return bad("pad_fraction must be nonnegative");
        }
        if self.rpn_batch == 0 || !(0.0..=1.0).contains(&self.rpn_fg_fraction) {
            return bad("rpn_batch must be positive and rpn_fg_fraction in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be positive and momentum in [0, 1)");
        }
        if self.arch.bcn_input % ArchConfig::STRIDE != 0 || self.arch.bcn_input == 0 {
            return bad("bcn_input must be a positive multiple of 16");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// `(background, foreground)`.
    pub rpn_logits: [f64; 2],
    /// Position after NMS, starting at 0.
    pub rank: usize,
}

impl Proposal {
    pub fn score(&self) -> f64 {
        foreground_probability(self.rpn_logits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub fused_score: f64,
    pub rpn_score: f64,
    pub bcn_score: Option<f64>,
    pub rpn_logits: [f64; 2],
    pub bcn_logits: Option<[f64; 2]>,
}

impl Detection {
    pub fn scored(&self, score: f64) -> ScoredBox {
        ScoredBox::new(self.bbox, score)
    }
}

/// Softmax over the element-wise sum of the two stages' logit pairs.
pub fn fuse_scores(rpn_logits: [f64; 2], bcn_logits: [f64; 2]) -> f64 {
    foreground_probability([rpn_logits[0] + bcn_logits[0], rpn_logits[1] + bcn_logits[1]])
}

fn image_size(image: &Tensor) -> Result<(usize, usize)> {
    let (_, h, w) = image.chw()?;
    Ok((w, h))
}

/// Every anchor decoded and clipped, sorted by descending foreground score
/// (ties by anchor index) and truncated to `pre_nms_top`.
pub fn rpn_candidates(image: &Tensor, net: &Network, cfg: &PipelineConfig) -> Result<Vec<ScoredBox>> {
    let (w, h) = image_size(image)?;
    let grid = cfg.anchor_grid(w, h)?;
    let rec = net.forward_heads(image, Some(&[PROPOSAL_HEAD]))?;
    let out = rec
        .head_output(PROPOSAL_HEAD)
        .ok_or_else(|| Error::UnknownLayer(PROPOSAL_HEAD.into()))?;
    let na = grid.num_scales();
    let (c, fh, fw) = out.chw()?;
    if c != 6 * na || fh != grid.rows || fw != grid.cols {
        return Err(Error::ShapeMismatch {
            context: "proposal head output vs anchor grid".into(),
            expected: vec![6 * na, grid.rows, grid.cols],
            got: out.shape().to_vec(),
        });
    }
    let mut candidates = Vec::with_capacity(grid.len());
    for (a, anchor) in grid.anchors.iter().enumerate() {
        let (cy, cx, s) = grid.position(a);
        let logits = [out.at3(2 * s, cy, cx), out.at3(2 * s + 1, cy, cx)];
        let d = |k| out.at3(2 * na + 4 * s + k, cy, cx);
        let t = BoxTransform {
            tx: d(0),
            ty: d(1),
            tw: d(2).min(MAX_LOG_DELTA),
            th: d(3).min(MAX_LOG_DELTA),
        };
        if let Some(b) = decode_clipped(anchor, &t, w as f64, h as f64) {
            candidates.push(ScoredBox::from_logits(b, logits));
        }
    }
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    candidates.truncate(cfg.pre_nms_top);
    Ok(candidates)
}

/// Proposals after greedy NMS at `nms_iou`, best first.
pub fn rpn_infer(image: &Tensor, net: &Network, cfg: &PipelineConfig) -> Result<Vec<Proposal>> {
    let candidates = rpn_candidates(image, net, cfg)?;
    Ok(nms(&candidates, cfg.nms_iou)
        .into_iter()
        .take(cfg.post_nms_top)
        .enumerate()
        .map(|(rank, i)| Proposal {
            bbox: candidates[i].bbox,
            rpn_logits: candidates[i].logits.expect("candidates carry logits"),
            rank,
        })
        .collect())
}

/// Pad `bbox`, crop it from `image` and resize bilinearly to
/// `out_size x out_size`. Output pixel centers map back to evenly spaced
/// points of the padded box; samples are clamped to the image.
pub fn crop_warp(image: &Tensor, bbox: &BBox, pad_fraction: f64, out_size: usize) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    let region = pad_box(bbox, pad_fraction, w as f64, h as f64).ok_or_else(|| {
        Error::InvalidArgument(format!("box {bbox:?} does not intersect the {w}x{h} image"))
    })?;
    if out_size == 0 {
        return Err(Error::InvalidArgument("crop size must be positive".into()));
    }
    let axis = |start: f64, extent: f64, limit: usize| -> Vec<(usize, usize, f64)> {
        (0..out_size)
            .map(|o| {
                let s = (start + (o as f64 + 0.5) * extent / out_size as f64 - 0.5).clamp(0.0, (limit - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(limit - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = axis(region.x, region.w, w);
    let ys = axis(region.y, region.h, h);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_size * out_size);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::from_vec(&[c, out_size, out_size], out)
}

/// Classifier logits for each proposal, in order.
pub fn bcn_infer(image: &Tensor, proposals: &[Proposal], net: &Network, cfg: &PipelineConfig) -> Result<Vec<[f64; 2]>> {
    proposals
        .iter()
        .map(|p| {
            let crop = crop_warp(image, &p.bbox, cfg.pad_fraction, cfg.arch.bcn_input)?;
            classifier_logits(net, &crop)
        })
        .collect()
}

pub(crate) fn classifier_logits(net: &Network, crop: &Tensor) -> Result<[f64; 2]> {
    let rec = net.forward_heads(crop, Some(&[CLASSIFIER_HEAD]))?;
    let out = rec
        .head_output(CLASSIFIER_HEAD)
        .ok_or_else(|| Error::UnknownLayer(CLASSIFIER_HEAD.into()))?;
    match out.data() {
        &[bg, fg] => Ok([bg, fg]),
        _ => Err(Error::ShapeMismatch {
            context: "classifier output".into(),
            expected: vec![2],
            got: out.shape().to_vec(),
        }),
    }
}

/// Top `n_b_test` proposals rescored by the classifier (when present) and
/// sorted by fused score. Without a classifier, or with fusion disabled, the
/// fused score is the proposal score.
pub fn detect(image: &Tensor, rpn: &Network, bcn: Option<&Network>, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    let mut proposals = rpn_infer(image, rpn, cfg)?;
    proposals.truncate(cfg.n_b_test);
    let bcn_logits: Vec<Option<[f64; 2]>> = match bcn {
        Some(net) => bcn_infer(image, &proposals, net, cfg)?.into_iter().map(Some).collect(),
        None => vec![None; proposals.len()],
    };
    let mut dets: Vec<Detection> = proposals
        .iter()
        .zip(bcn_logits)
        .map(|(p, bl)| {
            let rpn_score = p.score();
            Detection {
                bbox: p.bbox,
                fused_score: match bl {
                    Some(b) if cfg.fusion => fuse_scores(p.rpn_logits, b),
                    _ => rpn_score,
                },
                rpn_score,
                bcn_score: bl.map(foreground_probability),
                rpn_logits: p.rpn_logits,
                bcn_logits: bl,
            }
        })
        .collect();
    dets.sort_by(|a, b| b.fused_score.total_cmp(&a.fused_score));
    Ok(dets)
}

/// [`detect`] over a whole dataset, fanned out across the rayon pool.
/// Results are in dataset order regardless of worker count.
pub fn detect_all(data: &dyn Dataset, rpn: &Network, bcn: Option<&Network>, cfg: &PipelineConfig) -> Result<Vec<Vec<Detection>>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| detect(&data.image(i)?, rpn, bcn, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::tinynet::arch::build_rpn;

    #[test]
    fn fusion_values() {
        assert_eq!(fuse_scores([0.0, 0.0], [0.0, 0.0]), 0.5);
        let e4 = 4f64.exp();
        assert!((fuse_scores([0.0, 2.0], [0.0, 2.0]) - e4 / (e4 + 1.0)).abs() < 1e-15);
        let r = [0.3, -1.2];
        assert_eq!(fuse_scores(r, [0.7, 0.7]), foreground_probability(r));
    }

    #[test]
    fn fusion_monotone_and_agreeing() {
        let mut prev = 0.0;
        for k in 0..50 {
            let f = fuse_scores([0.2, -3.0 + 0.15 * k as f64], [0.1, 0.4]);
            assert!(f > prev);
            prev = f;
        }
        for (r, b) in [([0.0, 1.0], [0.5, 0.6]), ([2.0, 1.0], [0.0, -0.1])] {
            let (sr, sb, f) = (foreground_probability(r), foreground_probability(b), fuse_scores(r, b));
            assert_eq!(sr > 0.5, f > 0.5);
            assert_eq!(sb > 0.5, f > 0.5);
        }
    }

    fn ramp(w: usize, h: usize) -> Tensor {
        let data = (0..w * h).map(|i| (i % w) as f64 * 0.5 + (i / w) as f64 * 0.25).collect();
        Tensor::from_vec(&[1, h, w], data).unwrap()
    }

    #[test]
    fn crop_identity() {
        let img = ramp(37, 23);
        let full = BBox::new(0.0, 0.0, 37.0, 23.0).unwrap();
        let sq = ramp(23, 23);
        let b = BBox::new(0.0, 0.0, 23.0, 23.0).unwrap();
        assert_eq!(crop_warp(&sq, &b, 0.0, 23).unwrap(), sq);
        assert!(crop_warp(&img, &full, 0.0, 16).is_ok());
        let outside = BBox::new(100.0, 100.0, 5.0, 5.0).unwrap();
        assert!(crop_warp(&img, &outside, 0.2, 16).is_err());
    }

    #[test]
    fn crop_upscale_by_two() {
        let img = ramp(100, 100);
        let b = BBox::new(20.0, 30.0, 56.0, 56.0).unwrap();
        let out = crop_warp(&img, &b, 0.0, 112).unwrap();
        // output pixel o samples source coordinate 20 + (o + 0.5) / 2 - 0.5,
        // which lies inside source pixel 20 + o / 2
        for o in 0..112 {
            let s = 20.0 + (o as f64 + 0.5) / 2.0;
            assert_eq!(s.floor() as usize, 20 + o / 2);
        }
        // bilinear is exact on a linear ramp away from the clamped border
        for oy in 1..111 {
            for ox in 1..111 {
                let sx = 20.0 + (ox as f64 + 0.5) / 2.0 - 0.5;
                let sy = 30.0 + (oy as f64 + 0.5) / 2.0 - 0.5;
                let v = out.at3(0, oy, ox);
                assert!((v - (0.5 * sx + 0.25 * sy)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crop_constant() {
        let img = Tensor::full(&[1, 40, 60], 0.37);
        let b = BBox::new(3.5, 7.25, 20.3, 11.1).unwrap();
        let out = crop_warp(&img, &b, 0.2, 112).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn nms_subset_and_determinism() {
        let cfg = PipelineConfig::default();
        let net = build_rpn(&cfg.arch, cfg.num_anchors(), 3).unwrap();
        let img = ramp(96, 64);
        let raw = rpn_candidates(&img, &net, &cfg).unwrap();
        let kept = rpn_infer(&img, &net, &cfg).unwrap();
        assert!(!kept.is_empty() && kept.len() <= raw.len());
        for p in &kept {
            assert!(raw.iter().any(|r| r.bbox == p.bbox));
        }
        for (i, a) in kept.iter().enumerate() {
            assert_eq!(a.rank, i);
            for b in &kept[i + 1..] {
                assert!(iou(&a.bbox, &b.bbox) <= 0.5);
            }
        }
        assert_eq!(kept, rpn_infer(&img, &net, &cfg).unwrap());
    }

    #[test]
    fn detect_without_classifier_uses_rpn_scores() {
        let cfg = PipelineConfig::default();
        let net = build_rpn(&cfg.arch, cfg.num_anchors(), 3).unwrap();
        let img = ramp(96, 64);
        let dets = detect(&img, &net, None, &cfg).unwrap();
        assert!(dets.len() <= cfg.n_b_test);
        for d in &dets {
            assert_eq!(d.fused_score, d.rpn_score);
            assert!(d.bcn_score.is_none());
        }
        for w in dets.windows(2) {
            assert!(w[0].fused_score >= w[1].fused_score);
        }
    }
}
