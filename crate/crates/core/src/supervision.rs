//! Training targets: foreground/background labels, minibatch sampling,
//! weak box masks and cost-sensitive weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// IoU at which a proposal is considered to cover an ignore region.
pub const IGNORE_IOU: f64 = 0.5;

/// Ground-truth pedestrian with its visible part and occlusion attribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub visible: BBox,
    /// Fraction of `bbox` area hidden by occluders, in `[0, 1]`.
    pub occlusion: f64,
    pub ignore: bool,
}

impl Annotation {
    /// Validated constructor; checks containment and occlusion consistency.
    pub fn new(bbox: BBox, visible: BBox, occlusion: f64, ignore: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&occlusion) {
            return Err(Error::InvalidArgument(format!(
                "occlusion {occlusion} outside [0, 1]"
            )));
        }
        if !bbox.contains_box(&visible, 1e-6) {
            return Err(Error::InvalidArgument(
                "visible box extends beyond the full box".into(),
            ));
        }
        let implied = 1.0 - visible.area() / bbox.area();
        if (implied - occlusion).abs() > 0.01 {
            return Err(Error::InvalidArgument(format!(
                "occlusion {occlusion} inconsistent with visible area (implies {implied:.4})"
            )));
        }
        Ok(Annotation {
            bbox,
            visible,
            occlusion,
            ignore,
        })
    }

    /// Fully visible, non-ignored pedestrian.
    pub fn unoccluded(bbox: BBox) -> Self {
        Annotation {
            bbox,
            visible: bbox,
            occlusion: 0.0,
            ignore: false,
        }
    }

    pub fn with_ignore(mut self, ignore: bool) -> Self {
        self.ignore = ignore;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    Rpn,
    BcnStrict,
}

/// Foreground rule applied to proposals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelPolicy {
    pub name: PolicyName,
    pub fg_iou_min: f64,
    /// Foreground requires IoU strictly above `fg_iou_min` instead of at least.
    pub strict_inequality: bool,
    /// Additionally mark the best-overlapping proposal of every gt foreground.
    pub best_match_fallback: bool,
}

impl LabelPolicy {
    /// IoU >= 0.5.
    pub const fn rpn() -> Self {
        LabelPolicy {
            name: PolicyName::Rpn,
            fg_iou_min: 0.5,
            strict_inequality: false,
            best_match_fallback: false,
        }
    }

    /// IoU > 0.7.
    pub const fn bcn_strict() -> Self {
        LabelPolicy {
            name: PolicyName::BcnStrict,
            fg_iou_min: 0.7,
            strict_inequality: true,
            best_match_fallback: false,
        }
    }

    pub fn is_foreground(&self, overlap: f64) -> bool {
        if self.strict_inequality {
            overlap > self.fg_iou_min
        } else {
            overlap >= self.fg_iou_min
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelClass {
    Foreground,
    Background,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalLabel {
    pub class: LabelClass,
    /// Best non-ignore gt; always present for foreground.
    pub matched_gt: Option<usize>,
    pub iou: f64,
}

pub fn label_proposals(
    proposals: &[BBox],
    gts: &[Annotation],
    policy: &LabelPolicy,
) -> Vec<ProposalLabel> {
    let mut labels: Vec<ProposalLabel> = proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            let mut best_ignore = 0.0f64;
            for (g, gt) in gts.iter().enumerate() {
                let o = iou(p, &gt.bbox);
                if gt.ignore {
                    best_ignore = best_ignore.max(o);
                } else if o > 0.0 && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            let overlap = best.map_or(0.0, |(_, o)| o);
            let class = if best.is_some() && policy.is_foreground(overlap) {
                LabelClass::Foreground
            } else if best_ignore >= IGNORE_IOU {
                LabelClass::Ignored
            } else {
                LabelClass::Background
            };
            ProposalLabel {
                class,
                matched_gt: best.map(|(g, _)| g),
                iou: overlap,
            }
        })
        .collect();

    if policy.best_match_fallback {
        for (g, gt) in gts.iter().enumerate() {
            if gt.ignore {
                continue;
            }
            let best = proposals
                .iter()
                .enumerate()
                .map(|(i, p)| (i, iou(p, &gt.bbox)))
                .filter(|&(_, o)| o > 0.0)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((i, o)) = best {
                if labels[i].class != LabelClass::Foreground {
                    labels[i] = ProposalLabel {
                        class: LabelClass::Foreground,
                        matched_gt: Some(g),
                        iou: o,
                    };
                }
            }
        }
    }
    labels
}

/// Seeded foreground/background minibatch, sampled without replacement.
///
/// Foreground is capped at `round(total * fg_fraction)`; any shortfall is
/// made up with extra background. Returns foreground indices followed by
/// background indices, each ascending.
pub fn sample_minibatch(
    labels: &[ProposalLabel],
    total: usize,
    fg_fraction: f64,
    seed: u64,
) -> Vec<usize> {
    let by_class = |class| -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.class == class)
            .map(|(i, _)| i)
            .collect()
    };
    let fg = by_class(LabelClass::Foreground);
    let bg = by_class(LabelClass::Background);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg_target = ((total as f64 * fg_fraction).round() as usize).min(fg.len());
    let bg_target = total.saturating_sub(fg_target).min(bg.len());

    let mut pick = |pool: &[usize], n: usize| -> Vec<usize> {
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), n)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        chosen.sort_unstable();
        chosen
    };
    let mut selected = pick(&fg, fg_target);
    selected.extend(pick(&bg, bg_target));
    selected
}

/// Binary pedestrian/background grid with per-cell loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakMask {
    pub width: usize,
    pub height: usize,
    /// Row-major, 1 for pedestrian cells.
    pub values: Vec<u8>,
    /// Row-major loss weights; 0 marks cells excluded from the loss.
    pub weights: Vec<f64>,
}

impl WeakMask {
    pub fn empty(width: usize, height: usize) -> Self {
        WeakMask {
            width,
            height,
            values: vec![0; width * height],
            weights: vec![1.0; width * height],
        }
    }

    pub fn value(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn positive_cells(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Number of cells that contribute to the loss.
    pub fn active_cells(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    /// Replace every positive weight with 1 (cost-sensitive weighting off).
    pub fn uniform_weights(mut self) -> Self {
        for w in &mut self.weights {
            if *w > 0.0 {
                *w = 1.0;
            }
        }
        self
    }
}

/// Rasterize boxes onto a grid whose cell `(row, col)` is centered at
/// `center(row, col)` in image coordinates.
fn rasterize_cells(
    gts: &[Annotation],
    width: usize,
    height: usize,
    mean_height: Option<f64>,
    center: impl Fn(usize, usize) -> (f64, f64),
) -> WeakMask {
    let mut mask = WeakMask::empty(width, height);
    for row in 0..height {
        for col in 0..width {
            let (px, py) = center(row, col);
            let mut tallest: Option<f64> = None;
            let mut in_ignore = false;
            for gt in gts {
                if !gt.bbox.contains_point(px, py) {
                    continue;
                }
                if gt.ignore {
                    in_ignore = true;
                } else {
                    tallest = Some(tallest.map_or(gt.bbox.h, |t| t.max(gt.bbox.h)));
                }
            }
            let k = row * width + col;
            match tallest {
                Some(h) => {
                    mask.values[k] = 1;
                    mask.weights[k] = mean_height.map_or(1.0, |m| cost_weight(h, m));
                }
                None if in_ignore => mask.weights[k] = 0.0,
                None => {}
            }
        }
    }
    mask
}

/// Weak segmentation target at feature-map resolution.
///
/// A cell is positive when its center lies inside a non-ignore gt. Positive
/// cells weigh `1 + h / mean_height` of the tallest covering gt (or 1 when
/// `mean_height` is `None`); cells covered only by ignore gts weigh 0.
pub fn rasterize_weak_mask(
    gts: &[Annotation],
    feat_w: usize,
    feat_h: usize,
    stride: f64,
    mean_height: Option<f64>,
) -> WeakMask {
    rasterize_cells(gts, feat_w, feat_h, mean_height, |row, col| {
        ((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride)
    })
}

/// Weak mask of a (padded) proposal crop on a `grid x grid` lattice.
pub fn proposal_mask(
    proposal: &BBox,
    gts: &[Annotation],
    grid: usize,
    mean_height: Option<f64>,
) -> WeakMask {
    let (cw, ch) = (proposal.w / grid as f64, proposal.h / grid as f64);
    rasterize_cells(gts, grid, grid, mean_height, |row, col| {
        (
            proposal.x + (col as f64 + 0.5) * cw,
            proposal.y + (row as f64 + 0.5) * ch,
        )
    })
}

pub fn cost_weight(height: f64, mean_height: f64) -> f64 {
    1.0 + height / mean_height
}

/// Mean full-box height of all non-ignore gts.
pub fn mean_gt_height<'a, I>(images: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [Annotation]>,
{
    let (sum, n) = images
        .into_iter()
        .flatten()
        .filter(|a| !a.ignore)
        .fold((0.0, 0usize), |(s, n), a| (s + a.bbox.h, n + 1));
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn ann(x: f64, y: f64, w: f64, h: f64) -> Annotation {
        Annotation::unoccluded(bx(x, y, w, h))
    }

    #[test]
    fn annotation_validation() {
        let full = bx(0.0, 0.0, 10.0, 20.0);
        assert!(Annotation::new(full, bx(0.0, 0.0, 10.0, 10.0), 0.5, false).is_ok());
        assert!(Annotation::new(full, bx(0.0, 0.0, 10.0, 10.0), 0.2, false).is_err());
        assert!(Annotation::new(full, bx(0.0, 0.0, 10.0, 30.0), 0.0, false).is_err());
        assert!(Annotation::new(full, full, 1.5, false).is_err());
    }

    #[test]
    fn exact_proposal_is_foreground() {
        let gt = ann(10.0, 10.0, 20.0, 50.0);
        for policy in [LabelPolicy::rpn(), LabelPolicy::bcn_strict()] {
            let l = label_proposals(&[gt.bbox], &[gt], &policy);
            assert_eq!(l[0].class, LabelClass::Foreground);
            assert_eq!(l[0].iou, 1.0);
            assert_eq!(l[0].matched_gt, Some(0));
        }
    }

    #[test]
    fn iou_point_six_splits_policies() {
        // shift along x so that IoU = (10 - s) / (10 + s) = 0.6 -> s = 2.5
        let gt = ann(0.0, 0.0, 10.0, 10.0);
        let p = bx(2.5, 0.0, 10.0, 10.0);
        assert!((iou(&p, &gt.bbox) - 0.6).abs() < 1e-12);
        let rpn = label_proposals(&[p], &[gt], &LabelPolicy::rpn());
        let strict = label_proposals(&[p], &[gt], &LabelPolicy::bcn_strict());
        assert_eq!(rpn[0].class, LabelClass::Foreground);
        assert_eq!(strict[0].class, LabelClass::Background);
    }

    #[test]
    fn threshold_boundaries() {
        assert!(LabelPolicy::rpn().is_foreground(0.5));
        assert!(!LabelPolicy::bcn_strict().is_foreground(0.7));
        assert!(LabelPolicy::bcn_strict().is_foreground(0.7000001));
    }

    #[test]
    fn no_gts_all_background() {
        let l = label_proposals(&[bx(0.0, 0.0, 5.0, 5.0); 4], &[], &LabelPolicy::rpn());
        assert!(l.iter().all(|l| l.class == LabelClass::Background && l.matched_gt.is_none()));
    }

    #[test]
    fn ignore_gt_marks_proposal_ignored() {
        let ig = ann(0.0, 0.0, 10.0, 10.0).with_ignore(true);
        let l = label_proposals(&[bx(0.0, 0.0, 10.0, 10.0)], &[ig], &LabelPolicy::rpn());
        assert_eq!(l[0].class, LabelClass::Ignored);
    }

    #[test]
    fn best_match_fallback() {
        let gt = ann(0.0, 0.0, 10.0, 10.0);
        let p = [bx(6.0, 0.0, 10.0, 10.0), bx(30.0, 30.0, 5.0, 5.0)];
        let off = label_proposals(&p, &[gt], &LabelPolicy::rpn());
        assert_eq!(off[0].class, LabelClass::Background);
        let policy = LabelPolicy { best_match_fallback: true, ..LabelPolicy::rpn() };
        let on = label_proposals(&p, &[gt], &policy);
        assert_eq!(on[0].class, LabelClass::Foreground);
        assert_eq!(on[1].class, LabelClass::Background);
    }

    fn synthetic_labels(nfg: usize, nbg: usize) -> Vec<ProposalLabel> {
        let fg = ProposalLabel { class: LabelClass::Foreground, matched_gt: Some(0), iou: 0.8 };
        let bg = ProposalLabel { class: LabelClass::Background, matched_gt: None, iou: 0.0 };
        let mut v = vec![fg; nfg];
        v.extend(vec![bg; nbg]);
        v
    }

    fn count(labels: &[ProposalLabel], sel: &[usize], class: LabelClass) -> usize {
        sel.iter().filter(|&&i| labels[i].class == class).count()
    }

    #[test]
    fn minibatch_ratio() {
        let labels = synthetic_labels(200, 10_000);
        let sel = sample_minibatch(&labels, 120, 1.0 / 6.0, 7);
        assert_eq!(count(&labels, &sel, LabelClass::Foreground), 20);
        assert_eq!(count(&labels, &sel, LabelClass::Background), 100);
    }

    #[test]
    fn minibatch_shortfall_filled_with_background() {
        let labels = synthetic_labels(3, 10_000);
        let sel = sample_minibatch(&labels, 120, 1.0 / 6.0, 7);
        assert_eq!(count(&labels, &sel, LabelClass::Foreground), 3);
        assert_eq!(count(&labels, &sel, LabelClass::Background), 117);
    }

    #[test]
    fn minibatch_capped_by_availability() {
        let labels = synthetic_labels(0, 50);
        assert_eq!(sample_minibatch(&labels, 120, 1.0 / 6.0, 1).len(), 50);
        assert!(sample_minibatch(&[], 120, 1.0 / 6.0, 1).is_empty());
    }

    #[test]
    fn minibatch_deterministic() {
        let labels = synthetic_labels(50, 500);
        assert_eq!(
            sample_minibatch(&labels, 120, 1.0 / 6.0, 11),
            sample_minibatch(&labels, 120, 1.0 / 6.0, 11)
        );
        assert_ne!(
            sample_minibatch(&labels, 120, 1.0 / 6.0, 11),
            sample_minibatch(&labels, 120, 1.0 / 6.0, 12)
        );
    }

    #[test]
    fn mask_without_gts() {
        let m = rasterize_weak_mask(&[], 6, 4, 16.0, Some(50.0));
        assert_eq!(m.positive_cells(), 0);
        assert!(m.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn eighty_pixel_footprint() {
        // every sub-cell alignment phase of an 80 px tall, 0.41 ratio box
        for phase in 0..16 {
            let off = phase as f64;
            let gt = ann(40.0 + off, 40.0 + off, 0.41 * 80.0, 80.0);
            let m = rasterize_weak_mask(&[gt], 20, 15, 16.0, None);
            let rows = (0..m.height).filter(|&r| (0..m.width).any(|c| m.value(r, c) == 1)).count();
            let cols = (0..m.width).filter(|&c| (0..m.height).any(|r| m.value(r, c) == 1)).count();
            assert!((4..=6).contains(&rows), "phase {phase}: {rows} rows");
            assert!((2..=4).contains(&cols), "phase {phase}: {cols} cols");
        }
    }

    #[test]
    fn full_image_gt_saturates() {
        let m = rasterize_weak_mask(&[ann(0.0, 0.0, 320.0, 240.0)], 20, 15, 16.0, Some(100.0));
        assert_eq!(m.positive_cells(), 300);
        assert!(m.weights.iter().all(|&w| (w - 3.4).abs() < 1e-12));
    }

    #[test]
    fn mask_weights_follow_tallest_and_ignore() {
        let small = ann(0.0, 0.0, 32.0, 32.0);
        let tall = ann(16.0, 0.0, 32.0, 64.0);
        let ig = ann(96.0, 0.0, 32.0, 32.0).with_ignore(true);
        let m = rasterize_weak_mask(&[small, tall, ig], 8, 4, 16.0, Some(32.0));
        assert_eq!(m.weights[0], 2.0); // only `small`
        assert_eq!(m.weights[1], 3.0); // both; tallest wins
        assert_eq!(m.weights[6], 0.0); // ignore only
        assert_eq!(m.value(0, 6), 0);
        assert_eq!(m.weights[5], 1.0);
        assert_eq!(m.active_cells(), 32 - 4);
        let flat = m.uniform_weights();
        assert_eq!(flat.weights[1], 1.0);
        assert_eq!(flat.weights[6], 0.0);
    }

    #[test]
    fn proposal_mask_examples() {
        let far = ann(500.0, 500.0, 20.0, 50.0);
        assert_eq!(proposal_mask(&bx(0.0, 0.0, 30.0, 70.0), &[far], 7, None).positive_cells(), 0);

        let gt = ann(100.0, 100.0, 50.0, 100.0);
        let padded = crate::geometry::pad_box(&gt.bbox, 0.2, 1e4, 1e4).unwrap();
        let m = proposal_mask(&padded, &[gt], 7, None);
        for r in 0..7 {
            for c in 0..7 {
                let interior = (1..=5).contains(&r) && (1..=5).contains(&c);
                assert_eq!(m.value(r, c), interior as u8, "cell ({r},{c})");
            }
        }

        let one = proposal_mask(&bx(0.0, 0.0, 10.0, 10.0), &[ann(2.0, 2.0, 6.0, 6.0)], 1, None);
        assert_eq!(one.values, vec![1]);
    }

    #[test]
    fn cost_weight_examples() {
        assert_eq!(cost_weight(50.0, 50.0), 2.0);
        assert_eq!(cost_weight(0.0, 50.0), 1.0);
        assert_eq!(cost_weight(100.0, 50.0), 3.0);
    }

    #[test]
    fn mean_height_examples() {
        let one = [ann(0.0, 0.0, 10.0, 60.0)];
        assert_eq!(mean_gt_height([&one[..]]).unwrap(), 60.0);
        let a = [ann(0.0, 0.0, 10.0, 40.0)];
        let b = [ann(0.0, 0.0, 10.0, 80.0), ann(0.0, 0.0, 10.0, 500.0).with_ignore(true)];
        assert_eq!(mean_gt_height([&a[..], &b[..]]).unwrap(), 60.0);
        assert!(matches!(mean_gt_height([&[][..]]), Err(Error::EmptyDataset)));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..200.0f64, 0.0..200.0f64, 4.0..80.0f64, 4.0..120.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn labeling_monotone_in_threshold(
            props in proptest::collection::vec(arb_box(), 1..30),
            gts in proptest::collection::vec(arb_box(), 0..5),
            lo in 0.05..0.9f64, delta in 0.0..0.5f64,
        ) {
            let gts: Vec<Annotation> = gts.into_iter().map(Annotation::unoccluded).collect();
            let low = LabelPolicy { fg_iou_min: lo, ..LabelPolicy::rpn() };
            let high = LabelPolicy { fg_iou_min: (lo + delta).min(0.99), ..LabelPolicy::rpn() };
            let a = label_proposals(&props, &gts, &low);
            let b = label_proposals(&props, &gts, &high);
            for (la, lb) in a.iter().zip(&b) {
                if la.class == LabelClass::Background {
                    prop_assert_ne!(lb.class, LabelClass::Foreground);
                }
            }
            let strict = label_proposals(&props, &gts, &LabelPolicy::bcn_strict());
            let rpn = label_proposals(&props, &gts, &LabelPolicy::rpn());
            for (s, r) in strict.iter().zip(&rpn) {
                if s.class == LabelClass::Foreground {
                    prop_assert_eq!(r.class, LabelClass::Foreground);
                }
            }
        }

        #[test]
        fn minibatch_unique_and_capped(nfg in 0usize..200, nbg in 0usize..400, total in 1usize..200, seed: u64) {
            let labels = synthetic_labels(nfg, nbg);
            let sel = sample_minibatch(&labels, total, 1.0 / 6.0, seed);
            let mut dedup = sel.clone();
            dedup.sort_unstable();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), sel.len());
            prop_assert!(count(&labels, &sel, LabelClass::Foreground) <= (total as f64 / 6.0).round() as usize);
            prop_assert!(sel.len() <= total);
        }

        #[test]
        fn footprint_bound(gts in proptest::collection::vec(arb_box(), 0..6)) {
            let gts: Vec<Annotation> = gts.into_iter().map(Annotation::unoccluded).collect();
            let m = rasterize_weak_mask(&gts, 20, 20, 16.0, Some(60.0));
            let bound: usize = gts.iter()
                .map(|g| ((g.bbox.w / 16.0).ceil() * (g.bbox.h / 16.0).ceil()) as usize)
                .sum();
            prop_assert!(m.positive_cells() <= bound);
            prop_assert!(m.weights.iter().all(|&w| w >= 1.0));
        }

        #[test]
        fn cost_weight_increasing(a in 0.0..500.0f64, d in 1e-6..100.0f64, m in 1.0..200.0f64) {
            prop_assert!(cost_weight(a + d, m) > cost_weight(a, m));
        }
    }
}
