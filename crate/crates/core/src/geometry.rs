//! Box arithmetic shared by every stage: overlap, anchors, regression
//! transforms, greedy suppression and context padding.
//!
//! Boxes are `(x, y, w, h)` with `(x, y)` the top-left corner in continuous
//! pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) || w <= 0.0 || h <= 0.0
        {
            return Err(Error::InvalidBox { x, y, w, h });
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BBox::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Half-open containment: left/top edges inclusive, right/bottom exclusive.
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    /// `true` when `other` lies inside `self`, allowing `tol` pixels of slack.
    pub fn contains_box(&self, other: &BBox, tol: f64) -> bool {
        other.x >= self.x - tol
            && other.y >= self.y - tol
            && other.right() <= self.right() + tol
            && other.bottom() <= self.bottom() + tol
    }

    /// Intersection with `[0, image_w] x [0, image_h]`; `None` when empty.
    pub fn clip(&self, image_w: f64, image_h: f64) -> Option<BBox> {
        let x1 = self.x.max(0.0);
        let y1 = self.y.max(0.0);
        let x2 = self.right().min(image_w);
        let y2 = self.bottom().min(image_h);
        BBox::from_corners(x1, y1, x2, y2).ok()
    }
}

/// Intersection over union. Zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Normalized center shift and log-scale factors relating an anchor to a target.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxTransform {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxTransform {
    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BoxTransform {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

pub fn encode_transform(anchor: &BBox, target: &BBox) -> BoxTransform {
    let (ax, ay) = anchor.center();
    let (gx, gy) = target.center();
    BoxTransform {
        tx: (gx - ax) / anchor.w,
        ty: (gy - ay) / anchor.h,
        tw: (target.w / anchor.w).ln(),
        th: (target.h / anchor.h).ln(),
    }
}

/// Inverse of [`encode_transform`].
pub fn decode_transform(anchor: &BBox, t: &BoxTransform) -> Result<BBox> {
    if !t.is_finite() {
        return Err(Error::NonFinite("box transform".into()));
    }
    let (ax, ay) = anchor.center();
    let cx = ax + t.tx * anchor.w;
    let cy = ay + t.ty * anchor.h;
    let w = anchor.w * t.tw.exp();
    let h = anchor.h * t.th.exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
}

/// Decode and clip to the image. `None` when the decoded box falls outside.
pub fn decode_clipped(anchor: &BBox, t: &BoxTransform, image_w: f64, image_h: f64) -> Option<BBox> {
    decode_transform(anchor, t).ok()?.clip(image_w, image_h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    /// `(background, foreground)` logits the score was derived from, if any.
    pub logits: Option<[f64; 2]>,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Self {
        ScoredBox {
            bbox,
            score,
            logits: None,
        }
    }

    pub fn from_logits(bbox: BBox, logits: [f64; 2]) -> Self {
        ScoredBox {
            bbox,
            score: foreground_probability(logits),
            logits: Some(logits),
        }
    }
}

/// Foreground probability of a `(background, foreground)` logit pair.
pub fn foreground_probability(logits: [f64; 2]) -> f64 {
    // softmax of two classes is the logistic of the difference
    let d = logits[1] - logits[0];
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Anchor boxes tiled over the feature grid, one per (cell, scale).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub image_w: usize,
    pub image_h: usize,
    pub stride: usize,
    pub scales: Vec<f64>,
    pub aspect_ratio: f64,
    pub cols: usize,
    pub rows: usize,
    /// Indexed by `(cell_y * cols + cell_x) * scales.len() + scale`.
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn index(&self, cell_y: usize, cell_x: usize, scale: usize) -> usize {
        (cell_y * self.cols + cell_x) * self.scales.len() + scale
    }

    /// Inverse of [`AnchorGrid::index`]: `(cell_y, cell_x, scale)`.
    pub fn position(&self, index: usize) -> (usize, usize, usize) {
        let n = self.scales.len();
        let cell = index / n;
        (cell / self.cols, cell % self.cols, index % n)
    }
}

/// `count` heights in geometric progression from `min` to `max` inclusive.
pub fn geometric_scales(min: f64, max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![min],
        _ => {
            let ratio = max / min;
            let last = (count - 1) as f64;
            (0..count)
                .map(|k| {
                    if k == count - 1 {
                        max
                    } else {
                        min * ratio.powf(k as f64 / last)
                    }
                })
                .collect()
        }
    }
}

pub fn generate_anchor_grid(
    image_w: usize,
    image_h: usize,
    stride: usize,
    scales: &[f64],
    aspect_ratio: f64,
) -> Result<AnchorGrid> {
    if stride == 0 || image_w < stride || image_h < stride {
        return Err(Error::InvalidArgument(format!(
            "image {image_w}x{image_h} is smaller than one {stride}-pixel cell"
        )));
    }
    if scales.is_empty() {
        return Err(Error::InvalidArgument("anchor scales must be nonempty".into()));
    }
    if scales.windows(2).any(|p| p[1] <= p[0]) || scales[0] <= 0.0 {
        return Err(Error::InvalidArgument(
            "anchor scales must be positive and strictly increasing".into(),
        ));
    }
    if !(aspect_ratio > 0.0 && aspect_ratio.is_finite()) {
        return Err(Error::InvalidArgument("aspect ratio must be positive".into()));
    }
    let cols = image_w / stride;
    let rows = image_h / stride;
    let s = stride as f64;
    let mut anchors = Vec::with_capacity(cols * rows * scales.len());
    for cy in 0..rows {
        for cx in 0..cols {
            let (ccx, ccy) = ((cx as f64 + 0.5) * s, (cy as f64 + 0.5) * s);
            for &height in scales {
                let width = aspect_ratio * height;
                anchors.push(BBox::new(ccx - 0.5 * width, ccy - 0.5 * height, width, height)?);
            }
        }
    }
    Ok(AnchorGrid {
        image_w,
        image_h,
        stride,
        scales: scales.to_vec(),
        aspect_ratio,
        cols,
        rows,
        anchors,
    })
}

/// Greedy non-maximum suppression.
///
/// Returns kept indices in descending score order; equal scores keep
/// ascending input order. A box is suppressed when its IoU with an already
/// kept box is strictly greater than `iou_threshold`.
pub fn nms(candidates: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // stable sort: ties stay in index order
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score));

    let mut suppressed = vec![false; candidates.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let kept = &candidates[i].bbox;
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(kept, &candidates[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Grow each side by `fraction` of the matching dimension, then clip.
pub fn pad_box(b: &BBox, fraction: f64, image_w: f64, image_h: f64) -> Option<BBox> {
    let dx = fraction * b.w;
    let dy = fraction * b.h;
    BBox {
        x: b.x - dx,
        y: b.y - dy,
        w: b.w + 2.0 * dx,
        h: b.h + 2.0 * dy,
    }
    .clip(image_w, image_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    /// Counts unit pixels covered by integer-aligned boxes.
    fn pixel_iou(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> f64 {
        let x0 = a.0.min(b.0);
        let y0 = a.1.min(b.1);
        let x1 = (a.0 + a.2).max(b.0 + b.2);
        let y1 = (a.1 + a.3).max(b.1 + b.3);
        let inside = |r: (i64, i64, i64, i64), px: i64, py: i64| {
            px >= r.0 && px < r.0 + r.2 && py >= r.1 && py < r.1 + r.3
        };
        let (mut inter, mut union) = (0u64, 0u64);
        for py in y0..y1 {
            for px in x0..x1 {
                let (ia, ib) = (inside(a, px, py), inside(b, px, py));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(100.0, 100.0, 5.0, 5.0)), 0.0);
        let oracle = pixel_iou((0, 0, 10, 10), (5, 0, 10, 10));
        assert!((oracle - 1.0 / 3.0).abs() < 1e-15);
        assert!((iou(&a, &bx(5.0, 0.0, 10.0, 10.0)) - oracle).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn default_anchor_grid() {
        let scales = geometric_scales(25.0, 350.0, 9);
        assert_eq!(scales[0], 25.0);
        assert_eq!(scales[8], 350.0);
        for (k, s) in scales.iter().enumerate() {
            let expect = 25.0 * (350.0f64 / 25.0).powf(k as f64 / 8.0);
            assert!((s - expect).abs() < 1e-9);
        }
        let grid = generate_anchor_grid(960, 720, 16, &scales, 0.41).unwrap();
        assert_eq!(grid.len(), 60 * 45 * 9);
        assert_eq!(grid.len(), 24_300);
        for a in &grid.anchors {
            assert!((a.w - 0.41 * a.h).abs() < 1e-9);
        }
    }

    #[test]
    fn single_cell_grid() {
        let grid = generate_anchor_grid(16, 16, 16, &[20.0], 0.41).unwrap();
        assert_eq!(grid.len(), 1);
        let (cx, cy) = grid.anchors[0].center();
        assert!((cx - 8.0).abs() < 1e-12 && (cy - 8.0).abs() < 1e-12);
    }

    #[test]
    fn anchor_grid_errors() {
        assert!(generate_anchor_grid(8, 32, 16, &[20.0], 0.41).is_err());
        assert!(generate_anchor_grid(32, 32, 16, &[], 0.41).is_err());
        assert!(generate_anchor_grid(32, 32, 16, &[30.0, 20.0], 0.41).is_err());
    }

    #[test]
    fn anchor_index_roundtrip() {
        let grid = generate_anchor_grid(80, 48, 16, &[10.0, 20.0, 30.0], 0.41).unwrap();
        for i in 0..grid.len() {
            let (y, x, s) = grid.position(i);
            assert_eq!(grid.index(y, x, s), i);
            let (cx, cy) = grid.anchors[i].center();
            assert!((cx - (x as f64 + 0.5) * 16.0).abs() < 1e-9);
            assert!((cy - (y as f64 + 0.5) * 16.0).abs() < 1e-9);
            assert!((grid.anchors[i].h - grid.scales[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn anchors_are_not_clipped() {
        let grid = generate_anchor_grid(32, 32, 16, &[100.0], 0.41).unwrap();
        assert!(grid.anchors.iter().all(|a| a.y < 0.0));
    }

    #[test]
    fn encode_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_transform(&a, &a), BoxTransform::default());
        let t = encode_transform(&a, &bx(5.0, 0.0, 10.0, 10.0));
        assert_eq!(t, BoxTransform { tx: 0.5, ty: 0.0, tw: 0.0, th: 0.0 });
        let t = encode_transform(&a, &bx(0.0, 0.0, 20.0, 10.0));
        assert!((t.tw - 2f64.ln()).abs() < 1e-15);
        assert!((t.tx - 0.5).abs() < 1e-15);
        assert_eq!(t.th, 0.0);
    }

    #[test]
    fn decode_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(decode_transform(&a, &BoxTransform::default()).unwrap(), a);
        let t = BoxTransform { tw: 2f64.ln(), ..Default::default() };
        let b = decode_transform(&a, &t).unwrap();
        assert!((b.w - 20.0).abs() < 1e-12);
        let bad = BoxTransform { tx: f64::NAN, ..Default::default() };
        assert!(decode_transform(&a, &bad).is_err());
        let clipped = decode_clipped(&a, &BoxTransform { tw: 3.0, th: 3.0, ..Default::default() }, 50.0, 50.0)
            .unwrap();
        assert!(clipped.x >= 0.0 && clipped.y >= 0.0 && clipped.right() <= 50.0);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[ScoredBox::new(a, 0.3)], 0.5), vec![0]);
        let two = [ScoredBox::new(a, 0.8), ScoredBox::new(a, 0.9)];
        assert_eq!(nms(&two, 0.5), vec![1]);
        // equal scores: lower index wins
        let tied = [ScoredBox::new(a, 0.5), ScoredBox::new(a, 0.5)];
        assert_eq!(nms(&tied, 0.5), vec![0]);
    }

    #[test]
    fn pad_examples() {
        let b = bx(100.0, 100.0, 50.0, 100.0);
        assert_eq!(pad_box(&b, 0.0, 1000.0, 1000.0).unwrap(), b);
        let p = pad_box(&b, 0.2, 1000.0, 1000.0).unwrap();
        for (got, want) in [(p.x, 90.0), (p.y, 80.0), (p.w, 70.0), (p.h, 140.0)] {
            assert!((got - want).abs() < 1e-9, "{p:?}");
        }
        let corner = pad_box(&bx(0.0, 0.0, 20.0, 40.0), 0.2, 100.0, 100.0).unwrap();
        assert_eq!((corner.x, corner.y), (0.0, 0.0));
        assert!((corner.w - 24.0).abs() < 1e-12 && (corner.h - 48.0).abs() < 1e-12);
    }

    #[test]
    fn foreground_probability_stable() {
        assert_eq!(foreground_probability([0.0, 0.0]), 0.5);
        assert!(foreground_probability([0.0, 800.0]) == 1.0);
        assert!(foreground_probability([800.0, 0.0]) == 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..150.0f64, -50.0..150.0f64, 0.5..120.0f64, 0.5..120.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_bounded_and_symmetric(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn encode_decode_roundtrip(a in arb_box(), b in arb_box()) {
            let back = decode_transform(&a, &encode_transform(&a, &b)).unwrap();
            for (got, want) in [(back.x, b.x), (back.y, b.y), (back.w, b.w), (back.h, b.h)] {
                prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
        }

        #[test]
        fn nms_idempotent(boxes in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..60)) {
            let cands: Vec<ScoredBox> = boxes.iter().map(|&(b, s)| ScoredBox::new(b, s)).collect();
            let kept = nms(&cands, 0.5);
            let survivors: Vec<ScoredBox> = kept.iter().map(|&i| cands[i]).collect();
            prop_assert_eq!(nms(&survivors, 0.5), (0..survivors.len()).collect::<Vec<_>>());
        }

        #[test]
        fn anchor_count_formula(w in 16usize..400, h in 16usize..400, stride in prop::sample::select(vec![4usize, 8, 16])) {
            let grid = generate_anchor_grid(w, h, stride, &geometric_scales(25.0, 350.0, 9), 0.41).unwrap();
            prop_assert_eq!(grid.len(), 9 * (w / stride) * (h / stride));
        }
    }
}
