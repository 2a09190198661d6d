//! Greedy matching, miss-rate/FPPI curves with log-average summary,
//! the reasonable-setting filter and 11-point average precision.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{iou, ScoredBox};
use crate::supervision::Annotation;

pub const MATCH_IOU: f64 = 0.5;
pub const LAMR_EPSILON: f64 = 1e-10;
pub const LAMR_SAMPLES: usize = 9;

/// Gts outside the filter are evaluated as ignore regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalFilter {
    pub min_height: f64,
    /// Exclusive upper bound on occlusion.
    pub max_occlusion: f64,
}

impl EvalFilter {
    pub const REASONABLE: EvalFilter = EvalFilter {
        min_height: 50.0,
        max_occlusion: 0.35,
    };

    pub fn accepts(&self, gt: &Annotation) -> bool {
        !gt.ignore && gt.bbox.h >= self.min_height && gt.occlusion < self.max_occlusion
    }

    /// Copy of `gts` with every rejected gt flagged as ignore.
    pub fn apply(&self, gts: &[Annotation]) -> Vec<Annotation> {
        gts.iter().map(|g| g.with_ignore(!self.accepts(g))).collect()
    }
}

impl Default for EvalFilter {
    fn default() -> Self {
        EvalFilter::REASONABLE
    }
}

/// Split into `(evaluated, ignored)`; ignored gts carry `ignore = true`.
pub fn reasonable_filter(gts: &[Annotation]) -> (Vec<Annotation>, Vec<Annotation>) {
    let (evaluated, ignored): (Vec<_>, Vec<_>) = EvalFilter::REASONABLE
        .apply(gts)
        .into_iter()
        .partition(|g| !g.ignore);
    (evaluated, ignored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetOutcome {
    TruePositive(usize),
    FalsePositive,
    /// Matched an ignore gt; counts as neither TP nor FP.
    Ignored(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Aligned with the input detections.
    pub detections: Vec<DetOutcome>,
    /// Aligned with the input gts; `None` for ignore gts.
    pub gt_detected: Vec<Option<bool>>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.detections.iter().filter(|o| matches!(o, DetOutcome::TruePositive(_))).count()
    }

    pub fn false_positives(&self) -> usize {
        self.detections.iter().filter(|o| **o == DetOutcome::FalsePositive).count()
    }

    pub fn misses(&self) -> usize {
        self.gt_detected.iter().filter(|d| **d == Some(false)).count()
    }
}

/// Indices sorted by descending score, ties by ascending index.
fn score_order(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching in descending score order. Each detection takes the
/// highest-IoU unmatched evaluated gt with IoU >= `iou_min` (ties to the lower
/// gt index); failing that it is absorbed by any ignore gt with IoU >= `iou_min`.
pub fn match_detections(dets: &[ScoredBox], gts: &[Annotation], iou_min: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut outcomes = vec![DetOutcome::FalsePositive; dets.len()];
    for d in score_order(dets) {
        let b = &dets[d].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.ignore || taken[g] {
                continue;
            }
            let o = iou(b, &gt.bbox);
            if o >= iou_min && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        outcomes[d] = match best {
            Some((g, _)) => {
                taken[g] = true;
                DetOutcome::TruePositive(g)
            }
            None => gts
                .iter()
                .position(|gt| gt.ignore && iou(b, &gt.bbox) >= iou_min)
                .map_or(DetOutcome::FalsePositive, DetOutcome::Ignored),
        };
    }
    MatchResult {
        detections: outcomes,
        gt_detected: gts
            .iter()
            .zip(&taken)
            .map(|(gt, &t)| (!gt.ignore).then_some(t))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    pub points: Vec<(f64, f64)>,
    /// Score threshold of each point.
    pub sweep: Vec<f64>,
}

/// One image's detections and (already filtered) gts.
pub type ImageEval = (Vec<ScoredBox>, Vec<Annotation>);

/// Scored outcomes pooled over all images, with ignored detections
/// dropped, in descending score order; plus the evaluated gt count.
fn pooled_outcomes(images: &[ImageEval], iou_min: f64) -> Result<(Vec<(f64, bool)>, usize)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one image".into()));
    }
    let mut pooled = Vec::new();
    let mut total_gts = 0;
    for (dets, gts) in images {
        let m = match_detections(dets, gts, iou_min);
        total_gts += m.gt_detected.iter().filter(|d| d.is_some()).count();
        for (det, outcome) in dets.iter().zip(&m.detections) {
            match outcome {
                DetOutcome::TruePositive(_) => pooled.push((det.score, true)),
                DetOutcome::FalsePositive => pooled.push((det.score, false)),
                DetOutcome::Ignored(_) => {}
            }
        }
    }
    if total_gts == 0 {
        return Err(Error::NoEvaluatedGroundTruth);
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok((pooled, total_gts))
}

/// Miss rate against false positives per image, one point per distinct
/// detection score (descending). With no detections the curve is the single
/// point `(0, 1)`.
pub fn mr_fppi_curve(images: &[ImageEval], iou_min: f64) -> Result<EvalCurve> {
    let (pooled, total_gts) = pooled_outcomes(images, iou_min)?;
    let n_images = images.len() as f64;
    let mut curve = EvalCurve {
        points: Vec::new(),
        sweep: Vec::new(),
    };
    if pooled.is_empty() {
        curve.points.push((0.0, 1.0));
        curve.sweep.push(f64::INFINITY);
        return Ok(curve);
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(score, is_tp)) in pooled.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if pooled.get(k + 1).is_none_or(|next| next.0 != score) {
            curve.points.push((fp as f64 / n_images, (total_gts - tp) as f64 / total_gts as f64));
            curve.sweep.push(score);
        }
    }
    Ok(curve)
}

/// The nine reference FPPI values `10^(-2 + k/4)`.
pub fn lamr_reference_points() -> [f64; LAMR_SAMPLES] {
    std::array::from_fn(|k| 10f64.powf(-2.0 + k as f64 / 4.0))
}

/// `(reference FPPI, sampled miss rate)` for the nine reference points.
pub fn lamr_samples(curve: &EvalCurve) -> Vec<(f64, f64)> {
    let first = curve.points.first().map_or(1.0, |p| p.1);
    lamr_reference_points()
        .into_iter()
        .map(|r| {
            let mr = curve
                .points
                .iter()
                .rev()
                .find(|p| p.0 <= r)
                .map_or(first, |p| p.1);
            (r, mr)
        })
        .collect()
}

/// Geometric mean of the sampled miss rates, each floored at 1e-10.
pub fn log_average_miss_rate(curve: &EvalCurve) -> f64 {
    let samples = lamr_samples(curve);
    let mut log_sum = 0.0;
    for &(_, mr) in &samples {
        log_sum += mr.max(LAMR_EPSILON).ln();
    }
    (log_sum / samples.len() as f64).exp()
}

/// Precision against recall, one point per detection in score order.
pub fn precision_recall_curve(images: &[ImageEval], iou_min: f64) -> Result<EvalCurve> {
    let (pooled, total_gts) = pooled_outcomes(images, iou_min)?;
    let mut curve = EvalCurve {
        points: Vec::with_capacity(pooled.len()),
        sweep: Vec::with_capacity(pooled.len()),
    };
    let mut tp = 0usize;
    for (k, &(score, is_tp)) in pooled.iter().enumerate() {
        tp += is_tp as usize;
        curve.points.push((tp as f64 / total_gts as f64, tp as f64 / (k + 1) as f64));
        curve.sweep.push(score);
    }
    Ok(curve)
}

/// 11-point interpolated AP.
pub fn average_precision(images: &[ImageEval], iou_min: f64) -> Result<f64> {
    let pr = precision_recall_curve(images, iou_min)?;
    let mut sum = 0.0;
    for k in 0..=10 {
        let r = k as f64 / 10.0;
        sum += pr
            .points
            .iter()
            .filter(|p| p.0 >= r - 1e-12)
            .map(|p| p.1)
            .fold(0.0, f64::max);
    }
    Ok(sum / 11.0)
}

/// The 11 `(recall, interpolated precision)` samples behind [`average_precision`].
pub fn ap_samples(curve: &EvalCurve) -> Vec<(f64, f64)> {
    (0..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            let p = curve.points.iter().filter(|p| p.0 >= r - 1e-12).map(|p| p.1).fold(0.0, f64::max);
            (r, p)
        })
        .collect()
}

/// `x,y` header, one point per line, then summary samples as `# x,y` lines.
pub fn curve_csv(curve: &EvalCurve, summary: &[(f64, f64)]) -> String {
    let mut out = String::from("x,y\n");
    for (x, y) in &curve.points {
        let _ = writeln!(out, "{x},{y}");
    }
    for (x, y) in summary {
        let _ = writeln!(out, "# {x},{y}");
    }
    out
}

pub fn write_curve_csv(curve: &EvalCurve, summary: &[(f64, f64)], path: &Path) -> Result<()> {
    fs::write(path, curve_csv(curve, summary)).map_err(|e| Error::io(path, e))
}
