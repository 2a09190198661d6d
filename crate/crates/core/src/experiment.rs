//! Ablation matrix, stage-wise miss rates and feature-map illumination.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::{RunConfig, Toggle};
use crate::error::{Error, Result};
use crate::evaluation::{log_average_miss_rate, mr_fppi_curve, EvalFilter, ImageEval};
use crate::geometry::BBox;
use crate::pipeline::{detect_all, train_bcn, train_rpn, Dataset, Detection, InMemoryDataset, PipelineConfig};
use crate::supervision::{rasterize_weak_mask, Annotation, LabelPolicy};
use crate::synthdata::{generate_scene, SceneConfig};
use crate::tinynet::arch::FEATURE_LAYER;
use crate::tinynet::Network;

/// Toggles switched off one at a time by the ablation matrix.
pub const ABLATED: [Toggle; 4] = [
    Toggle::WeakSegmentation,
    Toggle::ProposalPadding,
    Toggle::CostSensitive,
    Toggle::StrictSupervision,
];

pub fn synth_dataset(scene: &SceneConfig, n_images: usize, split: &str) -> Result<InMemoryDataset> {
    scene.validate()?;
    let scenes = (0..n_images as u64)
        .into_par_iter()
        .map(|i| generate_scene(scene, split, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(InMemoryDataset { scenes })
}

#[derive(Debug, Clone)]
pub struct Models {
    pub rpn: Network,
    pub bcn: Network,
}

pub fn train_models(train: &dyn Dataset, cfg: &PipelineConfig) -> Result<Models> {
    let rpn = train_rpn(train, cfg)?.net;
    let bcn = train_bcn(train, &rpn, cfg)?.net;
    Ok(Models { rpn, bcn })
}

/// Log-average miss rate of each score column over the same detections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageScores {
    pub rpn: f64,
    pub bcn: f64,
    pub fused: f64,
}

impl StageScores {
    pub fn fusion_beats_both(&self) -> bool {
        self.fused <= self.rpn.min(self.bcn)
    }
}

fn column_lamr(
    detections: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    filter: &EvalFilter,
    match_iou: f64,
    score: impl Fn(&Detection) -> f64,
) -> Result<f64> {
    let images: Vec<ImageEval> = detections
        .iter()
        .zip(gts)
        .map(|(dets, g)| (dets.iter().map(|d| d.scored(score(d))).collect(), filter.apply(g)))
        .collect();
    Ok(log_average_miss_rate(&mr_fppi_curve(&images, match_iou)?))
}

pub fn score_columns(
    detections: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    filter: &EvalFilter,
    match_iou: f64,
) -> Result<StageScores> {
    let bcn = |d: &Detection| {
        d.bcn_score
            .expect("stage columns need classifier scores on every detection")
    };
    Ok(StageScores {
        rpn: column_lamr(detections, gts, filter, match_iou, |d| d.rpn_score)?,
        bcn: column_lamr(detections, gts, filter, match_iou, bcn)?,
        fused: column_lamr(detections, gts, filter, match_iou, |d| d.fused_score)?,
    })
}

pub fn evaluate_models(
    test: &dyn Dataset,
    models: &Models,
    cfg: &PipelineConfig,
    filter: &EvalFilter,
    match_iou: f64,
) -> Result<StageScores> {
    let dets = detect_all(test, &models.rpn, Some(&models.bcn), cfg)?;
    let gts = (0..test.len()).map(|i| test.annotations(i)).collect::<Result<Vec<_>>>()?;
    score_columns(&dets, &gts, filter, match_iou)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub scores: StageScores,
}

/// The settings the proposal stage depends on; classifier-only fields are
/// reset so rows differing only there share one trained proposal network.
fn rpn_key(cfg: &PipelineConfig) -> PipelineConfig {
    PipelineConfig {
        bcn_policy: LabelPolicy::bcn_strict(),
        bcn_weights: crate::losses::LossWeights::bcn_default(),
        pad_fraction: 0.0,
        n_b_train: 0,
        n_b_test: 0,
        bcn_epochs: 0,
        fusion: true,
        ..cfg.clone()
    }
}

/// Trains and evaluates the full configuration followed by one row per
/// [`ABLATED`] toggle switched off. `progress` is told each row's name
/// before it starts.
pub fn run_ablation(
    run: &RunConfig,
    train: &dyn Dataset,
    test: &dyn Dataset,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let mut rows_cfg = vec![("full".to_string(), run.clone())];
    for t in ABLATED {
        rows_cfg.push((format!("no_{}", t.key()), run.with_toggle(t, false)));
    }
    let filter = run.eval_filter();
    let mut rpn_cache: Vec<(PipelineConfig, Network)> = Vec::new();
    let mut rows = Vec::new();
    for (name, row) in rows_cfg {
        progress(&name);
        let cfg = row.pipeline_config();
        let key = rpn_key(&cfg);
        let rpn = match rpn_cache.iter().find(|(k, _)| *k == key) {
            Some((_, net)) => net.clone(),
            None => {
                let net = train_rpn(train, &cfg)?.net;
                rpn_cache.push((key, net.clone()));
                net
            }
        };
        let bcn = train_bcn(train, &rpn, &cfg)?.net;
        let scores = evaluate_models(test, &Models { rpn, bcn }, &cfg, &filter, run.match_iou)?;
        rows.push(AblationRow { name, scores });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<24} {:>8} {:>8} {:>8}\n", "row", "rpn", "bcn", "fused");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<24} {:>7.2}% {:>7.2}% {:>7.2}%",
            r.name,
            100.0 * r.scores.rpn,
            100.0 * r.scores.bcn,
            100.0 * r.scores.fused
        );
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("row,rpn,bcn,fused\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.name, r.scores.rpn, r.scores.bcn, r.scores.fused);
    }
    s
}

/// Per-image footprint statistics of the trunk's final feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Illumination {
    /// Pedestrians whose footprint mean exceeds the background mean.
    pub illuminated: usize,
    /// Pedestrians with a non-empty footprint and some background cells.
    pub counted: usize,
}

impl Illumination {
    pub fn fraction(&self) -> f64 {
        if self.counted == 0 {
            0.0
        } else {
            self.illuminated as f64 / self.counted as f64
        }
    }

    fn merge(self, o: Self) -> Self {
        Illumination {
            illuminated: self.illuminated + o.illuminated,
            counted: self.counted + o.counted,
        }
    }
}

/// Compares, for every non-ignore gt, the channel-max activation of
/// [`FEATURE_LAYER`] (the plane shown by feature dumps) averaged over the cells whose centers fall inside the gt with
/// the mean over cells outside every gt of the image.
pub fn illumination_in_image(net: &Network, image: &crate::tinynet::Tensor, gts: &[Annotation]) -> Result<Illumination> {
    let record = net.forward_heads(image, Some(&[]))?;
    let t = record
        .layer_output(FEATURE_LAYER)
        .ok_or_else(|| Error::UnknownLayer(FEATURE_LAYER.into()))?;
    let (c, h, w) = match *t.shape() {
        [c, h, w] => (c, h, w),
        ref other => {
            return Err(Error::ShapeMismatch {
                context: "illumination".into(),
                expected: vec![0, 0, 0],
                got: other.to_vec(),
            })
        }
    };
    let data = t.data();
    let plane: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|ch| data[ch * h * w + i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let stride = net.trunk_stride() as f64;
    let all: Vec<Annotation> = gts.iter().map(|g| g.with_ignore(false)).collect();
    let covered = rasterize_weak_mask(&all, w, h, stride, None);
    let outside: Vec<f64> = (0..h * w).filter(|&k| covered.values[k] == 0).map(|k| plane[k]).collect();
    if outside.is_empty() {
        return Ok(Illumination::default());
    }
    let background = outside.iter().sum::<f64>() / outside.len() as f64;
    let mut out = Illumination::default();
    for gt in gts.iter().filter(|g| !g.ignore) {
        let fp = rasterize_weak_mask(std::slice::from_ref(gt), w, h, stride, None);
        let inside: Vec<f64> = (0..h * w).filter(|&k| fp.values[k] == 1).map(|k| plane[k]).collect();
        if inside.is_empty() {
            continue;
        }
        out.counted += 1;
        if inside.iter().sum::<f64>() / inside.len() as f64 > background {
            out.illuminated += 1;
        }
    }
    Ok(out)
}

pub fn illumination(net: &Network, data: &dyn Dataset) -> Result<Illumination> {
    let parts = (0..data.len())
        .into_par_iter()
        .map(|i| illumination_in_image(net, &data.image(i)?, &data.annotations(i)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().fold(Illumination::default(), Illumination::merge))
}

/// Footprint of one box on a stride-`stride` grid as `(columns, rows)`.
pub fn footprint_extent(bbox: &BBox, feat_w: usize, feat_h: usize, stride: f64) -> (usize, usize) {
    let mask = rasterize_weak_mask(&[Annotation::unoccluded(*bbox)], feat_w, feat_h, stride, None);
    let cols = (0..feat_w).filter(|&c| (0..feat_h).any(|r| mask.value(r, c) == 1)).count();
    let rows = (0..feat_h).filter(|&r| (0..feat_w).any(|c| mask.value(r, c) == 1)).count();
    (cols, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::arch::{build_rpn, ArchConfig};
    use crate::tinynet::Tensor;

    fn det(x: f64, rpn: f64, bcn: f64, fused: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, 10.0, 60.0).unwrap(),
            fused_score: fused,
            rpn_score: rpn,
            bcn_score: Some(bcn),
            rpn_logits: [0.0, 0.0],
            bcn_logits: Some([0.0, 0.0]),
        }
    }

    #[test]
    fn columns_use_their_own_scores() {
        let gt = vec![vec![Annotation::unoccluded(BBox::new(0.0, 0.0, 10.0, 60.0).unwrap())]];
        // the true positive ranks last for rpn, first for bcn and fused
        let dets = vec![vec![det(0.0, 0.1, 0.9, 0.9), det(100.0, 0.5, 0.2, 0.2), det(200.0, 0.6, 0.3, 0.3)]];
        let s = score_columns(&dets, &gt, &EvalFilter::REASONABLE, 0.5).unwrap();
        assert_eq!(s.bcn, s.fused);
        assert!(s.rpn > s.bcn);
        assert!(s.fusion_beats_both());
    }

    #[test]
    fn footprint_of_height_80() {
        let mut seen = Vec::new();
        for phase in 0..16 {
            let b = BBox::new(100.0 + phase as f64, 100.0 + phase as f64, 0.41 * 80.0, 80.0).unwrap();
            let (c, r) = footprint_extent(&b, 40, 30, 16.0);
            assert!((2..=4).contains(&c) && (4..=6).contains(&r), "phase {phase}: {c}x{r}");
            seen.push((c, r));
        }
        assert!(seen.contains(&(2, 5)));
    }

    #[test]
    fn illumination_counts_only_visible_footprints() {
        let net = build_rpn(&ArchConfig::default(), 9, 3).unwrap();
        let image = Tensor::from_vec(&[1, 128, 128], (0..128 * 128).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let gts = vec![
            Annotation::unoccluded(BBox::new(10.0, 10.0, 40.0, 100.0).unwrap()),
            Annotation::unoccluded(BBox::new(74.0, 74.0, 4.0, 4.0).unwrap()),
            Annotation::unoccluded(BBox::new(90.0, 10.0, 20.0, 50.0).unwrap()).with_ignore(true),
        ];
        let ill = illumination_in_image(&net, &image, &gts).unwrap();
        assert_eq!(ill.counted, 1);
        assert!(ill.illuminated <= 1);
    }

    #[test]
    fn rpn_cache_key_ignores_classifier_settings() {
        let run = RunConfig::default();
        let full = run.pipeline_config();
        for t in [Toggle::ProposalPadding, Toggle::StrictSupervision] {
            assert_eq!(rpn_key(&run.with_toggle(t, false).pipeline_config()), rpn_key(&full));
        }
        for t in [Toggle::WeakSegmentation, Toggle::CostSensitive] {
            assert_ne!(rpn_key(&run.with_toggle(t, false).pipeline_config()), rpn_key(&full));
        }
    }

    #[test]
    fn table_shape() {
        let s = StageScores { rpn: 0.3, bcn: 0.25, fused: 0.2 };
        let rows: Vec<AblationRow> = (0..5).map(|i| AblationRow { name: format!("r{i}"), scores: s }).collect();
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().all(|l| l.split(',').count() == 4));
        assert_eq!(ablation_table(&rows).lines().count(), 6);
    }
}
