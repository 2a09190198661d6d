//! Flat `key = value` run configuration (TOML) with ablation toggles.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalFilter;
use crate::geometry::geometric_scales;
use crate::losses::LossWeights;
use crate::pipeline::PipelineConfig;
use crate::supervision::{LabelPolicy, PolicyName};
use crate::synthdata::SceneConfig;
use crate::tinynet::arch::ArchConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub image_w: usize,
    pub image_h: usize,
    pub min_pedestrians: usize,
    pub max_pedestrians: usize,
    pub min_height: f64,
    pub max_height: f64,
    pub occluder_prob: f64,
    pub distractors: usize,
    pub noise: f64,
    pub width_jitter: f64,
    pub train_images: usize,
    pub test_images: usize,

    pub num_anchors: usize,
    pub anchor_min: f64,
    pub anchor_max: f64,
    pub anchor_ratio: f64,

    pub trunk_channels: [usize; 5],
    pub proposal_channels: usize,
    pub fc_hidden: usize,
    pub bcn_input: usize,

    pub learning_rate: f64,
    pub momentum: f64,
    pub rpn_epochs: usize,
    pub bcn_epochs: usize,
    pub rpn_batch: usize,
    pub rpn_fg_fraction: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_s: f64,
    pub bcn_lambda_c: f64,
    pub bcn_lambda_s: f64,
    pub rpn_fg_iou: f64,
    pub bcn_fg_iou: f64,
    pub best_match_fallback: bool,

    pub nms_iou: f64,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub n_b_train: usize,
    pub n_b_test: usize,
    pub pad_fraction: f64,

    pub weak_segmentation: bool,
    pub proposal_padding: bool,
    pub cost_sensitive: bool,
    pub strict_supervision: bool,
    pub fusion: bool,

    pub eval_min_height: f64,
    pub eval_max_occlusion: f64,
    pub match_iou: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let arch = ArchConfig::default();
        let rpn = LossWeights::rpn_default();
        let bcn = LossWeights::bcn_default();
        RunConfig {
            seed: 7,
            image_w: scene.image_w,
            image_h: scene.image_h,
            min_pedestrians: scene.min_pedestrians,
            max_pedestrians: scene.max_pedestrians,
            min_height: scene.min_height,
            max_height: scene.max_height,
            occluder_prob: scene.occluder_prob,
            distractors: scene.distractors,
            noise: scene.noise,
            width_jitter: scene.width_jitter,
            train_images: 200,
            test_images: 100,
            num_anchors: 9,
            anchor_min: 25.0,
            anchor_max: 350.0,
            anchor_ratio: 0.41,
            trunk_channels: arch.trunk_channels,
            proposal_channels: arch.proposal_channels,
            fc_hidden: arch.fc_hidden,
            bcn_input: arch.bcn_input,
            learning_rate: 0.001,
            momentum: 0.9,
            rpn_epochs: 1,
            bcn_epochs: 1,
            rpn_batch: 120,
            rpn_fg_fraction: 1.0 / 6.0,
            lambda_c: rpn.classification,
            lambda_r: rpn.regression,
            lambda_s: rpn.segmentation,
            bcn_lambda_c: bcn.classification,
            bcn_lambda_s: bcn.segmentation,
            rpn_fg_iou: 0.5,
            bcn_fg_iou: 0.7,
            best_match_fallback: false,
            nms_iou: 0.5,
            pre_nms_top: 2000,
            post_nms_top: 300,
            n_b_train: 20,
            n_b_test: 15,
            pad_fraction: 0.2,
            weak_segmentation: true,
            proposal_padding: true,
            cost_sensitive: true,
            strict_supervision: true,
            fusion: true,
            eval_min_height: EvalFilter::REASONABLE.min_height,
            eval_max_occlusion: EvalFilter::REASONABLE.max_occlusion,
            match_iou: 0.5,
        }
    }
}

/// One mechanism that can be switched off for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Toggle {
    WeakSegmentation,
    ProposalPadding,
    CostSensitive,
    StrictSupervision,
    Fusion,
}

impl Toggle {
    pub const ALL: [Toggle; 5] = [
        Toggle::WeakSegmentation,
        Toggle::ProposalPadding,
        Toggle::CostSensitive,
        Toggle::StrictSupervision,
        Toggle::Fusion,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Toggle::WeakSegmentation => "weak_segmentation",
            Toggle::ProposalPadding => "proposal_padding",
            Toggle::CostSensitive => "cost_sensitive",
            Toggle::StrictSupervision => "strict_supervision",
            Toggle::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_anchors == 0 || !(0.0 < self.anchor_min && self.anchor_min <= self.anchor_max) {
            return Err(Error::Config("anchors need num_anchors >= 1 and 0 < anchor_min <= anchor_max".into()));
        }
        if !(0.0..=1.0).contains(&self.match_iou) || !(0.0..=1.0).contains(&self.eval_max_occlusion) {
            return Err(Error::Config("match_iou and eval_max_occlusion must lie in [0, 1]".into()));
        }
        self.scene_config().validate()?;
        self.pipeline_config().validate()
    }

    pub fn toggle(&self, t: Toggle) -> bool {
        match t {
            Toggle::WeakSegmentation => self.weak_segmentation,
            Toggle::ProposalPadding => self.proposal_padding,
            Toggle::CostSensitive => self.cost_sensitive,
            Toggle::StrictSupervision => self.strict_supervision,
            Toggle::Fusion => self.fusion,
        }
    }

    pub fn with_toggle(&self, t: Toggle, on: bool) -> Self {
        let mut c = self.clone();
        match t {
            Toggle::WeakSegmentation => c.weak_segmentation = on,
            Toggle::ProposalPadding => c.proposal_padding = on,
            Toggle::CostSensitive => c.cost_sensitive = on,
            Toggle::StrictSupervision => c.strict_supervision = on,
            Toggle::Fusion => c.fusion = on,
        }
        c
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            image_w: self.image_w,
            image_h: self.image_h,
            min_pedestrians: self.min_pedestrians,
            max_pedestrians: self.max_pedestrians,
            min_height: self.min_height,
            max_height: self.max_height,
            occluder_prob: self.occluder_prob,
            distractors: self.distractors,
            noise: self.noise,
            width_jitter: self.width_jitter,
            seed: self.seed,
        }
    }

    /// Pipeline settings with every disabled toggle applied:
    /// weak segmentation off sets both segmentation weights to 0, padding off
    /// sets the pad fraction to 0, cost-sensitivity off makes all weights 1,
    /// strict supervision off relabels the classifier stage with IoU >= the
    /// proposal threshold, and fusion off scores detections by the proposal
    /// stage alone.
    pub fn pipeline_config(&self) -> PipelineConfig {
        let seg = |lambda: f64| if self.weak_segmentation { lambda } else { 0.0 };
        let rpn_policy = LabelPolicy {
            fg_iou_min: self.rpn_fg_iou,
            best_match_fallback: self.best_match_fallback,
            ..LabelPolicy::rpn()
        };
        let bcn_policy = if self.strict_supervision {
            LabelPolicy {
                fg_iou_min: self.bcn_fg_iou,
                ..LabelPolicy::bcn_strict()
            }
        } else {
            LabelPolicy {
                name: PolicyName::BcnStrict,
                ..rpn_policy
            }
        };
        PipelineConfig {
            arch: ArchConfig {
                input_channels: 1,
                trunk_channels: self.trunk_channels,
                proposal_channels: self.proposal_channels,
                fc_hidden: self.fc_hidden,
                bcn_input: self.bcn_input,
            },
            anchor_scales: geometric_scales(self.anchor_min, self.anchor_max, self.num_anchors),
            anchor_ratio: self.anchor_ratio,
            nms_iou: self.nms_iou,
            pre_nms_top: self.pre_nms_top,
            post_nms_top: self.post_nms_top,
            n_b_train: self.n_b_train,
            n_b_test: self.n_b_test,
            pad_fraction: if self.proposal_padding { self.pad_fraction } else { 0.0 },
            rpn_batch: self.rpn_batch,
            rpn_fg_fraction: self.rpn_fg_fraction,
            rpn_policy,
            bcn_policy,
            rpn_weights: LossWeights {
                classification: self.lambda_c,
                regression: self.lambda_r,
                segmentation: seg(self.lambda_s),
            },
            bcn_weights: LossWeights {
                classification: self.bcn_lambda_c,
                regression: 0.0,
                segmentation: seg(self.bcn_lambda_s),
            },
            cost_sensitive: self.cost_sensitive,
            fusion: self.fusion,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            rpn_epochs: self.rpn_epochs,
            bcn_epochs: self.bcn_epochs,
            seed: self.seed,
        }
    }

    pub fn eval_filter(&self) -> EvalFilter {
        EvalFilter {
            min_height: self.eval_min_height,
            max_occlusion: self.eval_max_occlusion,
        }
    }
}
