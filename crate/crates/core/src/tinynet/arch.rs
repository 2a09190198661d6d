//! Desk-scale architectures for the two stages.
//!
//! Both stages share the same five-block trunk (3x3 convs, pools after the
//! first four blocks, total stride 16). The proposal stage adds a 3x3
//! proposal feature layer and a 1x1 output holding `2 * anchors`
//! classification logits followed by `4 * anchors` box deltas; the
//! classifier stage feeds the 7x7 trunk output of a 112x112 crop straight
//! into two fully connected layers. Each stage has a 1x1 segmentation head
//! on the trunk output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerKind, LayerSpec};
use super::network::{HeadSpec, Network, NetworkSpec};
use crate::error::Result;

pub const PROPOSAL_HEAD: &str = "proposal";
pub const SEGMENTATION_HEAD: &str = "segmentation";
pub const CLASSIFIER_HEAD: &str = "classifier";
pub const FEATURE_LAYER: &str = "conv5_relu";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_channels: usize,
    pub trunk_channels: [usize; 5],
    pub proposal_channels: usize,
    pub fc_hidden: usize,
    pub bcn_input: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_channels: 1,
            trunk_channels: [8, 16, 32, 32, 32],
            proposal_channels: 32,
            fc_hidden: 64,
            bcn_input: 112,
        }
    }
}

impl ArchConfig {
    pub const STRIDE: usize = 16;

    pub fn feature_channels(&self) -> usize {
        self.trunk_channels[4]
    }

    /// Side of the classifier-stage feature map.
    pub fn bcn_grid(&self) -> usize {
        self.bcn_input / Self::STRIDE
    }
}

fn trunk(cfg: &ArchConfig) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut in_ch = cfg.input_channels;
    for (i, &out_ch) in cfg.trunk_channels.iter().enumerate() {
        let n = i + 1;
        layers.push(LayerSpec::new(format!("conv{n}"), LayerKind::conv3(in_ch, out_ch)));
        layers.push(LayerSpec::new(format!("conv{n}_relu"), LayerKind::Relu));
        if n < 5 {
            layers.push(LayerSpec::new(format!("pool{n}"), LayerKind::MaxPool { size: 2 }));
        }
        in_ch = out_ch;
    }
    layers
}

fn segmentation_head(cfg: &ArchConfig) -> HeadSpec {
    HeadSpec {
        name: SEGMENTATION_HEAD.into(),
        layers: vec![LayerSpec::new("seg", LayerKind::conv1(cfg.feature_channels(), 2))],
    }
}

pub fn rpn_spec(cfg: &ArchConfig, num_anchors: usize) -> NetworkSpec {
    let c = cfg.feature_channels();
    NetworkSpec {
        input_channels: cfg.input_channels,
        input_size: None,
        trunk: trunk(cfg),
        heads: vec![
            HeadSpec {
                name: PROPOSAL_HEAD.into(),
                layers: vec![
                    LayerSpec::new("prop_conv", LayerKind::conv3(c, cfg.proposal_channels)),
                    LayerSpec::new("prop_relu", LayerKind::Relu),
                    LayerSpec::new(
                        "prop_out",
                        LayerKind::conv1(cfg.proposal_channels, 6 * num_anchors),
                    ),
                ],
            },
            segmentation_head(cfg),
        ],
    }
}

pub fn bcn_spec(cfg: &ArchConfig) -> NetworkSpec {
    let g = cfg.bcn_grid();
    NetworkSpec {
        input_channels: cfg.input_channels,
        input_size: Some([cfg.bcn_input, cfg.bcn_input]),
        trunk: trunk(cfg),
        heads: vec![
            HeadSpec {
                name: CLASSIFIER_HEAD.into(),
                layers: vec![
                    LayerSpec::new(
                        "fc1",
                        LayerKind::Linear {
                            inputs: cfg.feature_channels() * g * g,
                            outputs: cfg.fc_hidden,
                        },
                    ),
                    LayerSpec::new("fc1_relu", LayerKind::Relu),
                    LayerSpec::new("fc2", LayerKind::Linear { inputs: cfg.fc_hidden, outputs: 2 }),
                ],
            },
            segmentation_head(cfg),
        ],
    }
}

/// Seeded fan-in-scaled uniform initialization of every layer.
///
/// Layers feeding a ReLU use gain `sqrt(2)`; output layers use a small gain
/// so initial scores sit near 0.5 and initial box deltas near zero.
pub fn init_network(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let output_layers = ["prop_out", "seg", "fc2"];
    for layer in net.layers_mut() {
        let gain = if output_layers.contains(&layer.name()) {
            0.1
        } else {
            std::f64::consts::SQRT_2
        };
        layer.init_uniform(gain, &mut rng);
    }
}

pub fn build_rpn(cfg: &ArchConfig, num_anchors: usize, seed: u64) -> Result<Network> {
    let mut net = Network::from_spec(&rpn_spec(cfg, num_anchors))?;
    init_network(&mut net, seed);
    Ok(net)
}

pub fn build_bcn(cfg: &ArchConfig, seed: u64) -> Result<Network> {
    let mut net = Network::from_spec(&bcn_spec(cfg))?;
    init_network(&mut net, seed);
    Ok(net)
}
