//! Minimal CPU network engine: dense `f64` tensors, conv/pool/relu/linear
//! layers with exact reverse-mode gradients, momentum SGD, binary
//! checkpoints, finite-difference checks and feature-map dumps.

pub mod arch;
pub mod checkpoint;
mod featmap;
pub mod gradcheck;
mod layers;
mod network;
mod optim;
mod tensor;

pub use featmap::{dump_feature_map, feature_projection};
pub use layers::{Cache, Layer, LayerKind, LayerSpec};
pub use network::{Head, HeadGrads, HeadSpec, Network, NetworkSpec, Record, Trace};
pub use optim::{sgd_step, OptimState};
pub use tensor::Tensor;
