use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::layers::{Cache, Layer, LayerKind, LayerSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

/// Architecture without parameters; the checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    /// Required `(height, width)` for nets with fully connected heads.
    pub input_size: Option<[usize; 2]>,
    pub trunk: Vec<LayerSpec>,
    pub heads: Vec<HeadSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub name: String,
    pub layers: Vec<Layer>,
}

/// Shared trunk plus named heads that all read the trunk output.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_channels: usize,
    pub input_size: Option<[usize; 2]>,
    pub trunk: Vec<Layer>,
    pub heads: Vec<Head>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub name: String,
    pub output: Tensor,
    cache: Cache,
}

/// Everything the forward pass produced, kept for backward and inspection.
#[derive(Debug, Clone)]
pub struct Record {
    pub input: Tensor,
    pub trunk: Vec<Trace>,
    pub heads: Vec<(String, Vec<Trace>)>,
}

impl Record {
    /// Trunk output (the shared feature map).
    pub fn features(&self) -> &Tensor {
        self.trunk.last().map_or(&self.input, |t| &t.output)
    }

    pub fn head_output(&self, head: &str) -> Option<&Tensor> {
        self.heads
            .iter()
            .find(|(n, _)| n == head)
            .and_then(|(_, traces)| traces.last().map(|t| &t.output))
    }

    fn head_traces(&self, head: &str) -> Option<&[Trace]> {
        self.heads.iter().find(|(n, _)| n == head).map(|(_, t)| t.as_slice())
    }

    /// Output of any trunk or head layer by name.
    pub fn layer_output(&self, layer: &str) -> Option<&Tensor> {
        self.trunk
            .iter()
            .chain(self.heads.iter().flat_map(|(_, t)| t.iter()))
            .find(|t| t.name == layer)
            .map(|t| &t.output)
    }
}

/// Gradients of a loss with respect to head outputs.
#[derive(Debug, Clone, Default)]
pub struct HeadGrads(Vec<(String, Tensor)>);

impl HeadGrads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `grad` to any gradient already registered for `head`.
    pub fn add(&mut self, head: &str, grad: Tensor) -> Result<()> {
        match self.0.iter_mut().find(|(n, _)| n == head) {
            Some((_, g)) => g.add_assign(&grad),
            None => {
                self.0.push((head.to_string(), grad));
                Ok(())
            }
        }
    }

    pub fn get(&self, head: &str) -> Option<&Tensor> {
        self.0.iter().find(|(n, _)| n == head).map(|(_, g)| g)
    }

    pub fn remove(&mut self, head: &str) -> Option<Tensor> {
        let pos = self.0.iter().position(|(n, _)| n == head)?;
        Some(self.0.remove(pos).1)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn run_layers(layers: &[Layer], mut x: Tensor) -> Result<(Tensor, Vec<Trace>)> {
    let mut traces = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, cache) = layer.forward(&x)?;
        traces.push(Trace {
            name: layer.name().to_string(),
            output: y.clone(),
            cache,
        });
        x = y;
    }
    Ok((x, traces))
}

fn backprop_layers(
    layers: &mut [Layer],
    input: &Tensor,
    traces: &[Trace],
    mut grad: Tensor,
) -> Result<Tensor> {
    for i in (0..layers.len()).rev() {
        let x = if i == 0 { input } else { &traces[i - 1].output };
        grad = layers[i].backward(x, &traces[i].output, &traces[i].cache, &grad)?;
    }
    Ok(grad)
}

impl Network {
    pub fn from_spec(spec: &NetworkSpec) -> Result<Self> {
        let mut seen = HashSet::new();
        let names = spec
            .trunk
            .iter()
            .chain(spec.heads.iter().flat_map(|h| h.layers.iter()))
            .map(|l| l.name.as_str());
        for name in names {
            if !seen.insert(name) {
                return Err(Error::InvalidArgument(format!("duplicate layer name `{name}`")));
            }
        }
        let mut head_names = HashSet::new();
        for h in &spec.heads {
            if !head_names.insert(h.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate head `{}`", h.name)));
            }
        }
        Ok(Network {
            input_channels: spec.input_channels,
            input_size: spec.input_size,
            trunk: spec.trunk.iter().cloned().map(Layer::new).collect(),
            heads: spec
                .heads
                .iter()
                .map(|h| Head {
                    name: h.name.clone(),
                    layers: h.layers.iter().cloned().map(Layer::new).collect(),
                })
                .collect(),
        })
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_channels: self.input_channels,
            input_size: self.input_size,
            trunk: self.trunk.iter().map(|l| l.spec.clone()).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| HeadSpec {
                    name: h.name.clone(),
                    layers: h.layers.iter().map(|l| l.spec.clone()).collect(),
                })
                .collect(),
        }
    }

    pub fn head(&self, name: &str) -> Option<&Head> {
        self.heads.iter().find(|h| h.name == name)
    }

    pub fn has_head(&self, name: &str) -> bool {
        self.head(name).is_some()
    }

    /// Remove a head, returning it; used to build detector-only baselines.
    pub fn detach_head(&mut self, name: &str) -> Option<Head> {
        let pos = self.heads.iter().position(|h| h.name == name)?;
        Some(self.heads.remove(pos))
    }

    /// Product of pooling sizes and conv strides along the trunk.
    pub fn trunk_stride(&self) -> usize {
        self.trunk
            .iter()
            .map(|l| match l.spec.kind {
                LayerKind::MaxPool { size } => size,
                LayerKind::Conv { stride, .. } => stride,
                _ => 1,
            })
            .product()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let (c, h, w) = input.chw()?;
        let ok = c == self.input_channels && self.input_size.is_none_or(|[eh, ew]| eh == h && ew == w);
        if !ok {
            let [eh, ew] = self.input_size.unwrap_or([h, w]);
            return Err(Error::ShapeMismatch {
                context: "network input".into(),
                expected: vec![self.input_channels, eh, ew],
                got: input.shape().to_vec(),
            });
        }
        if !input.is_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// Forward through the trunk and every head.
    pub fn forward(&self, input: &Tensor) -> Result<Record> {
        self.forward_heads(input, None)
    }

    /// Forward through the trunk and the selected heads (all when `None`).
    pub fn forward_heads(&self, input: &Tensor, heads: Option<&[&str]>) -> Result<Record> {
        self.check_input(input)?;
        let (features, trunk) = run_layers(&self.trunk, input.clone())?;
        let mut head_traces = Vec::new();
        for head in &self.heads {
            if heads.is_some_and(|sel| !sel.contains(&head.name.as_str())) {
                continue;
            }
            let (_, traces) = run_layers(&head.layers, features.clone())?;
            head_traces.push((head.name.clone(), traces));
        }
        Ok(Record {
            input: input.clone(),
            trunk,
            heads: head_traces,
        })
    }

    /// Reverse-mode pass. Parameter gradients accumulate into each layer's
    /// gradient buffers; gradients from several heads sum at the trunk output.
    /// Returns the gradient with respect to the network input.
    pub fn backward(&mut self, record: &Record, head_grads: &HeadGrads) -> Result<Tensor> {
        if record.trunk.len() != self.trunk.len()
            || record
                .trunk
                .iter()
                .zip(&self.trunk)
                .any(|(t, l)| t.name != l.name())
        {
            return Err(Error::InvalidArgument(
                "record was not produced by this network".into(),
            ));
        }
        let features = record.features().clone();
        let mut grad_features = Tensor::zeros(features.shape());
        for (name, grad) in &head_grads.0 {
            let head = self
                .heads
                .iter_mut()
                .find(|h| &h.name == name)
                .ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            let traces = record
                .heads
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("record holds no forward pass for head `{name}`"))
                })?;
            if traces.len() != head.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "record for head `{name}` does not match the network"
                )));
            }
            let g = backprop_layers(&mut head.layers, &features, traces, grad.clone())?;
            grad_features.add_assign(&g)?;
        }
        backprop_layers(&mut self.trunk, &record.input, &record.trunk, grad_features)
    }

    /// True when both records took the same branch at every ReLU and
    /// max-pool, i.e. the network is the same smooth map on both inputs.
    pub fn same_branches(&self, a: &Record, b: &Record) -> bool {
        let pairs = |ra: &[Trace], rb: &[Trace], layers: &[Layer]| {
            ra.len() == rb.len()
                && layers.iter().zip(ra.iter().zip(rb)).all(|(l, (x, y))| match l.spec.kind {
                    LayerKind::Relu => x
                        .output
                        .data()
                        .iter()
                        .zip(y.output.data())
                        .all(|(p, q)| (*p > 0.0) == (*q > 0.0)),
                    LayerKind::MaxPool { .. } => match (&x.cache, &y.cache) {
                        (Cache::Argmax(i), Cache::Argmax(j)) => i == j,
                        _ => false,
                    },
                    _ => true,
                })
        };
        pairs(&a.trunk, &b.trunk, &self.trunk)
            && self.heads.iter().all(|h| {
                match (a.head_traces(&h.name), b.head_traces(&h.name)) {
                    (Some(x), Some(y)) => pairs(x, y, &h.layers),
                    (None, None) => true,
                    _ => false,
                }
            })
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk
            .iter()
            .chain(self.heads.iter().flat_map(|h| h.layers.iter()))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.trunk
            .iter_mut()
            .chain(self.heads.iter_mut().flat_map(|h| h.layers.iter_mut()))
    }

    pub fn zero_grad(&mut self) {
        self.layers_mut().for_each(Layer::zero_grad);
    }

    /// `(block name, value, gradient)` for every parameter tensor, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor, &Tensor)> {
        let mut out = Vec::new();
        for l in self.layers().filter(|l| l.has_params()) {
            out.push((format!("{}.weight", l.name()), &l.weight, &l.grad_weight));
            out.push((format!("{}.bias", l.name()), &l.bias, &l.grad_bias));
        }
        out
    }

    /// Mutable `(value, gradient)` pairs in the same order as [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        let mut out = Vec::new();
        for l in self.layers_mut().filter(|l| l.has_params()) {
            out.push((&mut l.weight, &mut l.grad_weight));
            out.push((&mut l.bias, &mut l.grad_bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, v, _)| v.len()).sum()
    }

    /// Copy trunk parameters from another network with an identical trunk.
    pub fn copy_trunk_from(&mut self, other: &Network) -> Result<()> {
        let same = self.trunk.len() == other.trunk.len()
            && self.trunk.iter().zip(&other.trunk).all(|(a, b)| a.spec == b.spec);
        if !same || self.input_channels != other.input_channels {
            return Err(Error::InvalidArgument("trunk architectures differ".into()));
        }
        for (dst, src) in self.trunk.iter_mut().zip(&other.trunk) {
            dst.weight = src.weight.clone();
            dst.bias = src.bias.clone();
        }
        Ok(())
    }
}
