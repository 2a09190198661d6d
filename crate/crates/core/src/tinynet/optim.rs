use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Classical (heavy-ball) momentum SGD state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    /// One velocity per parameter tensor, in [`Network::params`] order.
    pub velocity: Vec<Tensor>,
}

impl OptimState {
    pub fn new(net: &Network, learning_rate: f64, momentum: f64) -> Self {
        OptimState {
            learning_rate,
            momentum,
            velocity: net
                .params()
                .iter()
                .map(|(_, v, _)| Tensor::zeros(v.shape()))
                .collect(),
        }
    }
}

/// `v <- momentum * v - lr * g; theta <- theta + v` using the gradients
/// accumulated in `net`. Nothing is updated if any gradient is non-finite.
pub fn sgd_step(net: &mut Network, opt: &mut OptimState) -> Result<()> {
    let params = net.params();
    if params.len() != opt.velocity.len() {
        return Err(Error::InvalidArgument(
            "optimizer state does not match the network".into(),
        ));
    }
    for ((name, value, grad), vel) in params.iter().zip(&opt.velocity) {
        if value.shape() != vel.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("velocity of {name}"),
                expected: value.shape().to_vec(),
                got: vel.shape().to_vec(),
            });
        }
        if let Some(pos) = grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name} at element {pos} ({})",
                grad.data()[pos]
            )));
        }
    }
    let (lr, mu) = (opt.learning_rate, opt.momentum);
    for ((value, grad), vel) in net.params_mut().into_iter().zip(&mut opt.velocity) {
        for ((theta, &g), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(vel.data_mut())
        {
            *v = mu * *v - lr * g;
            *theta += *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::layers::{LayerKind, LayerSpec};
    use crate::tinynet::network::NetworkSpec;

    fn single_weight() -> Network {
        let spec = NetworkSpec {
            input_channels: 1,
            input_size: None,
            trunk: vec![LayerSpec::new("fc", LayerKind::Linear { inputs: 1, outputs: 1 })],
            heads: vec![],
        };
        let mut net = Network::from_spec(&spec).unwrap();
        net.trunk[0].weight.data_mut()[0] = 1.0;
        net
    }

    fn set_grad(net: &mut Network, g: f64) {
        net.trunk[0].grad_weight.data_mut()[0] = g;
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut net = single_weight();
        let before = net.clone();
        let mut opt = OptimState::new(&net, 0.001, 0.9);
        sgd_step(&mut net, &mut opt).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn plain_step() {
        let mut net = single_weight();
        let mut opt = OptimState::new(&net, 0.001, 0.0);
        set_grad(&mut net, 1.0);
        sgd_step(&mut net, &mut opt).unwrap();
        assert!((net.trunk[0].weight.data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn momentum_unrolls() {
        let mut net = single_weight();
        let mut opt = OptimState::new(&net, 0.001, 0.9);
        set_grad(&mut net, 1.0);
        sgd_step(&mut net, &mut opt).unwrap();
        let after_one = net.trunk[0].weight.data()[0];
        sgd_step(&mut net, &mut opt).unwrap();
        let second = after_one - net.trunk[0].weight.data()[0];
        assert!((second - 0.001 * 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut net = single_weight();
        let before = net.clone();
        let mut opt = OptimState::new(&net, 0.001, 0.9);
        set_grad(&mut net, f64::NAN);
        assert!(matches!(sgd_step(&mut net, &mut opt), Err(Error::NonFinite(_))));
        assert_eq!(net.trunk[0].weight, before.trunk[0].weight);
    }
}
