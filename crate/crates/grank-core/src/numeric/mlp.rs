//! Small multi-layer perceptron: affine + activation per layer, shared by
//! every projection head in the model.

use rand::Rng;

use super::params::{Init, ParamId, ParamSet};
use super::scalar::Scalar;
use super::tape::{Session, ValueId};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

/// Parameter handles for one MLP. Layer `i` maps `dims[i]` to `dims[i+1]`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<MlpLayer>,
}

impl Mlp {
    /// Register an MLP under `prefix` with widths `dims` (input first).
    /// Hidden layers use `hidden_act`, the final layer `out_act`.
    pub fn register<S: Scalar>(
        params: &mut ParamSet<S>,
        rng: &mut impl Rng,
        prefix: &str,
        dims: &[usize],
        hidden_act: Activation,
        out_act: Activation,
    ) -> Mlp {
        assert!(dims.len() >= 2, "mlp needs at least input and output widths");
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let weight = params.register(
                &format!("{prefix}.w{i}"),
                fan_in,
                fan_out,
                Init::FanIn(fan_in),
                rng,
            );
            let bias = params.register(&format!("{prefix}.b{i}"), 1, fan_out, Init::Zeros, rng);
            let activation = if i + 2 == dims.len() { out_act } else { hidden_act };
            layers.push(MlpLayer {
                weight,
                bias,
                activation,
            });
        }
        Mlp { layers }
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<S>, x: ValueId) -> Result<ValueId> {
        mlp_forward(sess, x, &self.layers)
    }

    pub fn in_width<S: Scalar>(&self, params: &ParamSet<S>) -> usize {
        params.value(self.layers[0].weight).rows()
    }

    pub fn out_width<S: Scalar>(&self, params: &ParamSet<S>) -> usize {
        params.value(self.layers.last().unwrap().weight).cols()
    }
}

/// Chain of affine + activation layers applied to the rows of `x`.
pub fn mlp_forward<S: Scalar>(
    sess: &mut Session<S>,
    x: ValueId,
    layers: &[MlpLayer],
) -> Result<ValueId> {
    let mut h = x;
    for layer in layers {
        let w = sess.param(layer.weight);
        let b = sess.param(layer.bias);
        h = sess.matmul(h, w)?;
        h = sess.add_row_bias(h, b)?;
        h = match layer.activation {
            Activation::Identity => h,
            Activation::Relu => sess.relu(h),
            Activation::Gelu => sess.gelu(h),
        };
    }
    Ok(h)
}
