//! Dense-chain forward construction and explicit input-gradient expansion.
//!
//! [`input_gradient_expression`] writes the backward pass of a dense chain
//! with respect to its input as ordinary forward nodes. Differentiating the
//! result with [`Graph::backward`] then yields second-order terms such as the
//! weight gradient of a gradient penalty.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId, UnaryOp};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    /// Usable in forward chains, but not in input-gradient expansion.
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    pub fn node<T: Scalar>(self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.unary(UnaryOp::Relu, x),
            Activation::Tanh => g.unary(UnaryOp::Tanh, x),
            Activation::Sigmoid => g.unary(UnaryOp::Sigmoid, x),
        }
    }
}

/// Graph handles for one fully connected layer `act(x · W + b)`, with
/// `W: [in, out]` and `b: [1, out]`.
#[derive(Debug, Clone, Copy)]
pub struct DenseNodes {
    pub weight: NodeId,
    pub bias: NodeId,
    pub activation: Activation,
}

/// Forward trace of a dense chain: pre-activations and outputs per layer.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub pre: Vec<NodeId>,
    pub post: Vec<NodeId>,
}

impl ChainTrace {
    pub fn output(&self) -> NodeId {
        *self.post.last().expect("non-empty chain")
    }
}

pub fn dense_forward<T: Scalar>(g: &mut Graph<T>, layers: &[DenseNodes], x: NodeId) -> Result<ChainTrace> {
    let mut pre = Vec::with_capacity(layers.len());
    let mut post = Vec::with_capacity(layers.len());
    let mut h = x;
    for layer in layers {
        let z = g.matmul(h, layer.weight)?;
        let z = g.add(z, layer.bias)?;
        h = layer.activation.node(g, z)?;
        pre.push(z);
        post.push(h);
    }
    if post.is_empty() {
        return Err(Error::InvalidArgument("empty dense chain".into()));
    }
    Ok(ChainTrace { pre, post })
}

/// Emits `∇_x Σ_outputs chain(x)` as forward nodes, returning the chain
/// output and the `[B, in]` input gradient. For a scalar-output chain this is
/// the per-sample gradient, since rows do not interact.
pub fn input_gradient_expression<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[DenseNodes],
    x: NodeId,
) -> Result<(NodeId, NodeId)> {
    if let Some(bad) = layers
        .iter()
        .find(|l| !matches!(l.activation, Activation::Identity | Activation::Relu | Activation::Tanh))
    {
        return Err(Error::UnsupportedActivation(bad.activation.name().into()));
    }
    let trace = dense_forward(g, layers, x)?;
    let out = trace.output();
    let (b, width) = g.shape(out);
    let mut grad = g.constant(Tensor::full(b, width, T::one()));
    for (l, layer) in layers.iter().enumerate().rev() {
        let g_pre = match layer.activation {
            Activation::Identity => grad,
            Activation::Relu => {
                let mask = g.unary(UnaryOp::Step, trace.pre[l])?;
                g.mul(grad, mask)?
            }
            Activation::Tanh => {
                let sq = g.square(trace.post[l])?;
                let neg = g.neg(sq)?;
                let deriv = g.offset(T::one(), neg)?;
                g.mul(grad, deriv)?
            }
            Activation::Sigmoid => unreachable!("rejected above"),
        };
        let wt = g.transpose(layer.weight)?;
        grad = g.matmul(g_pre, wt)?;
    }
    Ok((out, grad))
}
