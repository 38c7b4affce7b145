//! Deterministic activations: ReLU and the baselines it is compared with.

use serde::{Deserialize, Serialize};

use super::probact::{ProbActConfig, SigmaMode};
use crate::autodiff::{Backward, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const PRELU_INIT: f64 = 0.25;

/// The activation placed at every activation site of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Prelu,
    Swish,
    #[serde(rename = "probact")]
    ProbAct {
        config: ProbActConfig,
    },
}

impl Activation {
    pub fn probact(config: ProbActConfig) -> Self {
        Activation::ProbAct { config }
    }

    pub fn probact_config(&self) -> Option<&ProbActConfig> {
        match self {
            Activation::ProbAct { config } => Some(config),
            _ => None,
        }
    }

    /// Parses `relu | leaky | prelu | swish | probact:<mode>` where mode is
    /// `fixed`, `single`, `unbound` or `bounded`.
    pub fn parse(s: &str, sigma: Option<f64>, alpha: f64, beta: f64) -> Result<Self> {
        let act = match s {
            "relu" => Activation::Relu,
            "leaky" | "leaky-relu" => Activation::LeakyRelu,
            "prelu" => Activation::Prelu,
            "swish" => Activation::Swish,
            _ => {
                let mode = match s.strip_prefix("probact:") {
                    Some("fixed") => SigmaMode::Fixed {
                        sigma: sigma.ok_or_else(|| Error::Argument("probact:fixed needs a sigma value".into()))?,
                    },
                    Some("single") => SigmaMode::Single,
                    Some("unbound") => SigmaMode::ElementwiseUnbound,
                    Some("bounded") => SigmaMode::ElementwiseBounded { alpha, beta },
                    _ => return Err(Error::Argument(format!("unknown activation '{s}'"))),
                };
                Activation::probact(ProbActConfig::new(mode))
            }
        };
        Ok(act)
    }

    pub fn label(&self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu => "leaky".into(),
            Activation::Prelu => "prelu".into(),
            Activation::Swish => "swish".into(),
            Activation::ProbAct { config } => match config.mode {
                SigmaMode::Fixed { sigma } => format!("probact-fixed-{sigma}"),
                SigmaMode::Single => "probact-single".into(),
                SigmaMode::ElementwiseUnbound => "probact-unbound".into(),
                SigmaMode::ElementwiseBounded { .. } => "probact-bounded".into(),
            },
        }
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the upstream gradient where `x > 0`; zero elsewhere, including `x = 0`.
pub fn relu_backward<T: Scalar>(upstream: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    zip(upstream, x, |g, v| if v > T::zero() { g } else { T::zero() })
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = T::of(LEAKY_SLOPE);
    x.map(|v| if v > T::zero() { v } else { s * v })
}

pub fn leaky_relu_backward<T: Scalar>(upstream: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let s = T::of(LEAKY_SLOPE);
    zip(upstream, x, |g, v| if v > T::zero() { g } else { s * g })
}

pub fn swish<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn swish_backward<T: Scalar>(upstream: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    zip(upstream, x, |g, v| {
        let s = sigmoid(v);
        g * (s + v * s * (T::one() - s))
    })
}

fn channel_of(shape: &[usize], i: usize) -> usize {
    let inner: usize = shape.iter().skip(2).product();
    (i / inner) % shape[1]
}

/// `x` if positive, else `a[c] * x`, with one slope per channel (dim 1).
pub fn prelu<T: Scalar>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 || x.shape()[1] != slope.len() {
        return Err(Error::shape(format!(
            "prelu slope {:?} does not match input {:?}",
            slope.shape(),
            x.shape()
        )));
    }
    let a = slope.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v > T::zero() {
                v
            } else {
                a[channel_of(x.shape(), i)] * v
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn prelu_backward<T: Scalar>(upstream: &Tensor<T>, x: &Tensor<T>, slope: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let a = slope.data();
    let mut ga = vec![T::zero(); a.len()];
    let mut gx = Vec::with_capacity(x.len());
    for (i, (&g, &v)) in upstream.data().iter().zip(x.data()).enumerate() {
        let c = channel_of(x.shape(), i);
        if v > T::zero() {
            gx.push(g);
        } else {
            gx.push(a[c] * g);
            ga[c] = ga[c] + g * v;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(slope.shape().to_vec(), ga),
    )
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), d)
}

#[derive(Clone, Copy)]
enum Kind {
    Relu,
    Leaky,
    Swish,
    Prelu,
}

struct ActOp(Kind);

impl<T: Scalar> Backward<T> for ActOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Kind::Relu => "relu",
            Kind::Leaky => "leaky_relu",
            Kind::Swish => "swish",
            Kind::Prelu => "prelu",
        }
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        Ok(match self.0 {
            Kind::Relu => vec![Some(relu_backward(grad, x))],
            Kind::Leaky => vec![Some(leaky_relu_backward(grad, x))],
            Kind::Swish => vec![Some(swish_backward(grad, x))],
            Kind::Prelu => {
                let (gx, ga) = prelu_backward(grad, x, inputs[1]);
                vec![Some(gx), Some(ga)]
            }
        })
    }
}

pub mod ops {
    use super::*;

    pub fn relu<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
        let y = super::relu(tape.value(x));
        tape.push(ActOp(Kind::Relu), &[x], y)
    }

    pub fn leaky_relu<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
        let y = super::leaky_relu(tape.value(x));
        tape.push(ActOp(Kind::Leaky), &[x], y)
    }

    pub fn swish<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
        let y = super::swish(tape.value(x));
        tape.push(ActOp(Kind::Swish), &[x], y)
    }

    pub fn prelu<T: Scalar>(tape: &mut Tape<T>, x: NodeId, slope: NodeId) -> Result<NodeId> {
        let y = super::prelu(tape.value(x), tape.value(slope))?;
        Ok(tape.push(ActOp(Kind::Prelu), &[x, slope], y))
    }
}
