use candle_core::Tensor;

use super::Module;
use crate::error::Result;
use crate::layer::{BoundArgs, Kwargs};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Function {
    Relu,
    LeakyRelu(f64),
    Gelu,
    Sigmoid,
    Tanh,
    Identity,
}

/// Parameter-free elementwise layer.
pub struct Activation {
    kind: &'static str,
    function: Function,
    config: Kwargs,
}

impl Activation {
    pub(crate) fn relu(args: &BoundArgs) -> Result<Self> {
        Ok(Self::new("ReLU", Function::Relu, args))
    }

    pub(crate) fn leaky_relu(args: &BoundArgs) -> Result<Self> {
        let slope = args.f64("negative_slope")?;
        Ok(Self::new("LeakyReLU", Function::LeakyRelu(slope), args))
    }

    pub(crate) fn gelu(args: &BoundArgs) -> Result<Self> {
        Ok(Self::new("GELU", Function::Gelu, args))
    }

    pub(crate) fn sigmoid(args: &BoundArgs) -> Result<Self> {
        Ok(Self::new("Sigmoid", Function::Sigmoid, args))
    }

    pub(crate) fn tanh(args: &BoundArgs) -> Result<Self> {
        Ok(Self::new("Tanh", Function::Tanh, args))
    }

    pub(crate) fn identity(args: &BoundArgs) -> Result<Self> {
        Ok(Self::new("Identity", Function::Identity, args))
    }

    fn new(kind: &'static str, function: Function, args: &BoundArgs) -> Self {
        Self { kind, function, config: args.to_kwargs() }
    }
}

pub(crate) fn sigmoid(xs: &Tensor) -> candle_core::Result<Tensor> {
    (xs.neg()?.exp()? + 1.0)?.recip()
}

impl Module for Activation {
    fn forward_t(&self, xs: &Tensor, _train: bool) -> Result<Tensor> {
        Ok(match self.function {
            Function::Relu => xs.relu()?,
            Function::LeakyRelu(slope) => {
                let neg = xs.minimum(0.0)?.affine(slope, 0.0)?;
                (xs.relu()? + neg)?
            }
            Function::Gelu => xs.gelu_erf()?,
            Function::Sigmoid => sigmoid(xs)?,
            Function::Tanh => xs.tanh()?,
            Function::Identity => xs.clone(),
        })
    }

    fn kind(&self) -> &str {
        self.kind
    }

    fn config(&self) -> Kwargs {
        self.config.clone()
    }
}
