use candle_core::{Tensor, Var};

use super::{init, join, record_macs, Module, Param};
use crate::error::{Error, Result};
use crate::layer::{BoundArgs, Kwargs};

/// Affine map over the last axis: `y = x W^T + b`.
pub struct Linear {
    in_features: usize,
    out_features: usize,
    weight: Var,
    bias: Option<Var>,
    config: Kwargs,
}

impl Linear {
    pub(crate) fn from_args(args: &BoundArgs) -> Result<Self> {
        let in_features = args.positive("in_features")?;
        let out_features = args.positive("out_features")?;
        let bound = 1.0 / (in_features as f64).sqrt();
        let bias = if args.bool("bias")? { Some(init::uniform(&[out_features], bound)?) } else { None };
        Ok(Self {
            in_features,
            out_features,
            weight: init::uniform(&[out_features, in_features], bound)?,
            bias,
            config: args.to_kwargs(),
        })
    }
}

impl Module for Linear {
    fn forward_t(&self, xs: &Tensor, _train: bool) -> Result<Tensor> {
        if xs.rank() == 0 || xs.dims()[xs.rank() - 1] != self.in_features {
            return Err(Error::Shape(format!(
                "Linear expects trailing dimension {}, got {:?}",
                self.in_features,
                xs.dims()
            )));
        }
        let rows = xs.elem_count() / self.in_features;
        record_macs((rows * self.in_features * self.out_features) as u64);
        let ys = xs.broadcast_matmul(&self.weight.as_tensor().t()?)?;
        Ok(match &self.bias {
            Some(b) => ys.broadcast_add(b.as_tensor())?,
            None => ys,
        })
    }

    fn kind(&self) -> &str {
        "Linear"
    }

    fn config(&self) -> Kwargs {
        self.config.clone()
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        out.push(Param { name: join(prefix, "weight"), var: self.weight.clone(), trainable: true });
        if let Some(bias) = &self.bias {
            out.push(Param { name: join(prefix, "bias"), var: bias.clone(), trainable: true });
        }
    }
}
