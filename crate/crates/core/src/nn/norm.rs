use candle_core::{Tensor, Var};

use super::{channel_shape, check_input, init, join, Module, Param};
use crate::error::{Error, Result};
use crate::layer::{BoundArgs, Kwargs};

/// Batch normalization over `(N, spatial...)` per channel with running
/// statistics for evaluation mode.
pub struct BatchNorm {
    kind: &'static str,
    dims: usize,
    num_features: usize,
    eps: f64,
    momentum: f64,
    weight: Option<Var>,
    bias: Option<Var>,
    running_mean: Var,
    running_var: Var,
    config: Kwargs,
}

impl BatchNorm {
    pub(crate) fn from_args(dims: usize, args: &BoundArgs) -> Result<Self> {
        let num_features = args.positive("num_features")?;
        let eps = args.f64("eps")?;
        let momentum = args.f64("momentum")?;
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1], got {momentum}")));
        }
        let (weight, bias) = if args.bool("affine")? {
            (Some(init::constant(&[num_features], 1.0)?), Some(init::constant(&[num_features], 0.0)?))
        } else {
            (None, None)
        };
        Ok(Self {
            kind: if dims == 2 { "BatchNorm2d" } else { "BatchNorm3d" },
            dims,
            num_features,
            eps,
            momentum,
            weight,
            bias,
            running_mean: init::constant(&[num_features], 0.0)?,
            running_var: init::constant(&[num_features], 1.0)?,
            config: args.to_kwargs(),
        })
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }
}

fn affine(xs: Tensor, weight: &Option<Var>, bias: &Option<Var>, channels: usize) -> Result<Tensor> {
    let shape = channel_shape(channels, xs.rank());
    let xs = match weight {
        Some(w) => xs.broadcast_mul(&w.as_tensor().reshape(shape.clone())?)?,
        None => xs,
    };
    Ok(match bias {
        Some(b) => xs.broadcast_add(&b.as_tensor().reshape(shape)?)?,
        None => xs,
    })
}

impl Module for BatchNorm {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        check_input(self.kind, xs, self.dims + 2, self.num_features)?;
        let c = self.num_features;
        let shape = channel_shape(c, xs.rank());
        let (mean, var) = if train {
            let per_channel = xs.transpose(0, 1)?.contiguous()?.reshape((c, ()))?;
            let m = per_channel.dim(1)?;
            let mean = per_channel.mean_keepdim(1)?;
            let var = per_channel.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let mean = mean.flatten_all()?;
            let var = var.flatten_all()?;
            let unbiased = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            let mo = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - mo))? + (mean.detach() * mo)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - mo))? + (var.detach() * (mo * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (self.running_mean.as_tensor().detach(), self.running_var.as_tensor().detach())
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?.reshape(shape.clone())?;
        let xs = xs.broadcast_sub(&mean.reshape(shape)?)?.broadcast_mul(&inv_std)?;
        affine(xs, &self.weight, &self.bias, c)
    }

    fn kind(&self) -> &str {
        self.kind
    }

    fn config(&self) -> Kwargs {
        self.config.clone()
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        if let (Some(w), Some(b)) = (&self.weight, &self.bias) {
            out.push(Param { name: join(prefix, "weight"), var: w.clone(), trainable: true });
            out.push(Param { name: join(prefix, "bias"), var: b.clone(), trainable: true });
        }
        out.push(Param { name: join(prefix, "running_mean"), var: self.running_mean.clone(), trainable: false });
        out.push(Param { name: join(prefix, "running_var"), var: self.running_var.clone(), trainable: false });
    }
}

/// Group normalization; instance normalization is the `num_groups ==
/// num_channels` special case.
pub struct GroupNorm {
    kind: &'static str,
    num_groups: usize,
    num_channels: usize,
    eps: f64,
    weight: Option<Var>,
    bias: Option<Var>,
    config: Kwargs,
}

impl GroupNorm {
    pub(crate) fn from_args(args: &BoundArgs) -> Result<Self> {
        let num_groups = args.positive("num_groups")?;
        let num_channels = args.positive("num_channels")?;
        Self::new("GroupNorm", num_groups, num_channels, args)
    }

    pub(crate) fn instance(dims: usize, args: &BoundArgs) -> Result<Self> {
        let num_features = args.positive("num_features")?;
        let kind = if dims == 2 { "InstanceNorm2d" } else { "InstanceNorm3d" };
        Self::new(kind, num_features, num_features, args)
    }

    fn new(kind: &'static str, num_groups: usize, num_channels: usize, args: &BoundArgs) -> Result<Self> {
        if num_channels % num_groups != 0 {
            return Err(Error::Config(format!(
                "num_channels ({num_channels}) must be divisible by num_groups ({num_groups})"
            )));
        }
        let (weight, bias) = if args.bool("affine")? {
            (Some(init::constant(&[num_channels], 1.0)?), Some(init::constant(&[num_channels], 0.0)?))
        } else {
            (None, None)
        };
        Ok(Self {
            kind,
            num_groups,
            num_channels,
            eps: args.f64("eps")?,
            weight,
            bias,
            config: args.to_kwargs(),
        })
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }
}

impl Module for GroupNorm {
    fn forward_t(&self, xs: &Tensor, _train: bool) -> Result<Tensor> {
        if xs.rank() < 3 {
            return Err(Error::Shape(format!("{} expects a spatial input, got {:?}", self.kind, xs.dims())));
        }
        check_input(self.kind, xs, xs.rank(), self.num_channels)?;
        let dims = xs.dims().to_vec();
        let grouped = xs.reshape((dims[0], self.num_groups, ()))?;
        let mean = grouped.mean_keepdim(2)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let xs = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape(dims)?;
        affine(xs, &self.weight, &self.bias, self.num_channels)
    }

    fn kind(&self) -> &str {
        self.kind
    }

    fn config(&self) -> Kwargs {
        self.config.clone()
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        if let (Some(w), Some(b)) = (&self.weight, &self.bias) {
            out.push(Param { name: join(prefix, "weight"), var: w.clone(), trainable: true });
            out.push(Param { name: join(prefix, "bias"), var: b.clone(), trainable: true });
        }
    }
}
