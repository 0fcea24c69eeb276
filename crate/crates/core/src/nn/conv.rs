use candle_core::{DType, Tensor, Var};

use super::{channel_shape, check_input, init, join, record_macs, Module, Param};
use crate::error::{Error, Result};
use crate::layer::{BoundArgs, Kwargs};

/// N-dimensional convolution (2D or 3D) with cubic kernels.
///
/// Weights are laid out as `(out_channels, in_channels, k, k[, k])`.
pub struct Conv {
    kind: &'static str,
    dims: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    weight: Var,
    bias: Option<Var>,
    config: Kwargs,
}

impl Conv {
    pub(crate) fn from_args(dims: usize, args: &BoundArgs) -> Result<Self> {
        let in_channels = args.positive("in_channels")?;
        let out_channels = args.positive("out_channels")?;
        let kernel = args.positive("kernel_size")?;
        let stride = args.positive("stride")?;
        let padding = args.usize("padding")?;
        let fan_in = in_channels * kernel.pow(dims as u32);
        let mut shape = vec![out_channels, in_channels];
        shape.extend(std::iter::repeat_n(kernel, dims));
        let weight = init::kaiming_uniform(&shape, fan_in)?;
        let bias = if args.bool("bias")? {
            Some(init::uniform(&[out_channels], 1.0 / (fan_in as f64).sqrt())?)
        } else {
            None
        };
        Ok(Self {
            kind: if dims == 2 { "Conv2d" } else { "Conv3d" },
            dims,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
            config: args.to_kwargs(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    fn output_len(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::Shape(format!(
                "{}: spatial size {len} is smaller than kernel {} after padding",
                self.kind, self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    fn forward_3d(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, c) = (xs.dim(0)?, xs.dim(1)?);
        let mut xs = xs.clone();
        if self.padding > 0 {
            for axis in 2..5 {
                xs = xs.pad_with_zeros(axis, self.padding, self.padding)?;
            }
        }
        let out: Vec<usize> = (2..5)
            .map(|a| self.output_len(xs.dim(a)? - 2 * self.padding))
            .collect::<Result<_>>()?;
        let k = self.kernel;
        let mut columns = Vec::with_capacity(k * k * k);
        for dz in 0..k {
            let plane = strided_slice(&xs, 2, dz, out[0], self.stride)?;
            for dy in 0..k {
                let row = strided_slice(&plane, 3, dy, out[1], self.stride)?;
                for dx in 0..k {
                    columns.push(strided_slice(&row, 4, dx, out[2], self.stride)?);
                }
            }
        }
        let n = out.iter().product::<usize>();
        // (B, C, K, D, H, W) -> (B, C*K, N)
        let cols = Tensor::stack(&columns, 2)?.reshape((b, c * k * k * k, n))?;
        let w = self.weight.as_tensor().reshape((self.out_channels, c * k * k * k))?;
        let ys = w.broadcast_matmul(&cols)?;
        Ok(ys.reshape((b, self.out_channels, out[0], out[1], out[2]))?)
    }
}

/// Elements `start, start + step, ...` (`count` of them) along `axis`.
fn strided_slice(xs: &Tensor, axis: usize, start: usize, count: usize, step: usize) -> Result<Tensor> {
    if step == 1 {
        return Ok(xs.narrow(axis, start, count)?);
    }
    let idx: Vec<u32> = (0..count).map(|i| (start + i * step) as u32).collect();
    let idx = Tensor::from_vec(idx, count, xs.device())?;
    Ok(xs.index_select(&idx, axis)?)
}

impl Module for Conv {
    fn forward_t(&self, xs: &Tensor, _train: bool) -> Result<Tensor> {
        check_input(self.kind, xs, self.dims + 2, self.in_channels)?;
        for &len in &xs.dims()[2..] {
            self.output_len(len)?;
        }
        let ys = if self.dims == 2 {
            let xs = if xs.dtype() == DType::F32 { xs.contiguous()? } else { xs.to_dtype(DType::F32)? };
            xs.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?
        } else {
            self.forward_3d(xs)?
        };
        let out_voxels: usize = ys.dims()[2..].iter().product();
        record_macs(
            (ys.dim(0)? * out_voxels * self.out_channels * self.in_channels) as u64
                * self.kernel.pow(self.dims as u32) as u64,
        );
        match &self.bias {
            Some(bias) => {
                let bias = bias.as_tensor().reshape(channel_shape(self.out_channels, ys.rank()))?;
                Ok(ys.broadcast_add(&bias)?)
            }
            None => Ok(ys),
        }
    }

    fn kind(&self) -> &str {
        self.kind
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

/// Transposed convolution. Weights are laid out as
/// `(in_channels, out_channels, k, k[, k])`.
///
/// The non-overlapping case `kernel_size == stride` (the usual learned
/// upsampling) is supported for 2D and 3D; other 2D configurations use the
/// generic transposed-convolution kernel.
pub struct ConvTranspose {
    kind: &'static str,
    dims: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    weight: Var,
    bias: Option<Var>,
    config: Kwargs,
}

impl ConvTranspose {
    pub(crate) fn from_args(dims: usize, args: &BoundArgs) -> Result<Self> {
        let in_channels = args.positive("in_channels")?;
        let out_channels = args.positive("out_channels")?;
        let kernel = args.positive("kernel_size")?;
        let stride = args.positive("stride")?;
        let padding = args.usize("padding")?;
        let kind = if dims == 2 { "ConvTranspose2d" } else { "ConvTranspose3d" };
        if dims == 3 && (kernel != stride || padding != 0) {
            return Err(Error::Config(format!(
                "{kind} supports only kernel_size == stride without padding, got kernel_size={kernel}, stride={stride}, padding={padding}"
            )));
        }
        let fan_in = out_channels * kernel.pow(dims as u32);
        let mut shape = vec![in_channels, out_channels];
        shape.extend(std::iter::repeat_n(kernel, dims));
        let weight = init::kaiming_uniform(&shape, fan_in)?;
        let bias = if args.bool("bias")? {
            Some(init::uniform(&[out_channels], 1.0 / (fan_in as f64).sqrt())?)
        } else {
            None
        };
        Ok(Self {
            kind,
            dims,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
            config: args.to_kwargs(),
        })
    }

    /// Each input voxel expands into an independent `k^d` output block.
    fn forward_blocks(&self, xs: &Tensor) -> Result<Tensor> {
        let dims = xs.dims().to_vec();
        let b = dims[0];
        let spatial = &dims[2..];
        let n: usize = spatial.iter().product();
        let k = self.kernel;
        let block = k.pow(self.dims as u32);
        let cols = xs.reshape((b, self.in_channels, n))?.transpose(1, 2)?;
        let w = self.weight.as_tensor().reshape((self.in_channels, self.out_channels * block))?;
        let ys = cols.broadcast_matmul(&w)?; // (B, N, Co * K)
        let mut shape = vec![b];
        shape.extend_from_slice(spatial);
        shape.push(self.out_channels);
        shape.extend(std::iter::repeat_n(k, self.dims));
        let ys = ys.reshape(shape)?;
        // (B, s0.., Co, k0..) -> (B, Co, s0, k0, s1, k1, ...)
        let d = self.dims;
        let mut perm = vec![0, 1 + d];
        for i in 0..d {
            perm.push(1 + i);
            perm.push(2 + d + i);
        }
        let ys = ys.permute(perm)?;
        let mut out = vec![b, self.out_channels];
        out.extend(spatial.iter().map(|s| s * k));
        Ok(ys.reshape(out)?)
    }
}

impl Module for ConvTranspose {
    fn forward_t(&self, xs: &Tensor, _train: bool) -> Result<Tensor> {
        check_input(self.kind, xs, self.dims + 2, self.in_channels)?;
        let in_voxels: usize = xs.dims()[2..].iter().product();
        let ys = if self.kernel == self.stride && self.padding == 0 {
            self.forward_blocks(xs)?
        } else {
            xs.contiguous()?.conv_transpose2d(self.weight.as_tensor(), self.padding, 0, self.stride, 1)?
        };
        record_macs(
            (xs.dim(0)? * in_voxels * self.in_channels * self.out_channels) as u64
                * self.kernel.pow(self.dims as u32) as u64,
        );
        match &self.bias {
            Some(bias) => {
                let bias = bias.as_tensor().reshape(channel_shape(self.out_channels, ys.rank()))?;
                Ok(ys.broadcast_add(&bias)?)
            }
            None => Ok(ys),
        }
    }

    fn kind(&self) -> &str {
        self.kind
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
