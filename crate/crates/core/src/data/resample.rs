use candle_core::{DType, Device, Tensor};

use super::{Geometry, ImageVolume};
use crate::error::{Error, Result};

/// Sampling plan for one axis: output length and, for every output index,
/// the fractional source coordinate `j * target / spacing`.
fn axis_plan(len: usize, spacing: f64, target: f64) -> (usize, Vec<f64>) {
    let new_len = ((len as f64 * spacing / target).round() as usize).max(1);
    let coords = (0..new_len).map(|j| j as f64 * target / spacing).collect();
    (new_len, coords)
}

fn check_target(target: f64) -> Result<()> {
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::Argument(format!("resampling spacing must be positive, got {target}")));
    }
    Ok(())
}

fn index_tensor(ix: impl Iterator<Item = usize>) -> Result<Tensor> {
    let ix: Vec<u32> = ix.map(|i| i as u32).collect();
    Ok(Tensor::new(ix.as_slice(), &Device::Cpu)?)
}

fn with_spacing(geometry: &Geometry, target: f64) -> Geometry {
    Geometry { spacing: vec![target; geometry.rank()], ..geometry.clone() }
}

/// Resamples every spatial axis to `target` spacing with linear
/// interpolation, clamping at the far edge. `f64` data stays `f64`, all
/// other types become `f32`.
pub fn resample_linear(vol: &ImageVolume, target: f64) -> Result<ImageVolume> {
    check_target(target)?;
    let out_dtype = if vol.data.dtype() == DType::F64 { DType::F64 } else { DType::F32 };
    let mut data = vol.data.to_device(&Device::Cpu)?.to_dtype(DType::F64)?;
    for (axis, &spacing) in vol.geometry.spacing.iter().enumerate() {
        let dim = axis + 1;
        let len = data.dims()[dim];
        let (new_len, coords) = axis_plan(len, spacing, target);
        let lo: Vec<usize> = coords.iter().map(|&s| (s.floor() as usize).min(len - 1)).collect();
        let hi: Vec<usize> = lo.iter().map(|&i| (i + 1).min(len - 1)).collect();
        let frac: Vec<f64> = coords.iter().zip(&lo).map(|(&s, &i)| (s - i as f64).clamp(0.0, 1.0)).collect();
        let mut wshape = vec![1; data.rank()];
        wshape[dim] = new_len;
        let w = Tensor::from_vec(frac, wshape.as_slice(), &Device::Cpu)?;
        let a = data.index_select(&index_tensor(lo.into_iter())?, dim)?;
        let b = data.index_select(&index_tensor(hi.into_iter())?, dim)?;
        data = (&a + (b - &a)?.broadcast_mul(&w)?)?;
    }
    ImageVolume::new(
        data.to_dtype(out_dtype)?.to_device(vol.data.device())?,
        with_spacing(&vol.geometry, target),
        vol.source_format,
    )
}

/// Resamples with nearest-neighbour lookup; the dtype is preserved, which
/// keeps label maps integral.
pub fn resample_nearest(vol: &ImageVolume, target: f64) -> Result<ImageVolume> {
    check_target(target)?;
    let mut data = vol.data.clone();
    for (axis, &spacing) in vol.geometry.spacing.iter().enumerate() {
        let dim = axis + 1;
        let len = data.dims()[dim];
        let (_, coords) = axis_plan(len, spacing, target);
        let ix = coords.iter().map(|&s| (s.round() as usize).min(len - 1));
        data = data.index_select(&index_tensor(ix)?.to_device(data.device())?, dim)?;
    }
    ImageVolume::new(data, with_spacing(&vol.geometry, target), vol.source_format)
}
