//! PNG/JPEG/BMP images via the `image` crate.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, GrayImage, RgbImage};

use super::{Geometry, ImageVolume, SourceFormat};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::corrupt(path, other.to_string()),
    })
}

/// Grayscale images give one channel, everything else three (RGB).
/// `normalize` maps stored values to `[0, 1]` floats; otherwise the raw
/// 8-bit levels are returned as `u8`.
pub(super) fn read(path: &Path, normalize: bool) -> Result<ImageVolume> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = !img.color().has_color();
    let dev = &Device::Cpu;
    let data = match (gray, normalize) {
        (true, true) => {
            let px = img.into_luma16().into_raw();
            Tensor::from_vec(px.iter().map(|&v| v as f32 / 65535.0).collect::<Vec<_>>(), (1, h, w), dev)?
        }
        (true, false) => Tensor::from_vec(img.into_luma8().into_raw(), (1, h, w), dev)?,
        (false, true) => {
            let px = img.into_rgb16().into_raw();
            let t = Tensor::from_vec(px.iter().map(|&v| v as f32 / 65535.0).collect::<Vec<_>>(), (h, w, 3), dev)?;
            t.permute((2, 0, 1))?.contiguous()?
        }
        (false, false) => Tensor::from_vec(img.into_rgb8().into_raw(), (h, w, 3), dev)?.permute((2, 0, 1))?.contiguous()?,
    };
    ImageVolume::new(data, Geometry::identity(2), SourceFormat::Raster)
}

/// Float data is scaled from `[0, 1]`; integer data is written as gray levels.
pub(super) fn write(vol: &ImageVolume, path: &Path) -> Result<()> {
    if vol.spatial_rank() != 2 {
        return Err(Error::Format(format!("raster output needs a 2D image, got shape {:?}", vol.data.dims())));
    }
    let levels = match vol.data.dtype() {
        DType::F32 | DType::F64 | DType::F16 | DType::BF16 => (vol.data.to_dtype(DType::F64)? * 255.0)?,
        _ => vol.data.to_dtype(DType::F64)?,
    };
    let levels = levels.round()?.clamp(0.0, 255.0)?.to_dtype(DType::U8)?.to_device(&Device::Cpu)?;
    let (c, h, w) = levels.dims3()?;
    let (h32, w32) = (h as u32, w as u32);
    let saved = match c {
        1 => GrayImage::from_raw(w32, h32, levels.flatten_all()?.to_vec1::<u8>()?).map(|i| i.save(path)),
        3 => RgbImage::from_raw(w32, h32, levels.permute((1, 2, 0))?.flatten_all()?.to_vec1::<u8>()?).map(|i| i.save(path)),
        _ => return Err(Error::Format(format!("raster output takes 1 or 3 channels, got {c}"))),
    };
    saved.expect("buffer length matches dimensions").map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}
