//! Image I/O, datasets, fold splitting and the flat tensor archive.

mod archive;
mod dataset;
mod loader;
mod metaimage;
mod nifti;
mod nnunet;
mod raster;
mod resample;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use archive::{fast_load, fast_save, read_header, ArchiveEntry};
pub use dataset::{
    binarize, check_index, fold, BinarizedDataset, ConcatDataset, FoldSplit, Sample, Subset, SupervisedDataset, TensorDataset,
};
pub use loader::{Batch, DataLoader, LoaderState};
pub use nnunet::{nnunet_dataset, NNUNetDataset};
pub use resample::{resample_linear, resample_nearest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Nifti,
    MetaImage,
    Raster,
}

/// Physical placement of the voxel grid. All vectors are in array-axis
/// order (slowest axis first), which is the reverse of the x, y, z order
/// used inside the file formats. Coordinates follow the LPS convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    /// Row-major `n x n` matrix; column `j` is the unit direction of array axis `j`.
    pub direction: Vec<f64>,
}

impl Geometry {
    pub fn identity(rank: usize) -> Self {
        let mut direction = vec![0.0; rank * rank];
        for i in 0..rank {
            direction[i * rank + i] = 1.0;
        }
        Self { spacing: vec![1.0; rank], origin: vec![0.0; rank], direction }
    }

    pub fn rank(&self) -> usize {
        self.spacing.len()
    }

    pub fn approx_eq(&self, other: &Geometry, tol: f64) -> bool {
        let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol);
        close(&self.spacing, &other.spacing)
            && close(&self.origin, &other.origin)
            && close(&self.direction, &other.direction)
    }
}

/// A channel-first image of shape `(C, spatial...)` with its geometry.
#[derive(Debug, Clone)]
pub struct ImageVolume {
    pub data: Tensor,
    pub geometry: Geometry,
    pub source_format: SourceFormat,
}

impl ImageVolume {
    pub fn new(data: Tensor, geometry: Geometry, source_format: SourceFormat) -> Result<Self> {
        let rank = data.rank();
        if !(3..=4).contains(&rank) {
            return Err(Error::Shape(format!("image volumes are (C, spatial...) with 2 or 3 spatial dims, got {:?}", data.dims())));
        }
        if geometry.rank() != rank - 1 || geometry.origin.len() != rank - 1 || geometry.direction.len() != (rank - 1).pow(2) {
            return Err(Error::Shape(format!(
                "geometry of rank {} does not match data of shape {:?}",
                geometry.rank(),
                data.dims()
            )));
        }
        Ok(Self { data, geometry, source_format })
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.data.dims()[1..]
    }

    pub fn spatial_rank(&self) -> usize {
        self.data.rank() - 1
    }
}

pub fn parse_device(name: &str) -> Result<Device> {
    match name.trim().to_ascii_lowercase().as_str() {
        "cpu" => Ok(Device::Cpu),
        other => Err(Error::Argument(format!("unsupported device `{other}` (this build supports `cpu`)"))),
    }
}

/// Detects the image format from the file name.
pub fn detect_format(path: &Path) -> Result<SourceFormat> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(SourceFormat::Nifti)
    } else if name.ends_with(".mha") || name.ends_with(".mhd") {
        Ok(SourceFormat::MetaImage)
    } else if [".png", ".jpg", ".jpeg", ".bmp"].iter().any(|e| name.ends_with(e)) {
        Ok(SourceFormat::Raster)
    } else {
        Err(Error::Format(format!("unrecognized image extension: {}", path.display())))
    }
}

/// File name without its image extension (`case_001.nii.gz` gives `case_001`).
pub fn image_stem(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let lower = name.to_ascii_lowercase();
    for ext in [".nii.gz", ".nii", ".mha", ".mhd", ".png", ".jpg", ".jpeg", ".bmp"] {
        if lower.ends_with(ext) {
            return name[..name.len() - ext.len()].to_string();
        }
    }
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

pub fn is_image_file(path: &Path) -> bool {
    path.is_file() && detect_format(path).is_ok()
}

fn read_any(path: &Path, raster_normalize: bool) -> Result<ImageVolume> {
    let format = detect_format(path)?;
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    match format {
        SourceFormat::Nifti => nifti::read(path),
        SourceFormat::MetaImage => metaimage::read(path),
        SourceFormat::Raster => raster::read(path, raster_normalize),
    }
}

/// Loads an image. Medical formats keep their stored intensities (integer
/// types other than `u8`, `u32` and `i64` become `f32`); raster images
/// become `f32` in `[0, 1]`. With `resample_iso`, every spatial axis is
/// linearly resampled to that spacing.
pub fn load_image(path: impl AsRef<Path>, resample_iso: Option<f64>, device: &Device) -> Result<ImageVolume> {
    let path = path.as_ref();
    let mut vol = read_any(path, true)?;
    if let Some(target) = resample_iso {
        vol = resample_linear(&vol, target)?;
    }
    vol.data = vol.data.to_device(device)?;
    Ok(vol)
}

/// Loads a label map as `i64`, resampling with nearest neighbour. Raster
/// masks stored as `{0, 255}` are mapped to `{0, 1}`.
pub fn load_label(path: impl AsRef<Path>, resample_iso: Option<f64>, device: &Device) -> Result<ImageVolume> {
    let path = path.as_ref();
    let mut vol = read_any(path, false)?;
    if vol.source_format == SourceFormat::Raster && vol.channels() > 1 {
        // Colour-encoded masks are reduced to their first channel.
        vol.data = vol.data.narrow(0, 0, 1)?;
    }
    vol.data = to_label_tensor(&vol.data)?;
    if vol.source_format == SourceFormat::Raster {
        let values = vol.data.flatten_all()?.to_vec1::<i64>()?;
        if values.iter().all(|&v| v == 0 || v == 255) {
            vol.data = vol.data.eq(255i64)?.to_dtype(DType::I64)?;
        }
    }
    if let Some(target) = resample_iso {
        vol = resample_nearest(&vol, target)?;
    }
    vol.data = vol.data.to_device(device)?;
    Ok(vol)
}

/// Maps gray-level encoded labels back to class indices (`value / step`, rounded).
pub fn decode_gray_labels(labels: &Tensor, step: u32) -> Result<Tensor> {
    if step == 0 {
        return Err(Error::Argument("gray step must be positive".into()));
    }
    Ok(((labels.to_dtype(DType::F64)? / step as f64)?.round()?).to_dtype(DType::I64)?)
}

fn to_label_tensor(data: &Tensor) -> Result<Tensor> {
    Ok(match data.dtype() {
        DType::I64 => data.clone(),
        DType::F32 | DType::F64 | DType::F16 | DType::BF16 => data.round()?.to_dtype(DType::I64)?,
        _ => data.to_dtype(DType::I64)?,
    })
}

/// Writes a volume; the format follows the extension. Raster output takes
/// 1 or 3 channels; floating data is treated as `[0, 1]` intensities and
/// integer data as gray levels.
pub fn save_image(vol: &ImageVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    match detect_format(path)? {
        SourceFormat::Nifti => nifti::write(vol, path),
        SourceFormat::MetaImage => metaimage::write(vol, path),
        SourceFormat::Raster => raster::write(vol, path),
    }
}

/// Raw little-endian bytes of a tensor, in row-major order.
pub(crate) fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?.to_device(&Device::Cpu)?;
    Ok(match flat.dtype() {
        DType::U8 => flat.to_vec1::<u8>()?,
        DType::U32 => flat.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::I64 => flat.to_vec1::<i64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Format(format!("unsupported tensor dtype {other:?}"))),
    })
}

/// Element type of stored voxel data before conversion to a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Scalar {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    I64,
    F32,
    F64,
}

impl Scalar {
    pub(crate) fn size(self) -> usize {
        match self {
            Scalar::U8 | Scalar::I8 => 1,
            Scalar::U16 | Scalar::I16 => 2,
            Scalar::U32 | Scalar::I32 | Scalar::F32 => 4,
            Scalar::I64 | Scalar::F64 => 8,
        }
    }

    pub(crate) fn from_dtype(dtype: DType) -> Result<Self> {
        Ok(match dtype {
            DType::U8 => Scalar::U8,
            DType::U32 => Scalar::U32,
            DType::I64 => Scalar::I64,
            DType::F32 => Scalar::F32,
            DType::F64 => Scalar::F64,
            other => return Err(Error::Format(format!("cannot store dtype {other:?}"))),
        })
    }
}

/// Decodes a raw buffer into a tensor of the given shape. Types without a
/// native tensor counterpart become `f32`.
pub(crate) fn decode_buffer(bytes: &[u8], scalar: Scalar, big_endian: bool, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if bytes.len() < numel * scalar.size() {
        return Err(Error::Format(format!(
            "voxel buffer holds {} bytes, {} needed",
            bytes.len(),
            numel * scalar.size()
        )));
    }
    let bytes = &bytes[..numel * scalar.size()];
    macro_rules! words {
        ($t:ty, $n:expr) => {
            bytes.chunks_exact($n).map(|c| {
                let arr: [u8; $n] = c.try_into().unwrap();
                if big_endian {
                    <$t>::from_be_bytes(arr)
                } else {
                    <$t>::from_le_bytes(arr)
                }
            })
        };
    }
    let dev = &Device::Cpu;
    let t = match scalar {
        Scalar::U8 => Tensor::from_vec(bytes.to_vec(), shape, dev)?,
        Scalar::I8 => Tensor::from_vec(bytes.iter().map(|&b| b as i8 as f32).collect::<Vec<_>>(), shape, dev)?,
        Scalar::U16 => Tensor::from_vec(words!(u16, 2).map(f32::from).collect::<Vec<_>>(), shape, dev)?,
        Scalar::I16 => Tensor::from_vec(words!(i16, 2).map(f32::from).collect::<Vec<_>>(), shape, dev)?,
        Scalar::U32 => Tensor::from_vec(words!(u32, 4).collect::<Vec<_>>(), shape, dev)?,
        Scalar::I32 => Tensor::from_vec(words!(i32, 4).map(|v| v as f32).collect::<Vec<_>>(), shape, dev)?,
        Scalar::I64 => Tensor::from_vec(words!(i64, 8).collect::<Vec<_>>(), shape, dev)?,
        Scalar::F32 => Tensor::from_vec(words!(f32, 4).collect::<Vec<_>>(), shape, dev)?,
        Scalar::F64 => Tensor::from_vec(words!(f64, 8).collect::<Vec<_>>(), shape, dev)?,
    };
    Ok(t)
}

/// Reverses a square row-major matrix along both axes, converting between
/// x, y, z ordering and array-axis ordering.
pub(crate) fn reverse_matrix(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] = m[(n - 1 - r) * n + (n - 1 - c)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], dtype: DType) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::arange(0u32, n as u32, &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
            .reshape(shape)
            .unwrap()
    }

    fn oblique_geometry() -> Geometry {
        let (s, c) = (0.3f64.sin(), 0.3f64.cos());
        Geometry {
            spacing: vec![3.0, 0.8, 1.25],
            origin: vec![-12.5, 4.0, 33.0],
            direction: vec![1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c],
        }
    }

    #[test]
    fn detects_formats_and_stems() {
        assert_eq!(detect_format(Path::new("a/b.nii.gz")).unwrap(), SourceFormat::Nifti);
        assert_eq!(detect_format(Path::new("x.MHA")).unwrap(), SourceFormat::MetaImage);
        assert_eq!(detect_format(Path::new("x.jpg")).unwrap(), SourceFormat::Raster);
        assert!(matches!(detect_format(Path::new("x.dcm")), Err(Error::Format(_))));
        assert_eq!(image_stem(Path::new("d/case_0001_0000.nii.gz")), "case_0001_0000");
    }

    #[test]
    fn unknown_extension_is_format_error() {
        let err = load_image("volume.xyz", None, &Device::Cpu).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn medical_round_trips_preserve_data_and_geometry() {
        let dir = tempfile::tempdir().unwrap();
        for ext in ["nii", "nii.gz", "mha", "mhd"] {
            for dtype in [DType::F32, DType::F64, DType::U8, DType::I64, DType::U32] {
                let data = ramp(&[2, 3, 4, 5], dtype);
                let vol = ImageVolume::new(data.clone(), oblique_geometry(), SourceFormat::Nifti).unwrap();
                let path = dir.path().join(format!("img_{dtype:?}.{ext}"));
                save_image(&vol, &path).unwrap();
                let back = load_image(&path, None, &Device::Cpu).unwrap();
                assert_eq!(back.data.dtype(), dtype, "{ext}");
                assert_eq!(back.data.dims(), data.dims());
                assert_eq!(tensor_le_bytes(&back.data).unwrap(), tensor_le_bytes(&data).unwrap(), "{ext} {dtype:?}");
                assert!(back.geometry.approx_eq(&vol.geometry, 1e-6), "{ext}: {:?}", back.geometry);
            }
        }
    }

    #[test]
    fn two_dimensional_medical_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let geometry = Geometry { spacing: vec![0.5, 2.0], origin: vec![1.0, -1.0], direction: vec![1.0, 0.0, 0.0, 1.0] };
        let vol = ImageVolume::new(ramp(&[1, 6, 7], DType::F32), geometry, SourceFormat::MetaImage).unwrap();
        for name in ["a.mha", "a.nii"] {
            let path = dir.path().join(name);
            save_image(&vol, &path).unwrap();
            let back = load_image(&path, None, &Device::Cpu).unwrap();
            assert_eq!(back.data.dims(), &[1, 6, 7]);
            assert!(back.geometry.approx_eq(&vol.geometry, 1e-6), "{name}");
        }
    }

    #[test]
    fn raster_is_three_channel_with_unit_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let img = image::RgbImage::from_fn(5, 4, |x, y| image::Rgb([x as u8 * 10, y as u8 * 20, 255]));
        img.save(&path).unwrap();
        let vol = load_image(&path, None, &Device::Cpu).unwrap();
        assert_eq!(vol.data.dims(), &[3, 4, 5]);
        assert_eq!(vol.geometry.spacing, vec![1.0, 1.0]);
        let blue = vol.data.get(2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(blue.iter().all(|&v| v == 1.0));
        let back = dir.path().join("back.png");
        save_image(&vol, &back).unwrap();
        let again = load_image(&back, None, &Device::Cpu).unwrap();
        let diff = (again.data - &vol.data).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn raster_masks_map_to_binary_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        image::GrayImage::from_fn(4, 4, |x, _| image::Luma([if x > 1 { 255 } else { 0 }])).save(&path).unwrap();
        let label = load_label(&path, None, &Device::Cpu).unwrap();
        assert_eq!(label.data.dtype(), DType::I64);
        let row = label.data.get(0).unwrap().get(0).unwrap().to_vec1::<i64>().unwrap();
        assert_eq!(row, vec![0, 0, 1, 1]);
    }

    #[test]
    fn isotropic_resampling_scales_axes() {
        let dir = tempfile::tempdir().unwrap();
        let geometry = Geometry { spacing: vec![3.0, 1.0, 1.0], origin: vec![0.0; 3], direction: Geometry::identity(3).direction };
        let vol = ImageVolume::new(ramp(&[1, 4, 5, 6], DType::F32), geometry, SourceFormat::Nifti).unwrap();
        let path = dir.path().join("aniso.nii.gz");
        save_image(&vol, &path).unwrap();
        let back = load_image(&path, Some(1.0), &Device::Cpu).unwrap();
        assert_eq!(back.data.dims(), &[1, 12, 5, 6]);
        assert_eq!(back.geometry.spacing, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_image("/nonexistent/img.nii", None, &Device::Cpu).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/img.nii"));
    }

    #[test]
    fn corrupt_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nii");
        std::fs::write(&path, b"not a nifti file").unwrap();
        let err = load_image(&path, None, &Device::Cpu).unwrap_err();
        assert!(err.to_string().contains("bad.nii"), "{err}");
    }
}
