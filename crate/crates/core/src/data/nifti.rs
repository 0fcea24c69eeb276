//! NIfTI-1 single-file images (`.nii`, `.nii.gz`).

use std::io::{Read, Write};
use std::path::Path;

use candle_core::DType;
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;

use super::{decode_buffer, reverse_matrix, tensor_le_bytes, Geometry, ImageVolume, Scalar, SourceFormat};
use crate::error::{Error, IoContext, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

fn is_gz(path: &Path) -> bool {
    path.to_string_lossy().to_ascii_lowercase().ends_with(".gz")
}

fn datatype_scalar(code: i16) -> Option<Scalar> {
    Some(match code {
        2 => Scalar::U8,
        4 => Scalar::I16,
        8 => Scalar::I32,
        16 => Scalar::F32,
        64 => Scalar::F64,
        256 => Scalar::I8,
        512 => Scalar::U16,
        768 => Scalar::U32,
        1024 => Scalar::I64,
        _ => return None,
    })
}

fn scalar_datatype(scalar: Scalar) -> i16 {
    match scalar {
        Scalar::U8 => 2,
        Scalar::I16 => 4,
        Scalar::I32 => 8,
        Scalar::F32 => 16,
        Scalar::F64 => 64,
        Scalar::I8 => 256,
        Scalar::U16 => 512,
        Scalar::U32 => 768,
        Scalar::I64 => 1024,
    }
}

struct Fields<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Fields<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.buf[at], self.buf[at + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f64 {
        let b: [u8; 4] = self.buf[at..at + 4].try_into().unwrap();
        (if self.big_endian { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }) as f64
    }

    fn f32s<const N: usize>(&self, at: usize) -> [f64; N] {
        std::array::from_fn(|i| self.f32(at + 4 * i))
    }
}

pub(super) fn read(path: &Path) -> Result<ImageVolume> {
    let raw = std::fs::read(path).at(path)?;
    let bytes = if is_gz(path) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::corrupt(path, format!("gzip stream: {e}")))?;
        out
    } else {
        raw
    };
    parse(&bytes).map_err(|reason| Error::corrupt(path, reason))
}

fn parse(bytes: &[u8]) -> std::result::Result<ImageVolume, String> {
    if bytes.len() < HEADER_SIZE {
        return Err(format!("{} bytes is shorter than a NIfTI-1 header", bytes.len()));
    }
    let big_endian = match (i32::from_le_bytes(bytes[0..4].try_into().unwrap()), i32::from_be_bytes(bytes[0..4].try_into().unwrap())) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err("sizeof_hdr is not 348".into()),
    };
    if &bytes[344..347] != b"n+1" {
        return Err("missing `n+1` magic (only single-file NIfTI-1 is supported)".into());
    }
    let h = Fields { buf: bytes, big_endian };
    let ndim = h.i16(40);
    if !(2..=7).contains(&ndim) {
        return Err(format!("invalid dimension count {ndim}"));
    }
    let dim: Vec<usize> = (1..=7).map(|i| h.i16(40 + 2 * i).max(1) as usize).collect();
    let spatial_rank = if ndim >= 3 && dim[2] > 1 { 3 } else { 2 };
    if dim[3] > 1 {
        return Err("time series images are not supported".into());
    }
    let channels = dim[4];
    let code = h.i16(70);
    let scalar = datatype_scalar(code).ok_or_else(|| format!("unsupported datatype code {code}"))?;
    let pixdim: [f64; 8] = h.f32s(76);
    let vox_offset = h.f32(108) as usize;
    let (slope, inter) = (h.f32(112), h.f32(116));

    let mut shape = vec![channels];
    shape.extend(dim[..spatial_rank].iter().rev());
    let numel: usize = shape.iter().product();
    let start = vox_offset.max(HEADER_SIZE);
    let end = start + numel * scalar.size();
    if bytes.len() < end {
        return Err(format!("voxel data truncated: {} of {} bytes", bytes.len().saturating_sub(start), end - start));
    }
    let mut data = decode_buffer(&bytes[start..end], scalar, big_endian, &shape).map_err(|e| e.to_string())?;
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        data = data
            .to_dtype(DType::F32)
            .and_then(|d| d.affine(slope, inter))
            .map_err(|e| e.to_string())?;
    }

    // Affine in x, y, z order, RAS: world = m * index + offset.
    let (m, offset) = if h.i16(254) > 0 {
        let rows: [[f64; 4]; 3] = [h.f32s(280), h.f32s(296), h.f32s(312)];
        let m = [0, 1, 2].map(|r| [rows[r][0], rows[r][1], rows[r][2]]);
        (m, [rows[0][3], rows[1][3], rows[2][3]])
    } else if h.i16(252) > 0 {
        let [b, c, d] = h.f32s::<3>(256);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let rot = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [pixdim[1], pixdim[2], pixdim[3] * qfac];
        let m = [0, 1, 2].map(|r| [0, 1, 2].map(|col| rot[r][col] * scale[col]));
        (m, h.f32s(268))
    } else {
        // No orientation stored: identity in LPS, which is a flipped RAS diagonal.
        let flip = [-1.0, -1.0, 1.0];
        let m = [0, 1, 2].map(|r| [0, 1, 2].map(|col| if r == col { flip[r] * pixdim[col + 1].abs().max(1e-12) } else { 0.0 }));
        (m, [0.0; 3])
    };
    let geometry = geometry_from_affine(&m, &offset, spatial_rank)?;
    ImageVolume::new(data, geometry, SourceFormat::Nifti).map_err(|e| e.to_string())
}

/// Converts a RAS affine in x, y, z order into LPS geometry in array order.
fn geometry_from_affine(m: &[[f64; 3]; 3], offset: &[f64; 3], rank: usize) -> std::result::Result<Geometry, String> {
    let lps = |r: usize| if r < 2 { -1.0 } else { 1.0 };
    let mut spacing = Vec::with_capacity(rank);
    let mut direction = vec![0.0; rank * rank];
    for col in 0..rank {
        let norm = (0..3).map(|r| m[r][col] * m[r][col]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(format!("degenerate affine column {col}"));
        }
        spacing.push(norm);
        for r in 0..rank {
            direction[r * rank + col] = lps(r) * m[r][col] / norm;
        }
    }
    let origin: Vec<f64> = (0..rank).map(|r| lps(r) * offset[r]).collect();
    Ok(Geometry {
        spacing: spacing.into_iter().rev().collect(),
        origin: origin.into_iter().rev().collect(),
        direction: reverse_matrix(&direction, rank),
    })
}

pub(super) fn write(vol: &ImageVolume, path: &Path) -> Result<()> {
    let scalar = Scalar::from_dtype(vol.data.dtype())?;
    let rank = vol.spatial_rank();
    let shape = vol.data.dims();
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, at: usize, v: f64| h[at..at + 4].copy_from_slice(&(v as f32).to_le_bytes());
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let channels = shape[0];
    let ndim: i16 = if channels > 1 { 5 } else { rank as i16 };
    put_i16(&mut h, 40, ndim);
    let mut dims = [1usize; 7];
    for (i, &d) in shape[1..].iter().rev().enumerate() {
        dims[i] = d;
    }
    dims[4] = channels;
    for (i, &d) in dims.iter().enumerate() {
        let d = i16::try_from(d).map_err(|_| Error::Format(format!("axis length {d} exceeds NIfTI-1 limits")))?;
        put_i16(&mut h, 42 + 2 * i, d);
    }
    put_i16(&mut h, 70, scalar_datatype(scalar));
    put_i16(&mut h, 72, 8 * scalar.size() as i16);

    // Back to x, y, z order, RAS.
    let spacing: Vec<f64> = vol.geometry.spacing.iter().rev().copied().collect();
    let origin: Vec<f64> = vol.geometry.origin.iter().rev().copied().collect();
    let direction = reverse_matrix(&vol.geometry.direction, rank);
    let ras = |r: usize| if r < 2 { -1.0 } else { 1.0 };
    put_f32(&mut h, 76, 1.0);
    for (i, s) in spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, *s);
    }
    if rank == 2 {
        put_f32(&mut h, 88, 1.0);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f64);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2 | (8 << 3); // xyzt_units: mm, s
    put_i16(&mut h, 254, 1);
    for r in 0..3 {
        let mut row = [0.0; 4];
        for col in 0..3 {
            row[col] = match (r < rank, col < rank) {
                (true, true) => ras(r) * direction[r * rank + col] * spacing[col],
                (false, false) if r == col => 1.0,
                _ => 0.0,
            };
        }
        row[3] = if r < rank { ras(r) * origin[r] } else { 0.0 };
        for (i, v) in row.iter().enumerate() {
            put_f32(&mut h, 280 + 16 * r + 4 * i, *v);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(&tensor_le_bytes(&vol.data)?);

    let file = std::fs::File::create(path).at(path)?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, flate2::Compression::fast());
        enc.write_all(&h).at(path)?;
        enc.finish().at(path)?;
    } else {
        let mut file = std::io::BufWriter::new(file);
        file.write_all(&h).at(path)?;
        file.flush().at(path)?;
    }
    Ok(())
}
