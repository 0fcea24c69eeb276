//! MetaImage (`.mha` with inline data, `.mhd` with a detached raw file).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::ZlibDecoder;

use super::{decode_buffer, reverse_matrix, tensor_le_bytes, Geometry, ImageVolume, Scalar, SourceFormat};
use crate::error::{Error, IoContext, Result};

fn element_type(name: &str) -> Option<Scalar> {
    Some(match name {
        "MET_UCHAR" => Scalar::U8,
        "MET_CHAR" => Scalar::I8,
        "MET_USHORT" => Scalar::U16,
        "MET_SHORT" => Scalar::I16,
        "MET_UINT" => Scalar::U32,
        "MET_INT" => Scalar::I32,
        "MET_LONG_LONG" => Scalar::I64,
        "MET_FLOAT" => Scalar::F32,
        "MET_DOUBLE" => Scalar::F64,
        _ => return None,
    })
}

fn element_name(scalar: Scalar) -> &'static str {
    match scalar {
        Scalar::U8 => "MET_UCHAR",
        Scalar::I8 => "MET_CHAR",
        Scalar::U16 => "MET_USHORT",
        Scalar::I16 => "MET_SHORT",
        Scalar::U32 => "MET_UINT",
        Scalar::I32 => "MET_INT",
        Scalar::I64 => "MET_LONG_LONG",
        Scalar::F32 => "MET_FLOAT",
        Scalar::F64 => "MET_DOUBLE",
    }
}

fn numbers(header: &BTreeMap<String, String>, key: &str) -> std::result::Result<Option<Vec<f64>>, String> {
    header
        .get(key)
        .map(|v| {
            v.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| format!("{key}: `{t}` is not a number")))
                .collect()
        })
        .transpose()
}

/// Splits the text header from the payload. The header ends with the
/// `ElementDataFile` line.
fn split_header(bytes: &[u8]) -> std::result::Result<(BTreeMap<String, String>, usize), String> {
    let mut header = BTreeMap::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| pos + i + 1);
        let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| "header is not text")?;
        pos = end;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| format!("malformed header line `{line}`"))?;
        let key = key.trim().to_string();
        let done = key == "ElementDataFile";
        header.insert(key, value.trim().to_string());
        if done {
            return Ok((header, pos));
        }
    }
    Err("header has no ElementDataFile entry".into())
}

pub(super) fn read(path: &Path) -> Result<ImageVolume> {
    let bytes = std::fs::read(path).at(path)?;
    parse(path, &bytes).map_err(|reason| match reason {
        Parse::Io(e) => e,
        Parse::Bad(reason) => Error::corrupt(path, reason),
    })
}

enum Parse {
    Io(Error),
    Bad(String),
}

impl From<String> for Parse {
    fn from(s: String) -> Self {
        Parse::Bad(s)
    }
}

impl From<&str> for Parse {
    fn from(s: &str) -> Self {
        Parse::Bad(s.to_string())
    }
}

fn parse(path: &Path, bytes: &[u8]) -> std::result::Result<ImageVolume, Parse> {
    let (header, data_start) = split_header(bytes)?;
    let dims: Vec<usize> = numbers(&header, "DimSize")?
        .ok_or("missing DimSize")?
        .into_iter()
        .map(|d| d as usize)
        .collect();
    let rank = dims.len();
    if let Some(n) = header.get("NDims") {
        if n.parse::<usize>().ok() != Some(rank) {
            return Err(format!("NDims {n} disagrees with DimSize").into());
        }
    }
    if !(2..=3).contains(&rank) {
        return Err(format!("only 2D and 3D images are supported, got {rank} dimensions").into());
    }
    let type_name = header.get("ElementType").ok_or("missing ElementType")?;
    let scalar = element_type(type_name).ok_or_else(|| format!("unsupported ElementType {type_name}"))?;
    let channels = header.get("ElementNumberOfChannels").map_or(Ok(1), |v| v.parse::<usize>()).map_err(|_| "bad ElementNumberOfChannels")?;
    let flag = |key: &str| header.get(key).is_some_and(|v| v.eq_ignore_ascii_case("true"));
    let big_endian = flag("BinaryDataByteOrderMSB") || flag("ElementByteOrderMSB");

    let file = &header["ElementDataFile"];
    let payload: Vec<u8> = if file == "LOCAL" {
        bytes[data_start..].to_vec()
    } else {
        let raw = path.parent().unwrap_or(Path::new(".")).join(file);
        std::fs::read(&raw).map_err(|e| Parse::Io(Error::io(raw, e)))?
    };
    let payload = if flag("CompressedData") {
        let mut out = Vec::new();
        ZlibDecoder::new(payload.as_slice()).read_to_end(&mut out).map_err(|e| format!("zlib stream: {e}"))?;
        out
    } else {
        payload
    };

    // Voxels are stored x fastest with channels interleaved.
    let mut stored: Vec<usize> = dims.iter().rev().copied().collect();
    stored.push(channels);
    let interleaved = decode_buffer(&payload, scalar, big_endian, &stored).map_err(|e| e.to_string())?;
    let mut order: Vec<usize> = vec![rank];
    order.extend(0..rank);
    let data = interleaved.permute(order).and_then(|t| t.contiguous()).map_err(|e| e.to_string())?;

    let spacing = numbers(&header, "ElementSpacing")?
        .or(numbers(&header, "ElementSize")?)
        .unwrap_or_else(|| vec![1.0; rank]);
    let origin = numbers(&header, "Offset")?
        .or(numbers(&header, "Origin")?)
        .or(numbers(&header, "Position")?)
        .unwrap_or_else(|| vec![0.0; rank]);
    let transform = numbers(&header, "TransformMatrix")?
        .or(numbers(&header, "Rotation")?)
        .or(numbers(&header, "Orientation")?)
        .unwrap_or_else(|| Geometry::identity(rank).direction);
    if spacing.len() != rank || origin.len() != rank || transform.len() != rank * rank {
        return Err("geometry entries do not match DimSize".into());
    }
    // TransformMatrix lists the direction of each axis in turn.
    let mut direction = vec![0.0; rank * rank];
    for axis in 0..rank {
        for comp in 0..rank {
            direction[comp * rank + axis] = transform[axis * rank + comp];
        }
    }
    let geometry = Geometry {
        spacing: spacing.into_iter().rev().collect(),
        origin: origin.into_iter().rev().collect(),
        direction: reverse_matrix(&direction, rank),
    };
    ImageVolume::new(data, geometry, SourceFormat::MetaImage).map_err(|e| Parse::Bad(e.to_string()))
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}

pub(super) fn write(vol: &ImageVolume, path: &Path) -> Result<()> {
    let scalar = Scalar::from_dtype(vol.data.dtype())?;
    let rank = vol.spatial_rank();
    let channels = vol.channels();
    let direction = reverse_matrix(&vol.geometry.direction, rank);
    let mut transform = Vec::with_capacity(rank * rank);
    for axis in 0..rank {
        for comp in 0..rank {
            transform.push(direction[comp * rank + axis]);
        }
    }
    let detached = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("mhd"));
    let raw_name = path.with_extension("raw");
    let data_file = if detached {
        raw_name.file_name().and_then(|n| n.to_str()).unwrap_or("data.raw").to_string()
    } else {
        "LOCAL".to_string()
    };
    let mut text = String::new();
    text.push_str("ObjectType = Image\n");
    text.push_str(&format!("NDims = {rank}\n"));
    text.push_str("BinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n");
    text.push_str(&format!("TransformMatrix = {}\n", join(transform)));
    text.push_str(&format!("Offset = {}\n", join(vol.geometry.origin.iter().rev().copied())));
    text.push_str("CenterOfRotation = ");
    text.push_str(&join(std::iter::repeat_n(0.0, rank)));
    text.push_str("\nAnatomicalOrientation = RAI\n");
    text.push_str(&format!("ElementSpacing = {}\n", join(vol.geometry.spacing.iter().rev().copied())));
    let dims: Vec<String> = vol.spatial_shape().iter().rev().map(|d| d.to_string()).collect();
    text.push_str(&format!("DimSize = {}\n", dims.join(" ")));
    if channels > 1 {
        text.push_str(&format!("ElementNumberOfChannels = {channels}\n"));
    }
    text.push_str(&format!("ElementType = {}\n", element_name(scalar)));
    text.push_str(&format!("ElementDataFile = {data_file}\n"));

    let mut order: Vec<usize> = (1..=rank).collect();
    order.push(0);
    let interleaved = vol.data.permute(order)?.contiguous()?;
    let payload = tensor_le_bytes(&interleaved)?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
    out.write_all(text.as_bytes()).at(path)?;
    if detached {
        out.flush().at(path)?;
        std::fs::write(&raw_name, &payload).at(&raw_name)?;
    } else {
        out.write_all(&payload).at(path)?;
        out.flush().at(path)?;
    }
    Ok(())
}
