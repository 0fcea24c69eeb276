//! Flat tensor archive, byte-compatible with the safetensors layout:
//! an 8-byte little-endian header length `N`, `N` bytes of JSON mapping
//! each name to `{dtype, shape, data_offsets}`, then the raw little-endian
//! buffers. Offsets are relative to the start of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::tensor_le_bytes;
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data_offsets: [usize; 2],
}

fn dtype_code(dtype: DType) -> Result<&'static str> {
    Ok(match dtype {
        DType::F32 => "F32",
        DType::F64 => "F64",
        DType::I64 => "I64",
        DType::U8 => "U8",
        DType::U32 => "U32",
        other => return Err(Error::Archive(format!("dtype {other:?} cannot be archived"))),
    })
}

fn code_dtype(code: &str) -> Result<DType> {
    Ok(match code {
        "F32" => DType::F32,
        "F64" => DType::F64,
        "I64" => DType::I64,
        "U8" => DType::U8,
        "U32" => DType::U32,
        other => return Err(Error::Archive(format!("unsupported dtype `{other}`"))),
    })
}

/// Serializes named tensors into archive bytes. Entries are laid out in
/// name order.
pub fn to_bytes(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let bytes = tensor_le_bytes(t)?;
        let entry = ArchiveEntry {
            dtype: dtype_code(t.dtype())?.to_string(),
            shape: t.dims().to_vec(),
            data_offsets: [payload.len(), payload.len() + bytes.len()],
        };
        header.insert(name.clone(), serde_json::to_value(entry)?);
        payload.extend(bytes);
    }
    let mut json = serde_json::to_vec(&header)?;
    json.resize(json.len().div_ceil(8) * 8, b' ');
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    out.extend(payload);
    Ok(out)
}

/// Parses and validates the header. Returns the entries and the payload
/// start offset.
pub fn parse_header(bytes: &[u8]) -> Result<(BTreeMap<String, ArchiveEntry>, usize)> {
    if bytes.len() < 8 {
        return Err(Error::Archive(format!("truncated: {} bytes, no header length", bytes.len())));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let start = usize::try_from(n).ok().and_then(|n| n.checked_add(8)).filter(|&s| s <= bytes.len()).ok_or_else(|| {
        Error::Archive(format!("truncated: header claims {n} bytes but file has {}", bytes.len() - 8))
    })?;
    let raw: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes[8..start])
        .map_err(|e| Error::Archive(format!("header is not a JSON object: {e}")))?;
    let mut entries = BTreeMap::new();
    for (name, value) in raw {
        if name == "__metadata__" {
            continue;
        }
        let entry: ArchiveEntry =
            serde_json::from_value(value).map_err(|e| Error::Archive(format!("entry `{name}`: {e}")))?;
        entries.insert(name, entry);
    }
    let payload_len = bytes.len() - start;
    let mut spans: Vec<(&str, [usize; 2])> = entries.iter().map(|(k, e)| (k.as_str(), e.data_offsets)).collect();
    spans.sort_by_key(|(_, o)| (o[0], o[1]));
    let mut prev: Option<(&str, usize)> = None;
    for (name, [begin, end]) in &spans {
        let entry = &entries[*name];
        let numel: usize = entry.shape.iter().product();
        let expected = numel * code_dtype(&entry.dtype)?.size_in_bytes();
        if begin > end || end - begin != expected {
            return Err(Error::Archive(format!(
                "`{name}`: offsets [{begin}, {end}) do not hold {expected} bytes for {} {:?}",
                entry.dtype, entry.shape
            )));
        }
        if *end > payload_len {
            return Err(Error::Archive(format!(
                "truncated: `{name}` ends at byte {end} but the payload has {payload_len}"
            )));
        }
        if let Some((other, other_end)) = prev {
            if *begin < other_end {
                return Err(Error::Archive(format!("overlapping offsets: `{other}` and `{name}`")));
            }
        }
        prev = Some((name, *end));
    }
    Ok((entries, start))
}

pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<BTreeMap<String, Tensor>> {
    let (entries, start) = parse_header(bytes)?;
    let payload = &bytes[start..];
    entries
        .into_iter()
        .map(|(name, e)| {
            let [begin, end] = e.data_offsets;
            let t = Tensor::from_raw_buffer(&payload[begin..end], code_dtype(&e.dtype)?, &e.shape, device)?;
            Ok((name, t))
        })
        .collect()
}

pub fn fast_save(tensors: &BTreeMap<String, Tensor>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(tensors)?).at(path)
}

pub fn fast_load(path: impl AsRef<Path>, device: &Device) -> Result<BTreeMap<String, Tensor>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).at(path)?;
    from_bytes(&bytes, device).map_err(|e| match e {
        Error::Archive(msg) => Error::Archive(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Reads only the header entries of an archive.
pub fn read_header(path: impl AsRef<Path>) -> Result<BTreeMap<String, ArchiveEntry>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).at(path)?;
    Ok(parse_header(&bytes)?.0)
}
