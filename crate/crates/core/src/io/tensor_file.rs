//! Binary tensor files.
//!
//! Layout, all little-endian:
//! - magic `SWUT`
//! - version: u16
//! - dtype: u8 (0 = f32, 1 = i32)
//! - rank: u8
//! - extents: rank * u64
//! - payload: row-major elements

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DenseField, LabelField};

pub const MAGIC: &[u8; 4] = b"SWUT";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32 { shape, .. } | TensorData::I32 { shape, .. } => shape,
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32 { .. } => 0,
            TensorData::I32 { .. } => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32 { data, .. } => data.len(),
            TensorData::I32 { data, .. } => data.len(),
        }
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n))
}

pub fn encode(t: &TensorData) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.is_empty() || shape.len() > usize::from(u8::MAX) {
        return Err(Error::InvalidArgument(format!("cannot store a tensor of rank {}", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidArgument("cannot store a tensor with an empty extent".into()));
    }
    if element_count(shape) != Some(t.len()) {
        return Err(Error::Shape(format!("{} elements for shape {shape:?}", t.len())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * shape.len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.dtype());
    out.push(shape.len() as u8);
    for &n in shape {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    match t {
        TensorData::F32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        TensorData::I32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Parses a tensor; `origin` names the source in errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<TensorData> {
    let bad = |reason: String| Error::format(origin, reason);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dtype = bytes[6];
    let rank = usize::from(bytes[7]);
    if rank == 0 {
        return Err(bad("rank 0".into()));
    }
    let dims_end = HEADER_LEN + 8 * rank;
    if bytes.len() < dims_end {
        return Err(bad("truncated extents".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for k in 0..rank {
        let raw: [u8; 8] = bytes[HEADER_LEN + 8 * k..HEADER_LEN + 8 * (k + 1)].try_into().expect("8-byte slice");
        let n = usize::try_from(u64::from_le_bytes(raw)).map_err(|_| bad("extent overflows usize".into()))?;
        if n == 0 {
            return Err(bad("empty extent".into()));
        }
        shape.push(n);
    }
    let count = element_count(&shape).ok_or_else(|| bad("extent product overflows".into()))?;
    let size = match dtype {
        0 | 1 => 4usize,
        other => return Err(bad(format!("unknown dtype code {other}"))),
    };
    let payload_len = count.checked_mul(size).ok_or_else(|| bad("payload size overflows".into()))?;
    let payload = &bytes[dims_end..];
    if payload.len() != payload_len {
        return Err(bad(format!("payload has {} bytes, expected {payload_len}", payload.len())));
    }
    let words = payload.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    Ok(match dtype {
        0 => TensorData::F32 {
            shape,
            data: words.map(f32::from_le_bytes).collect(),
        },
        _ => TensorData::I32 {
            shape,
            data: words.map(i32::from_le_bytes).collect(),
        },
    })
}

pub fn write_tensor(path: &Path, t: &TensorData) -> Result<()> {
    let bytes = encode(t)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn field_to_tensor(f: &DenseField) -> TensorData {
    TensorData::F32 {
        shape: f.shape().to_vec(),
        data: f.data().to_vec(),
    }
}

pub fn labels_to_tensor(l: &LabelField) -> Result<TensorData> {
    let data = l
        .data()
        .iter()
        .map(|&v| i32::try_from(v).map_err(|_| Error::InvalidArgument(format!("label {v} exceeds i32"))))
        .collect::<Result<_>>()?;
    Ok(TensorData::I32 {
        shape: l.shape().to_vec(),
        data,
    })
}

pub fn write_field(path: &Path, f: &DenseField) -> Result<()> {
    write_tensor(path, &field_to_tensor(f))
}

pub fn read_field(path: &Path) -> Result<DenseField> {
    match read_tensor(path)? {
        TensorData::F32 { shape, data } => DenseField::new(shape, data).map_err(|e| Error::format(path, e.to_string())),
        TensorData::I32 { .. } => Err(Error::format(path, "expected float32 data")),
    }
}

pub fn write_labels(path: &Path, l: &LabelField) -> Result<()> {
    write_tensor(path, &labels_to_tensor(l)?)
}

pub fn read_labels(path: &Path) -> Result<LabelField> {
    match read_tensor(path)? {
        TensorData::I32 { shape, data } => {
            let data = data
                .into_iter()
                .map(|v| u32::try_from(v).map_err(|_| Error::format(path, format!("negative label {v}"))))
                .collect::<Result<_>>()?;
            LabelField::new(shape, data).map_err(|e| Error::format(path, e.to_string()))
        }
        TensorData::F32 { .. } => Err(Error::format(path, "expected int32 labels")),
    }
}
