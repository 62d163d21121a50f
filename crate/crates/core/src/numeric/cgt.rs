//! CGT1 binary tensor files: magic `CGT1`, u8 dtype code, u8 rank, one
//! little-endian u32 per extent, then raw little-endian scalars.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{DType, Real, Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"CGT1";

/// A decoded tensor in whatever precision it was stored in.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<AnyTensor> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected CGT1".into()));
    }
    if bytes.len() < 6 {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| fail(4, format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    if rank > MAX_RANK {
        return Err(fail(5, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| fail(pos, "truncated shape".into()))?;
        shape.push(u32::from_le_bytes(chunk.try_into().expect("4 bytes")) as usize);
        pos += 4;
    }
    let count: usize = shape.iter().product();
    let width = dtype.size();
    let payload = bytes.len() - pos;
    if payload != count * width {
        let at = pos + payload.min(count * width);
        return Err(fail(
            at,
            format!("payload holds {payload} bytes, shape {shape:?} needs {}", count * width),
        ));
    }
    let body = &bytes[pos..];
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::from_vec(shape, body.chunks(4).map(f32::read_le).collect())?),
        DType::F64 => AnyTensor::F64(Tensor::from_vec(shape, body.chunks(8).map(f64::read_le).collect())?),
    })
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_any(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    Ok(read_any(path)?.into_real())
}
