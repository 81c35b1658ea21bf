//! Binary tensor record stream shared by dataset bundles and checkpoints.
//!
//! Layout (little-endian): magic `APNTEN1\0`, u32 record count, then per
//! record a u16 name length, the UTF-8 name, a u8 dtype code, a u8 rank,
//! `rank` u64 dimensions and the raw row-major payload.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const TENSOR_MAGIC: &[u8; 8] = b"APNTEN1\0";
const MAGIC_STEM: &[u8; 6] = b"APNTEN";
pub const TENSOR_FORMAT_VERSION: u32 = 1;

/// A decoded tensor of either supported element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type.
    pub fn to<T: Float>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t,
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

fn encode_one<T: Float>(name: &str, t: &Tensor<T>, out: &mut impl Write) -> std::io::Result<()> {
    let name_bytes = name.as_bytes();
    let name_len = u16::try_from(name_bytes.len()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "tensor name too long")
    })?;
    out.write_all(&name_len.to_le_bytes())?;
    out.write_all(name_bytes)?;
    out.write_all(&[T::DTYPE.code(), t.ndim() as u8])?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut payload);
    }
    out.write_all(&payload)
}

/// Borrowed view used when writing.
#[derive(Clone, Copy, Debug)]
pub enum TensorRef<'a> {
    F32(&'a Tensor<f32>),
    F64(&'a Tensor<f64>),
}

impl<'a> From<&'a AnyTensor> for TensorRef<'a> {
    fn from(t: &'a AnyTensor) -> Self {
        match t {
            AnyTensor::F32(t) => TensorRef::F32(t),
            AnyTensor::F64(t) => TensorRef::F64(t),
        }
    }
}

pub fn write_records<'a>(
    records: impl ExactSizeIterator<Item = (String, TensorRef<'a>)>,
    out: &mut impl Write,
) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        match t {
            TensorRef::F32(t) => encode_one(&name, t, out)?,
            TensorRef::F64(t) => encode_one(&name, t, out)?,
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("expected {n} bytes of {what} at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

fn decode_payload<T: Float>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect()
}

/// Checks an 8-byte magic, distinguishing a foreign file from a different
/// version of our own format (`stem` followed by a version digit).
pub(crate) fn check_magic(
    found: &[u8],
    expected: &[u8; 8],
    stem: &[u8],
    path: &Path,
) -> Result<()> {
    if found == expected {
        return Ok(());
    }
    if found.len() == 8 && found.starts_with(stem) {
        let version_byte = found[stem.len()];
        if version_byte.is_ascii_digit() {
            let want = (expected[stem.len()] - b'0') as u32;
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: (version_byte - b'0') as u32,
                expected: want,
            });
        }
    }
    Err(Error::BadMagic {
        path: path.to_path_buf(),
    })
}

/// Decodes a record stream. Returns the records and the number of bytes consumed.
pub fn read_records(bytes: &[u8], path: &Path) -> Result<(Vec<(String, AnyTensor)>, usize)> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let magic = cur.take(8, "magic").map_err(|_| Error::BadMagic {
        path: path.to_path_buf(),
    })?;
    check_magic(magic, TENSOR_MAGIC, MAGIC_STEM, path)?;
    let count = cur.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| {
                Error::InvalidData(format!("non UTF-8 tensor name in {}", path.display()))
            })?
            .to_string();
        let dtype_code = cur.u8("dtype")?;
        let dtype = DType::from_code(dtype_code).ok_or_else(|| {
            Error::InvalidData(format!(
                "unknown dtype {dtype_code} for tensor {name} in {}",
                path.display()
            ))
        })?;
        let ndim = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidData(format!("tensor {name} is too large")))?;
        let nbytes = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::InvalidData(format!("tensor {name} is too large")))?;
        let raw = cur.take(nbytes, &format!("payload of {name}"))?;
        let bad_shape =
            |e: Error| Error::InvalidData(format!("tensor {name} in {}: {e}", path.display()));
        let tensor = match dtype {
            DType::F32 => {
                AnyTensor::F32(Tensor::new(shape, decode_payload(raw)).map_err(bad_shape)?)
            }
            DType::F64 => {
                AnyTensor::F64(Tensor::new(shape, decode_payload(raw)).map_err(bad_shape)?)
            }
        };
        records.push((name, tensor));
    }
    Ok((records, cur.pos))
}
