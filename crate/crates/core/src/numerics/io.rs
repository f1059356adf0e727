//! PMT1 tensor encoding.
//!
//! Layout: `b"PMT1"`, one dtype byte (0 = f32, 1 = f64), one ndim byte,
//! `ndim` little-endian `u32` extents, then the row-major little-endian
//! payload. No padding and no checksum.

use std::fs;
use std::path::Path;

use super::{NumericsError, Scalar, Tensor};

pub const PMT1_MAGIC: &[u8; 4] = b"PMT1";

/// A decoded tensor of either supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> u8 {
        match self {
            AnyTensor::F32(_) => 0,
            AnyTensor::F64(_) => 1,
        }
    }

    /// Converts to the requested element type, refusing lossy narrowing.
    pub fn into_typed<T: Scalar>(self) -> Result<Tensor<T>, NumericsError> {
        match self {
            AnyTensor::F32(t) if T::DTYPE == 0 => Ok(t.cast()),
            AnyTensor::F64(t) if T::DTYPE == 1 => Ok(t.cast()),
            AnyTensor::F32(t) => Ok(t.cast()),
            other => Err(NumericsError::Dtype {
                expected: T::DTYPE,
                found: other.dtype(),
            }),
        }
    }
}

pub fn encode_pmt1<T: Scalar>(tensor: &Tensor<T>, out: &mut Vec<u8>) -> Result<(), NumericsError> {
    if tensor.ndim() > u8::MAX as usize {
        return Err(NumericsError::Shape("more than 255 dimensions".into()));
    }
    out.reserve(6 + 4 * tensor.ndim() + T::WIDTH * tensor.len());
    out.extend_from_slice(PMT1_MAGIC);
    out.push(T::DTYPE);
    out.push(tensor.ndim() as u8);
    for &e in tensor.shape() {
        let e = u32::try_from(e).map_err(|_| NumericsError::ExtentOverflow)?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(out);
    }
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8], NumericsError> {
    let end = pos.checked_add(n).ok_or(NumericsError::ExtentOverflow)?;
    if end > bytes.len() {
        return Err(NumericsError::Truncated(format!(
            "{what}: need {n} bytes at offset {pos}, have {}",
            bytes.len().saturating_sub(*pos)
        )));
    }
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn decode_payload<T: Scalar>(
    bytes: &[u8],
    pos: &mut usize,
    shape: Vec<usize>,
    count: usize,
) -> Result<Tensor<T>, NumericsError> {
    let nbytes = count.checked_mul(T::WIDTH).ok_or(NumericsError::ExtentOverflow)?;
    let payload = take(bytes, pos, nbytes, "payload")?;
    let data = payload.chunks_exact(T::WIDTH).map(T::read_le).collect();
    Tensor::new(shape, data)
}

/// Decodes one tensor starting at `bytes[0]`; returns it and the bytes consumed.
pub fn decode_pmt1(bytes: &[u8]) -> Result<(AnyTensor, usize), NumericsError> {
    let mut pos = 0;
    let magic = take(bytes, &mut pos, 4, "magic")?;
    if magic != PMT1_MAGIC {
        return Err(NumericsError::BadMagic {
            expected: "PMT1".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let head = take(bytes, &mut pos, 2, "header")?;
    let (dtype, ndim) = (head[0], head[1] as usize);
    let mut shape = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for _ in 0..ndim {
        let e = take(bytes, &mut pos, 4, "extent")?;
        let e = u32::from_le_bytes(e.try_into().unwrap()) as usize;
        count = count.checked_mul(e).ok_or(NumericsError::ExtentOverflow)?;
        shape.push(e);
    }
    let t = match dtype {
        0 => AnyTensor::F32(decode_payload(bytes, &mut pos, shape, count)?),
        1 => AnyTensor::F64(decode_payload(bytes, &mut pos, shape, count)?),
        d => return Err(NumericsError::UnknownDtype(d)),
    };
    Ok((t, pos))
}

pub fn write_tensor<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<(), NumericsError> {
    let mut buf = Vec::new();
    encode_pmt1(tensor, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor_any(path: &Path) -> Result<AnyTensor, NumericsError> {
    let bytes = fs::read(path)?;
    let (t, used) = decode_pmt1(&bytes)?;
    if used != bytes.len() {
        return Err(NumericsError::Shape(format!(
            "{} trailing bytes after tensor",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>, NumericsError> {
    read_tensor_any(path)?.into_typed()
}
