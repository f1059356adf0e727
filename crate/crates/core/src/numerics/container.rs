//! Named-tensor container used for checkpoints and detector models.
//!
//! Layout: 4-byte magic, version byte, 32-byte config hash, `u32` record
//! count, then per record a `u16` name length, the UTF-8 name and a PMT1
//! tensor. A `u32`-length-prefixed JSON trailer closes the file.

use std::fs;
use std::path::Path;

use super::io::{decode_pmt1, encode_pmt1, AnyTensor};
use super::{NumericsError, Scalar, Tensor};

pub const CONTAINER_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub config_hash: [u8; 32],
    pub records: Vec<(String, AnyTensor)>,
    pub trailer: serde_json::Value,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8], NumericsError> {
    if bytes.len().saturating_sub(*pos) < n {
        return Err(NumericsError::Truncated(format!("{what} at offset {pos}")));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

impl Container {
    pub fn new(magic: [u8; 4], config_hash: [u8; 32]) -> Self {
        Self {
            magic,
            config_hash,
            records: Vec::new(),
            trailer: serde_json::Value::Null,
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let any = if T::DTYPE == 0 {
            AnyTensor::F32(tensor.cast())
        } else {
            AnyTensor::F64(tensor.cast())
        };
        self.records.push((name.into(), any));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Typed lookup with a structured error naming the missing record.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>, NumericsError> {
        let t = self.get(name).ok_or_else(|| NumericsError::Record {
            name: name.to_string(),
            reason: "missing".into(),
        })?;
        t.clone().into_typed().map_err(|e| NumericsError::Record {
            name: name.to_string(),
            reason: e.to_string(),
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>, NumericsError> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.push(CONTAINER_VERSION);
        out.extend_from_slice(&self.config_hash);
        let count = u32::try_from(self.records.len()).map_err(|_| NumericsError::ExtentOverflow)?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.records {
            let len = u16::try_from(name.len()).map_err(|_| NumericsError::Record {
                name: name.clone(),
                reason: "name longer than 65535 bytes".into(),
            })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match t {
                AnyTensor::F32(t) => encode_pmt1(t, &mut out)?,
                AnyTensor::F64(t) => encode_pmt1(t, &mut out)?,
            }
        }
        let json = serde_json::to_vec(&self.trailer).map_err(|e| NumericsError::Json(e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| NumericsError::ExtentOverflow)?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    /// Decodes, insisting on `magic` so one artifact kind cannot be loaded as another.
    pub fn decode(bytes: &[u8], magic: &[u8; 4]) -> Result<Self, NumericsError> {
        let mut pos = 0;
        let found = take(bytes, &mut pos, 4, "magic")?;
        if found != magic {
            return Err(NumericsError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let version = take(bytes, &mut pos, 1, "version")?[0];
        if version != CONTAINER_VERSION {
            return Err(NumericsError::Version(version));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(take(bytes, &mut pos, 32, "config hash")?);
        let count = u32::from_le_bytes(take(bytes, &mut pos, 4, "record count")?.try_into().unwrap());
        let mut records = Vec::new();
        for i in 0..count {
            let len = u16::from_le_bytes(take(bytes, &mut pos, 2, "record name length")?.try_into().unwrap());
            let name_bytes = take(bytes, &mut pos, len as usize, "record name")?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| NumericsError::Record {
                name: format!("#{i}"),
                reason: "name is not UTF-8".into(),
            })?;
            let (t, used) = decode_pmt1(&bytes[pos..]).map_err(|e| NumericsError::Record {
                name: name.clone(),
                reason: e.to_string(),
            })?;
            pos += used;
            records.push((name, t));
        }
        let len = u32::from_le_bytes(take(bytes, &mut pos, 4, "trailer length")?.try_into().unwrap());
        let json = take(bytes, &mut pos, len as usize, "trailer")?;
        let trailer = serde_json::from_slice(json).map_err(|e| NumericsError::Json(e.to_string()))?;
        if pos != bytes.len() {
            return Err(NumericsError::Shape(format!("{} trailing bytes after container", bytes.len() - pos)));
        }
        let mut magic_arr = [0u8; 4];
        magic_arr.copy_from_slice(magic);
        Ok(Self {
            magic: magic_arr,
            config_hash,
            records,
            trailer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), NumericsError> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path, magic: &[u8; 4]) -> Result<Self, NumericsError> {
        Self::decode(&fs::read(path)?, magic)
    }
}
