//! Binary checkpoint format.
//!
//! ```text
//! "CAGN" | version u32 | count u64 |
//! count x { name_len u32 | name | ndim u8 | dims u64[ndim] | dtype u8 | payload }
//! | sha256 of everything before it (32 bytes)
//! ```
//! All integers and payloads are little-endian. Entries are written in name
//! order.

use cagn_core::{DType, Error, Result, Tensor};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CAGN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            StoredTensor::F32(t) => t.to_le_bytes(),
            StoredTensor::F64(t) => t.to_le_bytes(),
        }
    }
}

pub type Checkpoint = BTreeMap<String, StoredTensor>;

pub fn from_f32(map: &BTreeMap<String, Tensor<f32>>) -> Checkpoint {
    map.iter().map(|(k, v)| (k.clone(), StoredTensor::F32(v.clone()))).collect()
}

/// Every entry as `f32`; other dtypes are a format error.
pub fn to_f32(ck: &Checkpoint) -> Result<BTreeMap<String, Tensor<f32>>> {
    ck.iter()
        .map(|(k, v)| match v {
            StoredTensor::F32(t) => Ok((k.clone(), t.clone())),
            StoredTensor::F64(_) => Err(Error::Format(format!("entry {} is f64, expected f32", k))),
        })
        .collect()
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ck.len() as u64).to_le_bytes());
    for (name, t) in ck {
        let nb = name.as_bytes();
        let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::Format(format!("{} has too many dims", name)))?;
        out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(ndim);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(t.dtype().tag());
        out.extend_from_slice(&t.payload());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
    }
    let count = r.u64()?;
    let mut out = Checkpoint::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("entry name is not utf-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("entry {} is too large", name)))?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {}", tag)))?;
        let raw = r.take(numel.checked_mul(dtype.size()).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
        let t = match dtype {
            DType::F32 => StoredTensor::F32(Tensor::new(
                shape,
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            )?),
            DType::F64 => StoredTensor::F64(Tensor::new(
                shape,
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            )?),
        };
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate entry {}", name)));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(out)
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("checkpoint {}", path.display())),
        _ => Error::Io(format!("{}: {}", path.display(), e)),
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("b".into(), StoredTensor::F32(Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()));
        ck.insert("a".into(), StoredTensor::F64(Tensor::new(vec![3], vec![0.1, 1e-300, -2.0]).unwrap()));
        ck.insert("s".into(), StoredTensor::F32(Tensor::scalar(7.0)));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = encode(&ck).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        assert_eq!(back.keys().collect::<Vec<_>>(), vec!["a", "b", "s"]);
    }

    #[test]
    fn corruption_is_refused() {
        let mut bytes = encode(&sample()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        assert!(decode(&bytes[..10]).is_err());
    }
}
