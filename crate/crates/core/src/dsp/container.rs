//! `SPDN` array container: magic, version, dtype code, rank, dims, then row-major
//! little-endian values.

use std::path::Path;

use super::{DspError, Result};
use crate::fsutil::write_atomic;

const MAGIC: &[u8; 4] = b"SPDN";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum SpdnData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl SpdnData {
    fn len(&self) -> usize {
        match self {
            SpdnData::F32(v) => v.len(),
            SpdnData::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpdnArray {
    pub dims: Vec<usize>,
    pub data: SpdnData,
}

impl SpdnArray {
    pub fn new(dims: Vec<usize>, data: SpdnData) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(DspError::Container(format!(
                "dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.data {
            SpdnData::F32(_) => DTYPE_F32,
            SpdnData::F64(_) => DTYPE_F64,
        });
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            SpdnData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            SpdnData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| DspError::Container(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(DspError::Container(format!("unsupported version {version}")));
        }
        let dtype = bytes[6];
        let ndim = bytes[7] as usize;
        let mut pos = 8;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let b = bytes.get(pos..pos + 4).ok_or_else(|| bad("truncated dims"))?;
            dims.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
            pos += 4;
        }
        let n: usize = dims.iter().product();
        let body = &bytes[pos..];
        let data = match dtype {
            DTYPE_F32 if body.len() == 4 * n => SpdnData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DTYPE_F64 if body.len() == 8 * n => SpdnData::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DTYPE_F32 | DTYPE_F64 => return Err(bad("payload length does not match dims")),
            other => return Err(DspError::Container(format!("unknown dtype code {other}"))),
        };
        Ok(Self { dims, data })
    }
}

pub fn write_spdn(path: &Path, a: &SpdnArray) -> Result<()> {
    write_atomic(path, &a.to_bytes())?;
    Ok(())
}

pub fn read_spdn(path: &Path) -> Result<SpdnArray> {
    SpdnArray::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_dtypes() {
        for data in [
            SpdnData::F32(vec![1.5, -2.0, 3.25, 0.0, 7.0, 8.0]),
            SpdnData::F64(vec![1e-300, -2.0, 3.25, 0.0, 7.0, 8.0]),
        ] {
            let a = SpdnArray::new(vec![2, 3], data).unwrap();
            let b = SpdnArray::from_bytes(&a.to_bytes()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_corruption() {
        let a = SpdnArray::new(vec![2], SpdnData::F32(vec![1.0, 2.0])).unwrap();
        let mut bytes = a.to_bytes();
        assert!(SpdnArray::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(SpdnArray::from_bytes(&bytes).is_err());
        assert!(SpdnArray::new(vec![3], SpdnData::F32(vec![1.0])).is_err());
    }
}
