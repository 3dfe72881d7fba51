//! Little-endian tensor files.
//!
//! ```text
//! "AMDE" | u32 version = 1 | u8 dtype (0 = f32) | u8 ndim | ndim x u32 dims | payload
//! ```
//!
//! Depth maps use `ndim = 2` (`H, W`), feature maps `ndim = 3` (`C, H, W`).
//! The payload is row-major `f32` with no padding anywhere. Validity masks
//! and pyramid levels are not stored.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DepthMap, FeatureMap};

pub const MAGIC: &[u8; 4] = b"AMDE";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// A decoded file before it is interpreted as a depth or feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if !(dims.len() == 2 || dims.len() == 3) {
            return Err(Error::Format(format!("unsupported rank {}", dims.len())));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} hold {n} values, payload has {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |n: usize| -> Result<()> {
            if bytes.len() < n {
                Err(Error::Truncated { expected: n, found: bytes.len() })
            } else {
                Ok(())
            }
        };
        need(4)?;
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        need(10)?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        if bytes[8] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype {}", bytes[8])));
        }
        let ndim = bytes[9] as usize;
        if !(ndim == 2 || ndim == 3) {
            return Err(Error::Format(format!("unsupported rank {ndim}")));
        }
        let header = 10 + 4 * ndim;
        need(header)?;
        let dims: Vec<usize> = bytes[10..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if dims.contains(&0) {
            return Err(Error::Format(format!("zero-sized dimension in {dims:?}")));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let total = header + 4 * count;
        need(total)?;
        if bytes.len() > total {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - total)));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }

    fn widened(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

impl From<&FeatureMap> for RawTensor {
    fn from(m: &FeatureMap) -> Self {
        RawTensor {
            dims: vec![m.channels(), m.height(), m.width()],
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }
}

impl From<&DepthMap> for RawTensor {
    fn from(m: &DepthMap) -> Self {
        RawTensor { dims: vec![m.height(), m.width()], data: m.data().iter().map(|&v| v as f32).collect() }
    }
}

impl RawTensor {
    pub fn into_feature(self, level: u8) -> Result<FeatureMap> {
        if self.dims.len() != 3 {
            return Err(Error::Shape(format!("feature map needs 3 dims, file has {}", self.dims.len())));
        }
        let data = self.widened();
        FeatureMap::new(level, self.dims[0], self.dims[1], self.dims[2], data)
    }

    pub fn into_depth(self) -> Result<DepthMap> {
        if self.dims.len() != 2 {
            return Err(Error::Shape(format!("depth map needs 2 dims, file has {}", self.dims.len())));
        }
        let data = self.widened();
        DepthMap::new(self.dims[0], self.dims[1], data)
    }
}

pub fn write_raw(path: impl AsRef<Path>, t: &RawTensor) -> Result<()> {
    fs::write(path, t.to_bytes())?;
    Ok(())
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawTensor> {
    RawTensor::from_bytes(&fs::read(path)?)
}

pub fn write_feature(path: impl AsRef<Path>, m: &FeatureMap) -> Result<()> {
    write_raw(path, &RawTensor::from(m))
}

pub fn read_feature(path: impl AsRef<Path>, level: u8) -> Result<FeatureMap> {
    read_raw(path)?.into_feature(level)
}

pub fn write_depth(path: impl AsRef<Path>, m: &DepthMap) -> Result<()> {
    write_raw(path, &RawTensor::from(m))
}

pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    read_raw(path)?.into_depth()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_packed() {
        let t = RawTensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let b = t.to_bytes();
        assert_eq!(b.len(), 4 + 4 + 1 + 1 + 2 * 4 + 6 * 4);
        assert_eq!(&b[..4], b"AMDE");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 0);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..14], &[2, 0, 0, 0]);
        assert_eq!(&b[18..22], &1.0f32.to_le_bytes());
    }

    #[test]
    fn feature_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.amde");
        let m = FeatureMap::from_fn(2, 2, 3, 4, |c, y, x| f64::from(((c * 12 + y * 4 + x) as f32) * 0.37 - 1.1)).unwrap();
        write_feature(&path, &m).unwrap();
        let back = read_feature(&path, 2).unwrap();
        let bits = |m: &FeatureMap| m.data().iter().map(|&v| (v as f32).to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&back));
        assert_eq!(back.level(), 2);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut b = RawTensor::new(vec![1, 1], vec![0.0]).unwrap().to_bytes();
        b[0] = b'X';
        assert!(matches!(RawTensor::from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn rank_mismatch_is_shape_error() {
        let b = RawTensor::new(vec![1, 2, 2], vec![0.0; 4]).unwrap().to_bytes();
        let raw = RawTensor::from_bytes(&b).unwrap();
        assert!(matches!(raw.clone().into_depth(), Err(Error::Shape(_))));
        let b2 = RawTensor::new(vec![2, 2], vec![0.0; 4]).unwrap().to_bytes();
        assert!(matches!(RawTensor::from_bytes(&b2).unwrap().into_feature(1), Err(Error::Shape(_))));
    }

    #[test]
    fn short_file_is_truncation_error() {
        let b = RawTensor::new(vec![2, 2], vec![0.0; 4]).unwrap().to_bytes();
        for cut in [2, 9, 15, b.len() - 1] {
            assert!(matches!(RawTensor::from_bytes(&b[..cut]), Err(Error::Truncated { .. })), "cut {cut}");
        }
    }

    #[test]
    fn bad_version_dtype_rank() {
        let good = RawTensor::new(vec![1, 1], vec![0.0]).unwrap().to_bytes();
        let mut v = good.clone();
        v[4] = 2;
        assert!(matches!(RawTensor::from_bytes(&v), Err(Error::Format(_))));
        let mut d = good.clone();
        d[8] = 1;
        assert!(matches!(RawTensor::from_bytes(&d), Err(Error::Format(_))));
        let mut r = good;
        r[9] = 4;
        assert!(matches!(RawTensor::from_bytes(&r), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(h in 1usize..6, w in 1usize..6, bits in proptest::collection::vec(any::<u32>(), 36)) {
            let data: Vec<f32> = bits[..h * w].iter().map(|&b| f32::from_bits(b)).collect();
            let t = RawTensor::new(vec![h, w], data).unwrap();
            let back = RawTensor::from_bytes(&t.to_bytes()).unwrap();
            let a: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(t.dims, back.dims);
        }
    }
}
