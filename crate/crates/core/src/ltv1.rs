//! The LTv1 tensor dump format.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"LTLT" | u32 version = 1 | u32 rank | u32 dims[rank] | f32 data[prod(dims)]
//! ```
//!
//! Data is row-major. Values are stored as `f32`; in-memory computation is
//! `f64`, so a write/read cycle rounds to single precision.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Frames;

pub const MAGIC: &[u8; 4] = b"LTLT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("{dims:?} = {n} values"), data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&x| x as f32).collect())
    }

    pub fn vector(data: &[f64]) -> Self {
        Self {
            dims: vec![data.len()],
            data: data.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn from_frames(f: &Frames) -> Self {
        Self {
            dims: vec![f.rows(), f.dim()],
            data: f.as_slice().iter().map(|&x| x as f32).collect(),
        }
    }

    /// Stack equally shaped frame matrices into a rank-3 tensor.
    pub fn stack(items: &[Frames]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Self::new(vec![0, 0, 0], vec![]);
        };
        let mut data = Vec::with_capacity(items.len() * first.as_slice().len());
        for it in items {
            first.check_same_shape(it)?;
            data.extend(it.as_slice().iter().map(|&x| x as f32));
        }
        Self::new(vec![items.len(), first.rows(), first.dim()], data)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| f64::from(x)).collect()
    }

    pub fn to_frames(&self) -> Result<Frames> {
        if self.dims.len() != 2 {
            return Err(Error::Format(format!(
                "expected a rank-2 tensor, found rank {}",
                self.dims.len()
            )));
        }
        Frames::from_vec(self.dims[0], self.dims[1], self.to_f64())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic bytes {magic:?}")));
        }
        let version = read_u32(&mut cur)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported LTv1 version {version}")));
        }
        let rank = read_u32(&mut cur)? as usize;
        let dims = (0..rank)
            .map(|_| read_u32(&mut cur).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        if cur.len() != 4 * n {
            return Err(Error::Format(format!(
                "payload holds {} bytes, dims {dims:?} need {}",
                cur.len(),
                4 * n
            )));
        }
        let data = cur
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes)
    }
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| Error::Format("truncated LTv1 header".into()))
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = t.encode();
        assert_eq!(&b[..4], b"LTLT");
        assert_eq!(u32::from_le_bytes([b[4], b[5], b[6], b[7]]), 1);
        assert_eq!(u32::from_le_bytes([b[8], b[9], b[10], b[11]]), 2);
        assert_eq!(b.len(), 12 + 8 + 8);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_corrupt_magic() {
        let mut b = Tensor::vector(&[1.0]).encode();
        b[0] = b'X';
        assert!(matches!(Tensor::decode(&b), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let b = Tensor::vector(&[1.0, 2.0]).encode();
        assert!(Tensor::decode(&b[..b.len() - 1]).is_err());
        assert!(Tensor::decode(&b[..6]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in proptest::collection::vec(0usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = Tensor::new(dims, data).unwrap();
            prop_assert_eq!(Tensor::decode(&t.encode()).unwrap(), t);
        }
    }
}
