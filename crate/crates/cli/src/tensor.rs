//! CSTN tensor files.
//!
//! Layout (little-endian): `b"CSTN"`, version byte `0x01`, `u32` rank,
//! `rank` `u32` dimensions, then the row-major `f32` payload. One tensor
//! per file.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CSTN";
pub const VERSION: u8 = 0x01;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"CSTN\"")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("{dims:?} does not hold {len} values")]
    Shape { dims: Vec<u32>, len: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self, TensorError> {
        if element_count(&dims) != Some(data.len()) {
            return Err(TensorError::Shape { dims, len: data.len() });
        }
        Ok(Self { dims, data })
    }

    /// Narrows `f64` values to `f32`.
    pub fn from_f64(dims: Vec<u32>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Size of the header that precedes the payload.
    pub fn header_len(&self) -> usize {
        header_len(self.rank())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Magic(magic));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != VERSION {
            return Err(TensorError::Version(version[0]));
        }
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank).map(|_| read_u32(&mut r)).collect::<io::Result<Vec<_>>>()?;
        let len = element_count(&dims).ok_or_else(|| TensorError::Shape { dims: dims.clone(), len: usize::MAX })?;
        let mut bytes = vec![0u8; len.checked_mul(4).ok_or(TensorError::Shape { dims: dims.clone(), len })?];
        r.read_exact(&mut bytes)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(TensorError::Trailing(rest.len()));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub fn header_len(rank: usize) -> usize {
    MAGIC.len() + 1 + 4 + 4 * rank
}

fn element_count(dims: &[u32]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_bytes() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut expected = b"CSTN\x01".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(t.header_len(), 13);
        assert_eq!(Tensor::read_from(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![1, 2], vec![0.5, 0.25]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::read_from(&bad[..]), Err(TensorError::Magic(_))));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(Tensor::read_from(&bad[..]), Err(TensorError::Version(2))));
        assert!(Tensor::read_from(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(Tensor::read_from(&long[..]), Err(TensorError::Trailing(1))));
        assert!(Tensor::new(vec![3], vec![0.0]).is_err());
    }

    #[test]
    fn scalar_and_empty() {
        for t in [Tensor::new(vec![], vec![7.0]).unwrap(), Tensor::new(vec![0, 3], vec![]).unwrap()] {
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            assert_eq!(Tensor::read_from(&buf[..]).unwrap(), t);
        }
    }
}
