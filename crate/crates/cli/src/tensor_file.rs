//! Binary tensor files: 8-byte magic, `u32` element width, `u32` rank,
//! `u64` dims outer to inner, then little-endian element data.

use std::path::Path;

use anyhow::{Context, Result};

use crate::Coded;

pub const MAGIC: &[u8; 8] = b"PERMTNSR";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorFile {
    pub elem_width: usize,
    /// Outer-to-inner shape.
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.shape.len() + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.elem_width as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<TensorFile> {
        let bad = |msg: &str| Coded::new("E_FORMAT", msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing tensor file magic").into());
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let elem_width = u32_at(8);
        let rank = u32_at(12);
        let dims_end = 16 + 8 * rank;
        if bytes.len() < dims_end {
            return Err(bad("truncated tensor header").into());
        }
        let shape: Vec<usize> = (0..rank)
            .map(|k| u64::from_le_bytes(bytes[16 + 8 * k..24 + 8 * k].try_into().unwrap()) as usize)
            .collect();
        let want = shape.iter().product::<usize>() * elem_width;
        if bytes.len() - dims_end != want {
            return Err(bad(&format!("tensor data has {} bytes, header implies {want}", bytes.len() - dims_end)).into());
        }
        Ok(TensorFile {
            elem_width,
            shape,
            data: bytes[dims_end..].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<TensorFile> {
        let bytes = std::fs::read(path)
            .map_err(|e| Coded::new("E_IO", &format!("{}: {e}", path.display())))?;
        TensorFile::decode(&bytes).with_context(|| format!("reading {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Coded::new("E_IO", &format!("{}: {e}", path.display())))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let t = TensorFile {
            elem_width: 4,
            shape: vec![2, 3],
            data: (0..24).collect(),
        };
        let b = t.encode();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(b.len(), 16 + 16 + 24);
        assert_eq!(TensorFile::decode(&b).unwrap(), t);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TensorFile::decode(b"NOTATENSOR012345").is_err());
        let mut b = TensorFile {
            elem_width: 4,
            shape: vec![2],
            data: vec![0; 8],
        }
        .encode();
        b.pop();
        assert!(TensorFile::decode(&b).is_err());
    }
}
