//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DMIA1"
//! u32 metadata count, then per entry: u32 key len, key, u32 value len, value (UTF-8)
//! u32 block count, then per block:
//!     u32 name len, name (UTF-8), u32 rank, rank × u64 extents, extents-product × f64
//! ```
//!
//! Metadata is kept sorted by key so identical contents give identical bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::numerics::Tensor;

pub const MAGIC: &[u8; 5] = b"DMIA1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic: expected \"DMIA1\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("truncated checkpoint: {what} at offset {offset}")]
    Truncated { what: String, offset: usize },
    #[error("block {block:?}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        block: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing block {0:?}")]
    MissingBlock(String),
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("block {0:?} holds non-finite values")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub blocks: Vec<ParamBlock>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_owned(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str, CheckpointError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Metadata(format!("missing key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| CheckpointError::Metadata(format!("key {key:?}: cannot parse {raw:?}")))
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: &Tensor) {
        self.blocks.push(ParamBlock {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            values: tensor.data().to_vec(),
        });
    }

    pub fn block(&self, name: &str) -> Result<&ParamBlock, CheckpointError> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| CheckpointError::MissingBlock(name.to_owned()))
    }

    /// Block `name` as a tensor, checking it has `expected` shape.
    pub fn tensor(&self, name: &str, expected: &[usize]) -> Result<Tensor, CheckpointError> {
        let b = self.block(name)?;
        if b.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                block: name.to_owned(),
                expected: expected.to_vec(),
                found: b.shape.clone(),
            });
        }
        self.tensor_any(name)
    }

    /// Block `name` as a tensor of whatever shape it has.
    pub fn tensor_any(&self, name: &str) -> Result<Tensor, CheckpointError> {
        let b = self.block(name)?;
        Tensor::new(b.shape.clone(), b.values.clone()).map_err(|_| CheckpointError::NonFinite(name.to_owned()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            put_str(&mut out, &b.name);
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: bytes[..bytes.len().min(MAGIC.len())].to_vec(),
            });
        }
        let mut cur = Cursor {
            bytes,
            offset: MAGIC.len(),
        };
        let mut ckpt = Checkpoint::new();
        let n_meta = cur.u32("metadata count")?;
        for _ in 0..n_meta {
            let k = cur.string("metadata key")?;
            let v = cur.string("metadata value")?;
            ckpt.metadata.insert(k, v);
        }
        let n_blocks = cur.u32("block count")?;
        for _ in 0..n_blocks {
            let name = cur.string("block name")?;
            let rank = cur.u32("block rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64(&format!("extent of block {name:?}"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel.saturating_mul(8), &format!("values of block {name:?}"))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ckpt.blocks.push(ParamBlock { name, shape, values });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.offset < n {
            return Err(CheckpointError::Truncated {
                what: what.to_owned(),
                offset: self.offset,
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Metadata(format!("{what} is not UTF-8")))
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrong_magic_names_found_bytes() {
        let err = Checkpoint::from_bytes(b"NOPE!rest").unwrap_err();
        assert!(matches!(&err, CheckpointError::BadMagic { found } if found == b"NOPE!"));
        assert!(err.to_string().contains("[78, 79, 80, 69, 33]"), "{err}");
    }

    #[test]
    fn truncated_block_is_reported() {
        let mut c = Checkpoint::new();
        c.push("w", &Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let bytes = c.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated { ref what, .. } if what.contains("\"w\"")), "{err}");
    }

    #[test]
    fn shape_check_names_block() {
        let mut c = Checkpoint::new();
        c.push("layer.0.weight", &Tensor::zeros(vec![3, 2]).unwrap());
        let err = c.tensor("layer.0.weight", &[2, 3]).unwrap_err();
        assert!(err.to_string().contains("layer.0.weight"));
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/m.ckpt");
        let mut c = Checkpoint::new();
        c.set("seed", 7);
        c.push("x", &Tensor::new(vec![1, 3], vec![0.1, -0.2, 1e-300]).unwrap());
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(values in proptest::collection::vec(-1e6f64..1e6, 1..40),
                                      key in "[a-z]{1,8}", val in "[ -~]{0,20}") {
            let mut c = Checkpoint::new();
            c.set(&key, &val);
            let n = values.len();
            c.push("block", &Tensor::new(vec![n], values.clone()).unwrap());
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            let bits: Vec<u64> = back.blocks[0].values.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
            prop_assert_eq!(back, c);
        }
    }
}
