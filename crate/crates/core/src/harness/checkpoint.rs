//! Binary run checkpoints.
//!
//! Layout (little-endian): magic `ALHP1`, u32 version, u32-prefixed config
//! text, u32-prefixed JSON metadata, u32 block count, then per block a
//! u32-prefixed name, a u8 element width (4 or 8), u32 rank, u64 dims and the
//! raw values.

use std::path::Path;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

pub const MAGIC: &[u8; 5] = b"ALHP1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum BlockData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlockData,
}

impl Block {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = if T::BYTES == 4 {
            BlockData::F32(t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())
        } else {
            BlockData::F64(t.data().iter().map(|v| v.f64()).collect())
        };
        Block {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match (&self.data, T::BYTES) {
            (BlockData::F32(v), 4) => v.iter().map(|&x| T::of(x as f64)).collect(),
            (BlockData::F64(v), 8) => v.iter().map(|&x| T::of(x)).collect(),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "block {} stored at a different precision than {}",
                    self.name,
                    T::NAME
                )))
            }
        };
        Tensor::new(self.shape.clone(), data)
    }

    fn width(&self) -> u8 {
        match self.data {
            BlockData::F32(_) => 4,
            BlockData::F64(_) => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `key=value` lines echoing the run configuration.
    pub config: String,
    /// Scalar run state as JSON.
    pub meta: String,
    pub blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))
    }

    /// Blocks whose name starts with `prefix/`, prefix stripped.
    pub fn group<T: Real>(&self, prefix: &str) -> Result<Vec<(String, Tensor<T>)>> {
        let p = format!("{prefix}/");
        self.blocks
            .iter()
            .filter_map(|b| b.name.strip_prefix(&p).map(|n| (n.to_string(), b)))
            .map(|(n, b)| Ok((n, b.to_tensor()?)))
            .collect()
    }

    pub fn push_group<T: Real>(&mut self, prefix: &str, items: &[(String, Tensor<T>)]) {
        for (n, t) in items {
            self.blocks.push(Block::from_tensor(format!("{prefix}/{n}"), t));
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for s in [&self.config, &self.meta] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.width());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &b.data {
                BlockData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(MAGIC),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version: expected {VERSION}, found {version}"
            )));
        }
        let config = r.string()?;
        let meta = r.string()?;
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            let width = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("block {name}: absurd shape {shape:?}")))?;
            let data = match width {
                4 => BlockData::F32(
                    r.take(len.checked_mul(4).ok_or_else(|| trunc(&name))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                8 => BlockData::F64(
                    r.take(len.checked_mul(8).ok_or_else(|| trunc(&name))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                w => return Err(Error::Checkpoint(format!("block {name}: element width {w}"))),
            };
            blocks.push(Block { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, meta, blocks })
    }

    /// Writes atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn trunc(what: &str) -> Error {
    Error::Checkpoint(format!("truncated while reading {what}"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| trunc(&format!("{n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
