//! Ordered name → matrix store and its `KTS1` binary encoding.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "KTS1"                 magic, 4 bytes
//! u16                    entry count
//! per entry:
//!   u16                  name length in bytes
//!   [u8]                 UTF-8 name
//!   u8                   dtype code (0 = f64, 1 = f32)
//!   u32, u32             rows, cols
//!   [f64 | f32]          row-major payload
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KTS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorStore {
    entries: IndexMap<String, Matrix>,
}

impl NamedTensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces. A replaced entry keeps its original position.
    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) -> Option<Matrix> {
        self.entries.insert(name.into(), m)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.entries.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let count = u16::try_from(self.entries.len()).map_err(|_| {
            Error::Malformed(format!(
                "{} entries exceed the u16 limit",
                self.entries.len()
            ))
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&count.to_le_bytes());
        for (name, m) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Malformed(format!("name `{name}` is too long")))?;
            let rows = u32::try_from(m.rows())
                .map_err(|_| Error::Malformed(format!("`{name}` has too many rows")))?;
            let cols = u32::try_from(m.cols())
                .map_err(|_| Error::Malformed(format!("`{name}` has too many cols")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype.code());
            out.extend_from_slice(&rows.to_le_bytes());
            out.extend_from_slice(&cols.to_le_bytes());
            out.reserve(m.len() * dtype.width());
            match dtype {
                Dtype::F64 => m
                    .as_slice()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Dtype::F32 => m
                    .as_slice()
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if &magic[..3] != b"KTS" {
            return Err(Error::BadMagic {
                found: magic.try_into().unwrap(),
            });
        }
        if magic[3] != MAGIC[3] {
            return Err(Error::VersionMismatch { found: magic[3] });
        }
        let count = r.u16()?;
        let mut store = NamedTensorStore::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Malformed(format!("entry name is not UTF-8: {e}")))?
                .to_owned();
            let dtype = match r.take(1)?[0] {
                0 => Dtype::F64,
                1 => Dtype::F32,
                other => {
                    return Err(Error::Malformed(format!(
                        "`{name}` has unknown dtype code {other}"
                    )))
                }
            };
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let payload = r.take(rows * cols * dtype.width())?;
            let data: Vec<f64> = match dtype {
                Dtype::F64 => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            let m = Matrix::new(rows, cols, data)
                .map_err(|e| Error::Malformed(format!("`{name}`: {e}")))?;
            if store.insert(name.clone(), m).is_some() {
                return Err(Error::Malformed(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_as(path, Dtype::F64)
    }

    pub fn save_as(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes(dtype)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl<'a> IntoIterator for &'a NamedTensorStore {
    type Item = (&'a String, &'a Matrix);
    type IntoIter = indexmap::map::Iter<'a, String, Matrix>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
