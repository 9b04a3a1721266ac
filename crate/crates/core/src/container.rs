//! Self-describing binary container for model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "PVSCREEN"
//! version      u32       FORMAT_VERSION
//! kind         u8        1 = classifier, 2 = forest
//! header_len   u32
//! header       UTF-8, one `key=value` per line, in insertion order
//! n_tensors    u32
//! n_tensors × {
//!     name_len u16, name (UTF-8)
//!     dtype    u8        1 = f32, 2 = f64
//!     rank     u8
//!     dims     rank × u64
//!     values   product(dims) × (4 | 8) bytes, row-major
//! }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PVSCREEN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Classifier = 1,
    Forest = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub header: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new(kind: Kind) -> Self {
        Self {
            kind,
            header: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, name: &str, dtype: DType, shape: &[usize], values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.entries.push(Entry {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            values: values.to_vec(),
        });
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype as u8);
            out.push(e.shape.len() as u8);
            for d in &e.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match e.dtype {
                DType::F32 => e
                    .values
                    .iter()
                    .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
                DType::F64 => e.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a model container (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported container version {version}")));
        }
        let kind = match r.u8()? {
            1 => Kind::Classifier,
            2 => Kind::Forest,
            k => return Err(Error::format(path, format!("unknown container kind {k}"))),
        };
        let header_len = r.u32()? as usize;
        let header_text =
            std::str::from_utf8(r.take(header_len)?).map_err(|_| Error::format(path, "header is not UTF-8"))?;
        let mut header = Vec::new();
        for line in header_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("malformed header line `{line}`")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let dtype = match r.u8()? {
                1 => DType::F32,
                2 => DType::F64,
                d => return Err(Error::format(path, format!("tensor `{name}` has unknown dtype {d}"))),
            };
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::format(path, format!("tensor `{name}` is too large")))?;
            let width = match dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            let raw = r.take(
                n.checked_mul(width)
                    .ok_or_else(|| Error::format(path, "tensor too large"))?,
            )?;
            let values = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            entries.push(Entry {
                name,
                dtype,
                shape,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Self { kind, header, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|end| *end <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
