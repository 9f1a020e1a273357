//! Binary weight container shared by backbone weights and checkpoints.
//!
//! Layout (little-endian): magic `FRPT`, version `u32`, array count `u32`,
//! then per array a `u16` name length, the UTF-8 name, a `u8` rank, `rank`
//! `u32` dims, a `u8` dtype code (0 = f32) and the raw values. A CRC32 of all
//! preceding bytes closes the file.

use std::fs;
use std::path::Path;

use crate::error::{FrptError, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"FRPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Self { name: name.into(), shape: t.shape().to_vec(), data: t.data().to_vec() }
    }

    pub fn scalar(name: impl Into<String>, value: f32) -> Self {
        Self { name: name.into(), shape: vec![1], data: vec![value] }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::new(&self.shape, self.data.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    pub arrays: Vec<NamedArray>,
}

impl WeightFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.push(NamedArray::from_tensor(name, t));
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name)
            .ok_or_else(|| FrptError::Structure(format!("array `{name}` missing from weight file")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        self.require(name)?.to_tensor()
    }

    /// Reads a 1-element array as a non-negative integer.
    pub fn integer(&self, name: &str) -> Result<usize> {
        let a = self.require(name)?;
        match a.data.as_slice() {
            [v] if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as usize),
            _ => Err(FrptError::Structure(format!("`{name}` must hold one non-negative integer"))),
        }
    }

    pub fn real(&self, name: &str) -> Result<f32> {
        match self.require(name)?.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(FrptError::Structure(format!("`{name}` must hold one value"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let name = a.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(DTYPE_F32);
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(FrptError::Container { offset: 0, message: "bad magic".into() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FrptError::Container {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let count = r.u32("array count")? as usize;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let what = format!("header of array #{i} of {count}");
            let name_len = r.u16(&what)? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, &what)?)
                .map_err(|_| FrptError::Container { offset: name_at, message: "name is not UTF-8".into() })?
                .to_string();
            let ctx = format!("array `{name}`");
            let rank = r.u8(&ctx)? as usize;
            let shape = (0..rank).map(|_| r.u32(&ctx).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let dtype_at = r.pos;
            let dtype = r.u8(&ctx)?;
            if dtype != DTYPE_F32 {
                return Err(FrptError::Container {
                    offset: dtype_at,
                    message: format!("{ctx}: unknown dtype code {dtype}"),
                });
            }
            let n = numel(&shape);
            let raw = r.take(n * 4, &format!("data of {ctx}"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            arrays.push(NamedArray { name, shape, data });
        }
        let body_end = r.pos;
        let stored = r.u32("trailing checksum")?;
        if r.pos != bytes.len() {
            return Err(FrptError::Container {
                offset: r.pos,
                message: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            });
        }
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(FrptError::Container {
                offset: body_end,
                message: format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            });
        }
        Ok(Self { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| FrptError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FrptError::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FrptError::Container {
                offset: self.pos,
                message: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
