//! Binary checkpoint container.
//!
//! ```text
//! "FANO" | version: u32
//! count: u32 | count × { path_len: u32, path: utf8, dtype: u8, rank: u32, dims: rank × u64, values: LE }
//! meta_count: u32 | meta_count × { key_len: u32, key: utf8, value_len: u32, value: utf8 }
//! ```
//! All integers little-endian. dtype 0 = f32, 1 = f64.

use std::path::Path;

use indexmap::IndexMap;

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FANO";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    dtype: DType,
    dims: Vec<usize>,
    raw: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: IndexMap<String, Entry>,
    meta: IndexMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Element>(&mut self, path: impl Into<String>, tensor: &Tensor<T>) {
        let mut raw = Vec::with_capacity(tensor.numel() * T::DTYPE.size());
        for &v in tensor.data() {
            v.write_le(&mut raw);
        }
        self.entries.insert(
            path.into(),
            Entry {
                dtype: T::DTYPE,
                dims: tensor.shape().to_vec(),
                raw,
            },
        );
    }

    pub fn get<T: Element>(&self, path: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .get(path)
            .ok_or_else(|| Error::format("checkpoint", format!("missing entry `{path}`")))?;
        if e.dtype != T::DTYPE {
            return Err(Error::format(
                "checkpoint",
                format!("entry `{path}` is {:?}, requested {:?}", e.dtype, T::DTYPE),
            ));
        }
        let data = e.raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(&e.dims, data)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (path, e) in &self.entries {
            put_str(&mut out, path);
            out.push(e.dtype.code());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.raw);
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic, not a FANO file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported format version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let path = r.string()?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::format("checkpoint", format!("unknown dtype code {code} for `{path}`")))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = r.take(numel * dtype.size())?.to_vec();
            ck.entries.insert(path, Entry { dtype, dims, raw });
        }
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes after metadata block"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "non-UTF-8 string"))
    }
}
