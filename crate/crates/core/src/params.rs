//! Flat named parameter storage with matching gradient buffers and a binary
//! checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "EVDPARAM"
//! version    u32      = 1
//! count      u32      number of entries
//! per entry:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (ndim x u64)
//!   values   product(dims) x f64
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{EvdError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EVDPARAM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        let len = dims.iter().product();
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        self.entries.push(ParamEntry {
            name,
            dims: dims.to_vec(),
            offset,
            len,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.len]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0];
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: vec![0.0; self.data.len()],
        }
    }

    /// Writes all entries, in registration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &self.data[e.offset..e.offset + e.len] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// Overwrites values of `self` from a checkpoint. Every entry of `self`
    /// must be present with identical dims; extra entries are ignored.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let loaded = read_checkpoint(&fs::read(path)?)?;
        for e in &self.entries {
            let (dims, vals) = loaded
                .get(&e.name)
                .ok_or_else(|| EvdError::Format(format!("checkpoint lacks {}", e.name)))?;
            if dims != &e.dims {
                return Err(EvdError::Format(format!(
                    "{}: checkpoint dims {:?}, expected {:?}",
                    e.name, dims, e.dims
                )));
            }
            self.data[e.offset..e.offset + e.len].copy_from_slice(vals);
        }
        Ok(())
    }
}

type LoadedEntries = HashMap<String, (Vec<usize>, Vec<f64>)>;

fn read_checkpoint(bytes: &[u8]) -> Result<LoadedEntries> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(EvdError::Format("bad checkpoint magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(EvdError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = cur.u32()?;
    let mut out = HashMap::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| EvdError::Format("non UTF-8 parameter name".into()))?;
        let ndim = cur.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let vals = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        out.insert(name, (dims, vals));
    }
    if cur.pos != bytes.len() {
        return Err(EvdError::Format("trailing bytes in checkpoint".into()));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(EvdError::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Gradient buffer with the same layout as its [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<f64>,
}

impl Grads {
    pub fn slot<'a>(&'a mut self, store: &ParamStore, id: ParamId) -> &'a mut [f64] {
        let e = &store.entries[id.0];
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn get<'a>(&'a self, store: &ParamStore, id: ParamId) -> &'a [f64] {
        let e = &store.entries[id.0];
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ParamStore::new();
        let a = p.add("dit.a", &[2, 3]);
        let b = p.add("head.b", &[4]);
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = i as f64 * 0.25 - 1.0;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        p.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let expected = 16 + (4 + 5 + 4 + 16 + 48) + (4 + 6 + 4 + 8 + 32);
        assert_eq!(bytes.len(), expected);

        let mut q = p.clone();
        q.data.iter_mut().for_each(|v| *v = 0.0);
        q.load_into(&path).unwrap();
        assert_eq!(q.get(a), p.get(a));
        assert_eq!(q.get(b), p.get(b));
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut p = ParamStore::new();
        p.add("x", &[3]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        p.save(&path).unwrap();
        let mut q = ParamStore::new();
        q.add("x", &[4]);
        assert!(q.load_into(&path).is_err());
    }
}
