//! Parameter checkpoint file.
//!
//! Layout, all integers and doubles little-endian:
//!
//! ```text
//! magic        8 bytes  "V2IPARAM"
//! version      u32      (1)
//! n_meta       u32
//! n_meta ×     u32 key_len, key bytes, u32 value_len, value bytes (UTF-8)
//! n_params     u32
//! name table   n_params × (u32 len, UTF-8 bytes)
//! shape table  n_params × (u32 ndim, ndim × u64)
//! data         every parameter's elements as f64, in table order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"V2IPARAM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type Metadata = BTreeMap<String, String>;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(store: &ParameterStore, meta: &Metadata) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, meta.len() as u32);
    for (k, v) in meta {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    put_u32(&mut out, store.len() as u32);
    for p in store.iter() {
        put_str(&mut out, &p.name);
    }
    for p in store.iter() {
        put_u32(&mut out, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParameterStore, Metadata)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a parameter checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut meta = Metadata::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        meta.insert(k, v);
    }
    let n = r.u32()? as usize;
    let names = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let ndim = r.u32()? as usize;
        shapes.push((0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?);
    }
    let mut store = ParameterStore::new();
    for (name, shape) in names.into_iter().zip(shapes) {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint data".into()));
    }
    Ok((store, meta))
}

pub fn save_checkpoint(path: &Path, store: &ParameterStore, meta: &Metadata) -> Result<()> {
    fs::write(path, encode_checkpoint(store, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterStore, Metadata)> {
    decode_checkpoint(&fs::read(path)?)
}
