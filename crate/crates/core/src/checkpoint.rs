//! Checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "OCNETCKP"
//! version   u32      1
//! config    u64 length + UTF-8 text (the run configuration)
//! count     u32      number of tensors
//! tensor*   kind u8 (0 = parameter, 1 = buffer)
//!           u32 name length + UTF-8 name
//!           u32 rank, rank x u64 dims
//!           numel x f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"OCNETCKP";
const VERSION: u32 = 1;

pub fn encode(config_text: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    let entries: Vec<(u8, &String, &Tensor)> = store
        .params()
        .map(|(n, t)| (0u8, n, t))
        .chain(store.buffers().map(|(n, t)| (1u8, n, t)))
        .collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (kind, name, t) in entries {
        out.push(kind);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, ParamStore)> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u64()? as usize;
    let config = r.string(len)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let kind = r.u8()?;
        let len = r.u32()? as usize;
        let name = r.string(len)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(&shape, data)?;
        match kind {
            0 => store.insert(name, t),
            1 => store.insert_buffer(name, t),
            k => return Err(Error::Format(format!("unknown tensor kind {k}"))),
        }
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok((config, store))
}

pub fn save(path: &Path, config_text: &str, store: &ParamStore) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(config_text, store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, ParamStore)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
