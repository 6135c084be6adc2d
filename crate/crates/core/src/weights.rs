//! Binary weight files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "PCRN" version count
//! count x { name_len name shape[4] f32 data[numel] }
//! alias_count
//! alias_count x { name_len name canonical_len canonical }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Shape, Tensor};

const MAGIC: &[u8; 4] = b"PCRN";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode<T: Element>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, store.len());
    for (name, t) in store.iter() {
        put_str(&mut out, name);
        for d in t.shape().dims() {
            put_u32(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    put_u32(&mut out, store.aliases().len());
    for (alias, canonical) in store.aliases() {
        put_str(&mut out, alias);
        put_str(&mut out, canonical);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::WeightFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::WeightFormat("name is not UTF-8".into()))
    }
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::WeightFormat("bad magic (not a weight file)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::WeightFormat(format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let shape = Shape::new(r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let raw = r.take(shape.numel().checked_mul(4).ok_or_else(|| Error::WeightFormat("shape overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        store.insert(name, Tensor::from_vec(shape, data)?)?;
    }
    for _ in 0..r.u32()? {
        let alias = r.string()?;
        let canonical = r.string()?;
        store.alias(alias, &canonical)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save_weights<T: Element>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load_weights<T: Element>(path: &Path) -> Result<ParamStore<T>> {
    decode(&std::fs::read(path)?)
}

/// Load `path` into an existing model's store, checking names, shapes and aliases.
pub fn load_into<T: Element>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    store.load_from(&load_weights(path)?)
}
