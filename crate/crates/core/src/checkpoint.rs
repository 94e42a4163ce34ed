//! The "DMO1" binary archive: an ordered list of named entries.
//!
//! Layout (little endian):
//!
//! ```text
//! b"DMO1" | u32 entry count | entries...
//! entry = u16 name length | name (utf-8) | u8 kind | payload
//!   kind 0 (f64 tensor): u32 ndim | u64 dims[ndim] | f64 data (row-major)
//!   kind 1 (u64 list):   u64 len  | u64 values[len]
//!   kind 2 (text):       u64 len  | utf-8 bytes
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMO1";

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    U64s(Vec<u64>),
    Text(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Entry)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    fn put(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        assert!(name.len() <= u16::MAX as usize);
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = entry;
        } else {
            self.entries.push((name, entry));
        }
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.put(name, Entry::Tensor(t.clone()));
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, v: Vec<u64>) {
        self.put(name, Entry::U64s(v));
    }

    pub fn put_text(&mut self, name: impl Into<String>, s: impl Into<String>) {
        self.put(name, Entry::Text(s.into()));
    }

    fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name)? {
            Entry::Tensor(t) => Ok(t),
            _ => Err(Error::Checkpoint(format!("`{name}` is not a tensor"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Entry::U64s(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("`{name}` is not a u64 list"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            _ => Err(Error::Checkpoint(format!("`{name}` is not a single u64"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Entry::Text(s) => Ok(s),
            _ => Err(Error::Checkpoint(format!("`{name}` is not text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::U64s(v) => {
                    out.push(1);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Entry::Text(s) => {
                    out.push(2);
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, expected DMO1".into()));
        }
        let count = r.u32()?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?;
            let entry = match r.u8()? {
                0 => {
                    let ndim = r.u32()? as usize;
                    let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Entry::Tensor(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?)
                }
                1 => {
                    let n = r.u64()? as usize;
                    Entry::U64s((0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?)
                }
                2 => {
                    let n = r.u64()? as usize;
                    Entry::Text(
                        String::from_utf8(r.take(n)?.to_vec())
                            .map_err(|_| Error::Checkpoint("text entry is not utf-8".into()))?,
                    )
                }
                k => return Err(Error::Checkpoint(format!("unknown entry kind {k}"))),
            };
            archive.entries.push((name, entry));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after archive".into()));
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_mlp(archive: &mut Archive, prefix: &str, mlp: &Mlp) {
    archive.put_u64s(format!("{prefix}.sizes"), mlp.sizes().iter().map(|&s| s as u64).collect());
    archive.put_text(format!("{prefix}.activation"), mlp.activation.name());
    for (l, (w, b)) in mlp.weights.iter().zip(&mlp.biases).enumerate() {
        archive.put_tensor(format!("{prefix}.w{l}"), w);
        archive.put_tensor(format!("{prefix}.b{l}"), b);
    }
}

pub fn load_mlp(archive: &Archive, prefix: &str) -> Result<Mlp> {
    let sizes = archive.u64s(&format!("{prefix}.sizes"))?;
    let act = archive.text(&format!("{prefix}.activation"))?;
    let activation =
        Activation::parse(act).ok_or_else(|| Error::Checkpoint(format!("unknown activation `{act}`")))?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..sizes.len().saturating_sub(1) {
        let w = archive.tensor(&format!("{prefix}.w{l}"))?;
        let b = archive.tensor(&format!("{prefix}.b{l}"))?;
        let (i, o) = (sizes[l] as usize, sizes[l + 1] as usize);
        if w.shape() != [i, o] || b.shape() != [o] {
            return Err(Error::Checkpoint(format!("{prefix} layer {l} shape mismatch")));
        }
        weights.push(w.clone());
        biases.push(b.clone());
    }
    if weights.is_empty() {
        return Err(Error::Checkpoint(format!("{prefix} has no layers")));
    }
    Ok(Mlp { weights, biases, activation })
}
