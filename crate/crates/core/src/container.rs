//! The `DDTC` checkpoint container shared by teacher and student checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DDTC" | version u32 | kind u32 | entry count u32
//! entry: name_len u32 | name utf8 | tag u8 | payload
//!   tag 1 u64        : u64
//!   tag 2 f64        : f64
//!   tag 3 string     : len u32 | utf8
//!   tag 4 f32 tensor : rank u32 | dims u32 * rank | f32 * prod(dims)
//!   tag 5 u32 array  : len u32 | u32 * len
//!   tag 6 f64 array  : len u32 | f64 * len
//! ```
//!
//! Entries keep insertion order, so equal checkpoints serialize to equal bytes.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{DdError, Result};
use crate::nn::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"DDTC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ContainerKind {
    TabularTeacher = 1,
    NeuralTeacher = 2,
    Student = 3,
}

impl ContainerKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            1 => Ok(ContainerKind::TabularTeacher),
            2 => Ok(ContainerKind::NeuralTeacher),
            3 => Ok(ContainerKind::Student),
            other => Err(DdError::Format(format!("unknown DDTC kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    U64(u64),
    F64(f64),
    Str(String),
    Tensor(Tensor<f32>),
    U32s(Vec<u32>),
    F64s(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    kind: ContainerKind,
    entries: Vec<(String, Entry)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DdError::Format("DDTC file truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| DdError::Format("DDTC string is not UTF-8".into()))
    }
}

impl Container {
    pub fn new(kind: ContainerKind) -> Self {
        Container {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn kind(&self) -> ContainerKind {
        self.kind
    }

    pub fn expect_kind(&self, kind: ContainerKind) -> Result<()> {
        if self.kind != kind {
            return Err(DdError::Format(format!(
                "checkpoint holds {:?}, expected {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn put(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = entry;
        } else {
            self.entries.push((name, entry));
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| DdError::Format(format!("checkpoint entry `{name}` missing")))
    }

    fn wrong(name: &str, want: &str) -> DdError {
        DdError::Format(format!("checkpoint entry `{name}` is not a {want}"))
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.get(name)? {
            Entry::U64(v) => Ok(*v),
            _ => Err(Self::wrong(name, "u64")),
        }
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        Ok(self.u64(name)? as usize)
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        match self.get(name)? {
            Entry::F64(v) => Ok(*v),
            _ => Err(Self::wrong(name, "f64")),
        }
    }

    pub fn str(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Entry::Str(v) => Ok(v),
            _ => Err(Self::wrong(name, "string")),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name)? {
            Entry::Tensor(v) => Ok(v),
            _ => Err(Self::wrong(name, "tensor")),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match self.get(name)? {
            Entry::U32s(v) => Ok(v),
            _ => Err(Self::wrong(name, "u32 array")),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name)? {
            Entry::F64s(v) => Ok(v),
            _ => Err(Self::wrong(name, "f64 array")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        for (name, entry) in &self.entries {
            put_str(&mut out, name);
            match entry {
                Entry::U64(v) => {
                    out.push(1);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Entry::F64(v) => {
                    out.push(2);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Entry::Str(s) => {
                    out.push(3);
                    put_str(&mut out, s);
                }
                Entry::Tensor(t) => {
                    out.push(4);
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::U32s(vs) => {
                    out.push(5);
                    out.extend_from_slice(&(vs.len() as u32).to_le_bytes());
                    for v in vs {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::F64s(vs) => {
                    out.push(6);
                    out.extend_from_slice(&(vs.len() as u32).to_le_bytes());
                    for v in vs {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DdError::Format("not a DDTC checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DdError::Format(format!("unsupported DDTC version {version}")));
        }
        let kind = ContainerKind::from_u32(r.u32()?)?;
        let count = r.u32()? as usize;
        let mut c = Container::new(kind);
        for _ in 0..count {
            let name = r.string()?;
            let entry = match r.u8()? {
                1 => Entry::U64(r.u64()?),
                2 => Entry::F64(r.f64()?),
                3 => Entry::Str(r.string()?),
                4 => {
                    let rank = r.u32()? as usize;
                    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                    let numel: usize = shape.iter().product();
                    let raw = r.take(4 * numel)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Entry::Tensor(Tensor::new(shape, data)?)
                }
                5 => {
                    let len = r.u32()? as usize;
                    Entry::U32s((0..len).map(|_| r.u32()).collect::<Result<_>>()?)
                }
                6 => {
                    let len = r.u32()? as usize;
                    Entry::F64s((0..len).map(|_| r.f64()).collect::<Result<_>>()?)
                }
                tag => return Err(DdError::Format(format!("unknown DDTC entry tag {tag}"))),
            };
            c.entries.push((name, entry));
        }
        if r.pos != bytes.len() {
            return Err(DdError::Format("trailing bytes after DDTC entries".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DdError::MissingInput(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const PARAM_PREFIX: &str = "param.";

/// Stores every parameter of `store` as a `param.<name>` tensor entry.
pub fn put_params(c: &mut Container, store: &ParamStore<f32>) {
    for (name, t) in store.names().iter().zip(store.tensors()) {
        c.put(format!("{PARAM_PREFIX}{name}"), Entry::Tensor(t.clone()));
    }
}

/// Inverse of [`put_params`], preserving entry order.
pub fn get_params(c: &Container) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for (name, entry) in &c.entries {
        if let Some(pname) = name.strip_prefix(PARAM_PREFIX) {
            match entry {
                Entry::Tensor(t) => {
                    store.add(pname.to_string(), t.clone());
                }
                _ => return Err(Container::wrong(name, "tensor")),
            }
        }
    }
    Ok(store)
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_every_entry_kind() {
        let mut c = Container::new(ContainerKind::Student);
        c.put("n", Entry::U64(4));
        c.put("alpha", Entry::F64(0.25));
        c.put("arch", Entry::Str("tiny".into()));
        c.put("w", Entry::Tensor(Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap()));
        c.put("sched", Entry::U32s(vec![1, 3]));
        c.put("lambda", Entry::F64s(vec![1.0, 1.0]));
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"DDTC");
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.usize("n").unwrap(), 4);
        assert!(back.f64("n").is_err());
        assert!(back.u64("missing").is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(back.expect_kind(ContainerKind::NeuralTeacher).is_err());
    }
}
