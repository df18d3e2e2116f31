//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "STNCKPT\0"            8 bytes
//! version u32                    currently 1
//! count   u32                    number of entries
//! entry*  name_len u16, name utf8, kind u8, payload
//!
//! kind 0 network:  layers u32, then per layer
//!                  in u32, out u32, activation u8,
//!                  weights f64[in*out] row-major, bias f64[out]
//! kind 1 vector:   len u64, f64[len]
//! kind 2 integer:  u64
//! kind 3 text:     len u32, utf8
//! ```
//!
//! Floats are stored by bit pattern, so save → load is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use super::mlp::{Layer, Mlp};
use super::tape::Activation;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"STNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Net(Mlp),
    Vector(Vec<f64>),
    Integer(u64),
    Text(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) -> &mut Self {
        self.entries.insert(name.into(), entry);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn net(&self, name: &str) -> Result<&Mlp> {
        match self.entries.get(name) {
            Some(Entry::Net(n)) => Ok(n),
            _ => Err(Error::contract(format!("checkpoint has no network '{name}'"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<&[f64]> {
        match self.entries.get(name) {
            Some(Entry::Vector(v)) => Ok(v),
            _ => Err(Error::contract(format!("checkpoint has no vector '{name}'"))),
        }
    }

    pub fn integer(&self, name: &str) -> Result<u64> {
        match self.entries.get(name) {
            Some(Entry::Integer(v)) => Ok(*v),
            _ => Err(Error::contract(format!("checkpoint has no integer '{name}'"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.entries.get(name) {
            Some(Entry::Text(v)) => Ok(v),
            _ => Err(Error::contract(format!("checkpoint has no text '{name}'"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Net(net) => {
                    out.push(0);
                    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
                    for l in net.layers() {
                        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
                        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
                        out.push(l.activation.tag());
                        put_f64s(&mut out, l.weight.data());
                        put_f64s(&mut out, l.bias.data());
                    }
                }
                Entry::Vector(v) => {
                    out.push(1);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    put_f64s(&mut out, v);
                }
                Entry::Integer(v) => {
                    out.push(2);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Entry::Text(s) => {
                    out.push(3);
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Parse { offset: 0, detail: "bad checkpoint magic".into() });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse {
                offset: 8,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Parse { offset: at, detail: "entry name is not utf8".into() })?;
            let kind_at = r.pos;
            let entry = match r.u8()? {
                0 => {
                    let n = r.u32()? as usize;
                    let mut layers = Vec::with_capacity(n);
                    for _ in 0..n {
                        let din = r.u32()? as usize;
                        let dout = r.u32()? as usize;
                        let tag_at = r.pos;
                        let act = Activation::from_tag(r.u8()?).ok_or_else(|| Error::Parse {
                            offset: tag_at,
                            detail: "unknown activation tag".into(),
                        })?;
                        let w = r.f64s(din * dout)?;
                        let b = r.f64s(dout)?;
                        layers.push(Layer::new(
                            Tensor::raw(vec![din, dout], w),
                            Tensor::raw(vec![dout], b),
                            act,
                        )?);
                    }
                    Entry::Net(Mlp::new(layers)?)
                }
                1 => {
                    let n = r.u64()? as usize;
                    Entry::Vector(r.f64s(n)?)
                }
                2 => Entry::Integer(r.u64()?),
                3 => {
                    let n = r.u32()? as usize;
                    let at = r.pos;
                    Entry::Text(String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Parse {
                        offset: at,
                        detail: "text entry is not utf8".into(),
                    })?)
                }
                k => {
                    return Err(Error::Parse { offset: kind_at, detail: format!("unknown entry kind {k}") })
                }
            };
            entries.insert(name, entry);
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse { offset: r.pos, detail: "trailing bytes after last entry".into() });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                detail: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
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

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Parse {
            offset: self.pos,
            detail: "length overflow".into(),
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}
