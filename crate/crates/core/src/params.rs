//! Named parameter collections and their `FTPS` binary encoding.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FTPS" | version: u32 | entry count: u32
//! per entry: name length: u32 | UTF-8 name | trainable: u8 | rank: u32 | dims: u32 * rank | f64 * numel
//! ```
//!
//! Entries are written in lexicographic name order, so the encoding of a set
//! is independent of insertion order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Fnv, Tensor};

pub const PARAMS_MAGIC: &[u8; 4] = b"FTPS";
pub const PARAMS_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries
            .insert(name.into(), Param { tensor, trainable });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Copy of the trainable entries only.
    pub fn trainable_subset(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Checksum over names and bit patterns of every frozen entry.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for (name, p) in self.entries.iter().filter(|(_, p)| !p.trainable) {
            h.write_bytes(name.as_bytes());
            h.write(p.tensor.checksum());
        }
        h.0
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb && a.trainable == b.trainable && a.tensor.bitwise_eq(&b.tensor)
            })
    }

    /// Exact length of [`ParamSet::to_bytes`] without encoding.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .entries
                .iter()
                .map(|(name, p)| entry_len(name, &p.tensor))
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, p) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.trainable as u8);
            let shape = p.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in p.tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a set, returning it together with the number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(ParamSet, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != PARAMS_MAGIC {
            return Err(Error::Format("bad magic, expected FTPS".into()));
        }
        let version = r.u32()?;
        if version != PARAMS_VERSION {
            return Err(Error::Format(format!("unsupported FTPS version {version}")));
        }
        let count = r.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("entry name is not UTF-8: {e}")))?
                .to_string();
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Format(format!("bad trainable byte {b} for '{name}'"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if set.contains(&name) {
                return Err(Error::Format(format!("duplicate entry '{name}'")));
            }
            set.insert(name, Tensor::new(shape, data)?, trainable);
        }
        Ok((set, r.pos))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let (set, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after FTPS payload",
                bytes.len() - used
            )));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn entry_len(name: &str, t: &Tensor) -> usize {
    4 + name.len() + 1 + 4 + 4 * t.rank() + 8 * t.numel()
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
