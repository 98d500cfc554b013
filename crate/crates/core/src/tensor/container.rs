//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u32 count
//! count × {
//!     u32  name length in bytes
//!     [u8] UTF-8 name
//!     u32  rank
//!     rank × u64 extent        (every extent > 0)
//!     product(extents) × f64   row-major values
//! }
//! ```
//!
//! Names must be unique. Decoding validates every length against the bytes
//! actually present before allocating.

use super::{numel, Tensor};
use crate::error::{Error, Result};

const WHAT: &str = "tensor container";
const MAX_RANK: u32 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() || shape.contains(&0) {
            return Err(Error::format(
                WHAT,
                format!("shape {shape:?} does not hold {} values", values.len()),
            ));
        }
        Ok(Self { shape, values })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            values: t.to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&self.shape, self.values.clone())
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensors {
    entries: Vec<(String, TensorRecord)>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the tensor stored under `name`.
    pub fn insert(&mut self, name: impl Into<String>, record: TensorRecord) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = record,
            None => self.entries.push((name, record)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn require(&self, name: &str) -> Result<&TensorRecord> {
        self.get(name)
            .ok_or_else(|| Error::format(WHAT, format!("missing tensor `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorRecord)> {
        self.entries.iter().map(|(n, r)| (n.as_str(), r))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, rec) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for &d in &rec.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &rec.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a container occupying the whole of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader::new(bytes, WHAT);
        let out = Self::decode_from(&mut reader)?;
        if !reader.is_empty() {
            return Err(Error::format(
                WHAT,
                format!("{} trailing bytes", reader.remaining()),
            ));
        }
        Ok(out)
    }

    pub(crate) fn decode_from(r: &mut ByteReader<'_>) -> Result<Self> {
        let count = r.u32()?;
        let mut out = NamedTensors::new();
        for i in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(WHAT, format!("entry {i}: name is not UTF-8")))?
                .to_owned();
            if out.get(&name).is_some() {
                return Err(Error::format(WHAT, format!("duplicate tensor `{name}`")));
            }
            let rank = r.u32()?;
            if rank > MAX_RANK {
                return Err(Error::format(WHAT, format!("`{name}`: rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut count: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?)
                    .ok()
                    .filter(|&d| d > 0)
                    .ok_or_else(|| Error::format(WHAT, format!("`{name}`: invalid extent")))?;
                count = count
                    .checked_mul(d)
                    .ok_or_else(|| Error::format(WHAT, format!("`{name}`: shape overflows")))?;
                shape.push(d);
            }
            let bytes_needed = count
                .checked_mul(8)
                .filter(|&b| b <= r.remaining())
                .ok_or_else(|| Error::format(WHAT, format!("`{name}`: truncated values")))?;
            let values = r
                .take(bytes_needed)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            out.entries.push((name, TensorRecord { shape, values }));
        }
        Ok(out)
    }
}

/// Bounds-checked little-endian cursor.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(
                self.what,
                format!("truncated: need {n} bytes at offset {}, have {}", self.pos, self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
