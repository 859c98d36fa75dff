//! Flat checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CASNETCK" | u32 format version | u64 header length | JSON header | f64 values
//! ```
//!
//! The JSON header carries the model hyperparameters and an index of every
//! stored tensor (`name`, `kind`, `shape`, `offset` into the value block,
//! counted in values).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CASNETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryIndex {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model: serde_json::Value,
    pub tensors: Vec<EntryIndex>,
}

pub struct Checkpoint {
    pub header: Header,
    values: Vec<f64>,
}

impl Checkpoint {
    pub fn from_store(model: serde_json::Value, store: &ParamStore) -> Self {
        let mut tensors = Vec::new();
        let mut values = Vec::new();
        let params = store.params().iter().map(|p| (EntryKind::Param, &p.name, &p.tensor));
        let buffers = store.buffers().iter().map(|b| (EntryKind::Buffer, &b.name, &b.tensor));
        for (kind, name, t) in params.chain(buffers) {
            tensors.push(EntryIndex { name: name.clone(), kind, shape: t.shape().to_vec(), offset: values.len() });
            values.extend_from_slice(t.data());
        }
        Self { header: Header { format_version: FORMAT_VERSION, model, tensors }, values }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing CASNETCK magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let raw = &bytes[20 + hlen..];
        if !raw.len().is_multiple_of(8) {
            return Err(bad("value block is not a whole number of f64"));
        }
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset + n > values.len() {
                return Err(Error::Checkpoint(format!("entry {} runs past the value block", e.name)));
            }
        }
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let e = self.header.tensors.iter().find(|e| e.name == name)?;
        let n: usize = e.shape.iter().product();
        Tensor::new(self.values[e.offset..e.offset + n].to_vec(), &e.shape).ok()
    }

    /// Copies every stored tensor into `store`. The store must hold exactly
    /// the same names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let expected = store.params().len() + store.buffers().len();
        if expected != self.header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {expected}",
                self.header.tensors.len()
            )));
        }
        for e in &self.header.tensors {
            let n: usize = e.shape.iter().product();
            let src = &self.values[e.offset..e.offset + n];
            let dst = match e.kind {
                EntryKind::Param => store.find(&e.name).map(|id| &mut store.get_mut(id).tensor),
                EntryKind::Buffer => store.find_buffer(&e.name).map(|id| &mut store.buffer_mut(id).tensor),
            }
            .ok_or_else(|| Error::Checkpoint(format!("model has no entry named {}", e.name)))?;
            if dst.shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!("{}: stored {:?}, model {:?}", e.name, e.shape, dst.shape())));
            }
            dst.data_mut().copy_from_slice(src);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25 - 1.0)).unwrap();
        s.add_buffer("bn.mean", Tensor::full(&[3], 0.5)).unwrap();
        let ck = Checkpoint::from_store(serde_json::json!({"n_blocks": 4}), &s);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.header, ck.header);
        let mut fresh = ParamStore::new();
        fresh.add("w", Tensor::zeros(&[2, 3])).unwrap();
        fresh.add_buffer("bn.mean", Tensor::zeros(&[3])).unwrap();
        back.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh.params()[0].tensor.data(), s.params()[0].tensor.data());
        assert_eq!(fresh.buffers()[0].tensor.data(), &[0.5; 3]);

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }
}
