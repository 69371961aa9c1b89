//! Named parameter collections and their checkpoint file format.
//!
//! A checkpoint is an 8-byte little-endian header length, a JSON header
//! listing every tensor's name, shape and byte offset (plus free-form
//! metadata), then the raw little-endian `f64` payloads in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered, uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Concatenates another set; names must stay unique.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (n, t) in other.entries {
            self.insert(n, t)?;
        }
        Ok(())
    }

    /// Records every tensor on the tape (as differentiable leaves when
    /// `trainable`).
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<BoundParams<'t>> {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    tape.param(t.clone())?
                } else {
                    tape.constant(t.clone())?
                };
                Ok((n.clone(), v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { vars })
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_bytes(metadata)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self, metadata: serde_json::Value) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .entries
            .iter()
            .map(|(n, t)| {
                let e = TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len() * 8;
                e
            })
            .collect();
        let header = CheckpointHeader {
            format: "pixpoint-checkpoint".into(),
            version: 1,
            dtype: "f64".into(),
            tensors,
            metadata,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamSet, serde_json::Value)> {
        let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body_start = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..body_start])?;
        if header.dtype != "f64" {
            return Err(bad(&format!("unsupported dtype {}", header.dtype)));
        }
        let body = &bytes[body_start..];
        let mut set = ParamSet::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let chunk = body
                .get(e.offset..e.offset + n * 8)
                .ok_or_else(|| bad(&format!("payload of `{}` out of range", e.name)))?;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            set.insert(e.name, Tensor::new(e.shape, data)?)?;
        }
        Ok((set, header.metadata))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    dtype: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Parameters recorded on a tape, addressable by name.
#[derive(Debug, Clone)]
pub struct BoundParams<'t> {
    vars: Vec<(String, Var<'t>)>,
}

impl<'t> BoundParams<'t> {
    pub fn from_vars(vars: Vec<(String, Var<'t>)>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    /// Gradients aligned with the originating [`ParamSet`] order; `None`
    /// where the parameter did not influence the output.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|(_, v)| grads.take(*v)).collect()
    }
}
