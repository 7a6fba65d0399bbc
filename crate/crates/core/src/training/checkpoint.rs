//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "MFNCKPT\0"
//! version     u32
//! header_len  u64
//! header      header_len bytes of JSON (CheckpointHeader)
//! count       u64      number of records
//! record*     name_len u32, name (UTF-8), dtype u8 (1 = f64, 2 = f32),
//!             ndim u32, dims u64 * ndim, values (8 or 4 bytes each),
//!             checksum 8 bytes (leading bytes of SHA-256 over the record)
//! ```
//!
//! Records follow parameter registration order: shared body first, then each
//! dataset's parts, whose names carry the dataset name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Schema;
use crate::error::{Error, Result};
use crate::model::{Assembly, ModelConfig};
use crate::nn::{Scope, Tensor};

pub const MAGIC: &[u8; 8] = b"MFNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 1,
            Dtype::F32 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// Position of a ChaCha stream; `word_pos` is a decimal string because it is a
/// 128-bit counter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub phase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub epochs: usize,
    pub steps: usize,
    pub seed: u64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    /// Schemas of the datasets whose parts are stored, in attach order.
    pub datasets: Vec<Schema>,
    pub shared_trained: bool,
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<RngState>,
    pub provenance: Vec<ProvenanceEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_assembly(
        assembly: &Assembly,
        dtype: Dtype,
        rng: Option<RngState>,
        provenance: Vec<ProvenanceEntry>,
    ) -> Result<Self> {
        let ids = assembly.dataset_ids();
        let datasets = ids
            .iter()
            .map(|&id| assembly.dataset(id).map(|p| p.schema.clone()))
            .collect::<Result<_>>()?;
        let attached: Vec<usize> = ids.iter().map(|id| id.0).collect();
        let records = assembly
            .params
            .iter()
            .filter(|(_, p)| match p.scope {
                Scope::Shared => true,
                Scope::Dataset(i) => attached.contains(&i),
            })
            .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
            .collect();
        Ok(Self {
            header: CheckpointHeader {
                config: assembly.config.clone(),
                datasets,
                shared_trained: assembly.shared_trained,
                dtype,
                rng,
                provenance,
            },
            records,
        })
    }

    /// Rebuilds an assembly with every stored dataset attached.
    pub fn to_assembly(&self) -> Result<Assembly> {
        let mut a = Assembly::new(self.header.config.clone())?;
        for s in &self.header.datasets {
            a.attach_dataset(s)?;
        }
        if a.params.len() != self.records.len() {
            return Err(Error::Checkpoint {
                entry: "<header>".into(),
                reason: format!(
                    "{} records for a model with {} parameters",
                    self.records.len(),
                    a.params.len()
                ),
            });
        }
        for (name, t) in &self.records {
            copy_into(&mut a, name, t)?;
        }
        a.shared_trained = self.header.shared_trained;
        Ok(a)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        let dtype = self.header.dtype;
        for (name, t) in &self.records {
            let start = out.len();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype.tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                match dtype {
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
            let sum = checksum(&out[start..]);
            out.extend_from_slice(&sum);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, entry: "<header>".into() };
        if r.take(8)? != MAGIC {
            return Err(r.error("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.error(&format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let len = r.u64()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| r.error(&format!("malformed header: {e}")))?;
        let count = r.u64()?;
        let mut records = Vec::new();
        for i in 0..count {
            r.entry = format!("<record {i}>");
            let start = r.pos;
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.error("record name is not UTF-8"))?;
            r.entry = name.clone();
            let dtype = match r.take(1)?[0] {
                1 => Dtype::F64,
                2 => Dtype::F32,
                t => return Err(r.error(&format!("unknown dtype tag {t}"))),
            };
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(r.error(&format!("implausible rank {ndim}")));
            }
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.error("shape overflows"))?;
            let raw = r.take(n.checked_mul(dtype.width()).ok_or_else(|| r.error("shape overflows"))?)?;
            let values: Vec<f64> = match dtype {
                Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            let end = r.pos;
            let stored = r.take(8)?;
            if stored != checksum(&bytes[start..end]) {
                return Err(r.error("checksum mismatch, the record is corrupted"));
            }
            let t = Tensor::new(shape, values).map_err(|e| r.error(&e.to_string()))?;
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            r.entry = "<trailer>".into();
            return Err(r.error("unexpected bytes after the last record"));
        }
        Ok(Self { header, records })
    }
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let h = Sha256::digest(bytes);
    h[..8].try_into().unwrap()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    entry: String,
}

impl<'a> Reader<'a> {
    fn error(&self, reason: &str) -> Error {
        Error::Checkpoint {
            entry: self.entry.clone(),
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error("file is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn copy_into(a: &mut Assembly, name: &str, t: &Tensor) -> Result<()> {
    let id = a.params.lookup(name).ok_or_else(|| Error::Checkpoint {
        entry: name.into(),
        reason: "no parameter of this name in the model".into(),
    })?;
    let p = a.params.get_mut(id);
    if p.tensor.shape() != t.shape() {
        return Err(Error::Checkpoint {
            entry: name.into(),
            reason: format!("shape {:?} does not match the model's {:?}", t.shape(), p.tensor.shape()),
        });
    }
    p.tensor.data_mut().copy_from_slice(t.data());
    Ok(())
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Copies the shared body of `checkpoint` into `assembly`, leaving its dataset
/// parts alone. The architectures must agree.
pub fn load_shared(assembly: &mut Assembly, checkpoint: &Checkpoint) -> Result<()> {
    let theirs = &checkpoint.header.config;
    if !assembly.config.shared_compatible(theirs) {
        return Err(Error::Checkpoint {
            entry: "<header>".into(),
            reason: format!(
                "shared body (d={}, heads={}, L={}, M={}, d_ffn={}) does not match the model (d={}, heads={}, L={}, M={}, d_ffn={})",
                theirs.d,
                theirs.heads,
                theirs.layers,
                theirs.basis_count,
                theirs.d_ffn,
                assembly.config.d,
                assembly.config.heads,
                assembly.config.layers,
                assembly.config.basis_count,
                assembly.config.d_ffn
            ),
        });
    }
    let shared: Vec<String> = assembly
        .params
        .iter()
        .filter(|(_, p)| p.scope == Scope::Shared)
        .map(|(_, p)| p.name.clone())
        .collect();
    for name in &shared {
        let (_, t) = checkpoint
            .records
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint {
                entry: name.clone(),
                reason: "shared parameter missing from checkpoint".into(),
            })?;
        copy_into(assembly, name, t)?;
    }
    assembly.shared_trained = checkpoint.header.shared_trained;
    Ok(())
}
