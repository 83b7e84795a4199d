//! Checkpoints and their single-file encoding.
//!
//! File layout: 4-byte magic `HCCK`, `u32` format version, `u64` header
//! length, a JSON header (model spec, iteration, phase tag, RNG state and a
//! tensor index), then the tensor blobs back to back. Every integer is
//! little-endian. Gradients are transient and not stored.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::spec::ModelSpec;
use crate::nnkernel::{DType, ParamEntry, ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HCCK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseTag {
    Basic,
    Subordinate,
    Transfer,
}

impl PhaseTag {
    pub fn next(self) -> Self {
        match self {
            PhaseTag::Basic => PhaseTag::Subordinate,
            PhaseTag::Subordinate | PhaseTag::Transfer => PhaseTag::Transfer,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub iteration: u64,
    pub phase_tag: PhaseTag,
    pub rng_state: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorIndex {
    name: String,
    role: String,
    lr_mult: f64,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    spec: ModelSpec,
    iteration: u64,
    phase_tag: PhaseTag,
    rng_state: String,
    tensors: Vec<TensorIndex>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut index = Vec::new();
        for e in self.params.iter() {
            for (role, t) in [("weight", &e.weight), ("momentum", &e.momentum)] {
                let offset = blobs.len() as u64;
                t.write_to(&mut blobs, DType::F64).expect("vec write");
                index.push(TensorIndex {
                    name: e.name.clone(),
                    role: role.to_string(),
                    lr_mult: e.lr_mult,
                    offset,
                    length: blobs.len() as u64 - offset,
                });
            }
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            spec: self.spec.clone(),
            iteration: self.iteration,
            phase_tag: self.phase_tag,
            rng_state: hex::encode(&self.rng_state),
            tensors: index,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + blobs.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format { path: origin.to_path_buf(), msg };
        if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let blobs = &bytes[16 + hlen..];
        header.spec.validate()?;
        let mut params = ParamSet::new();
        let mut pending: Option<(String, f64, Tensor)> = None;
        for t in &header.tensors {
            let start = t.offset as usize;
            let raw = blobs
                .get(start..start + t.length as usize)
                .ok_or_else(|| bad(format!("tensor `{}` lies outside the file", t.name)))?;
            let (tensor, _) = Tensor::read_from(raw).map_err(bad)?;
            match (t.role.as_str(), pending.take()) {
                ("weight", None) => pending = Some((t.name.clone(), t.lr_mult, tensor)),
                ("momentum", Some((name, lr_mult, weight))) if name == t.name => {
                    let mut e = ParamEntry::new(name, weight);
                    e.momentum = tensor;
                    e.lr_mult = lr_mult;
                    params.push(e)?;
                }
                _ => return Err(bad(format!("unexpected tensor `{}` ({})", t.name, t.role))),
            }
        }
        if pending.is_some() {
            return Err(bad("weight without momentum".into()));
        }
        let rng_state = hex::decode(&header.rng_state).map_err(|e| bad(e.to_string()))?;
        let ckpt = Checkpoint {
            spec: header.spec,
            params,
            iteration: header.iteration,
            phase_tag: header.phase_tag,
            rng_state,
        };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Parameters match the spec's shapes exactly, in order.
    pub fn check_shapes(&self) -> Result<()> {
        let want = self.spec.param_shapes()?;
        if want.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "spec expects {} parameter tensors, checkpoint has {}",
                want.len(),
                self.params.len()
            )));
        }
        for (w, e) in want.iter().zip(self.params.iter()) {
            if w.name != e.name || w.shape != e.weight.shape() {
                return Err(Error::Validation(format!(
                    "parameter `{}` {:?} does not match spec `{}` {:?}",
                    e.name,
                    e.weight.shape(),
                    w.name,
                    w.shape
                )));
            }
        }
        Ok(())
    }
}
