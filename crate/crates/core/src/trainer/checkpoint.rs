//! Self-describing checkpoint files.
//!
//! Layout:
//!
//! ```text
//! PKTLM-CKPT\n
//! <header byte length, decimal>\n
//! <JSON header>\n
//! <tensor blobs, little-endian f32, in manifest order>
//! ```
//!
//! The header carries the format version, the packet schema, model and
//! training configs, the optimizer step, the shuffle RNG state and a tensor
//! manifest (`name`, `shape`, `offset`, `bytes`, `sha256`). Offsets are
//! relative to the first blob byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::adam::AdamState;
use super::TrainConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::schema::PacketSchema;

pub const CHECKPOINT_MAGIC: &[u8] = b"PKTLM-CKPT\n";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt tensor data: {0}")]
    CorruptTensor(String),
    #[error("malformed checkpoint header: {0}")]
    Malformed(String),
}

/// Position of the shuffle RNG at the start of the current epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 word position as decimal text.
    pub word_pos: String,
}

/// Running loss of a partially finished epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochProgress {
    pub loss_sum: f64,
    pub samples: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub schema: PacketSchema,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Optimizer updates applied so far.
    pub step: u64,
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub rng: RngState,
    pub epoch_progress: EpochProgress,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    schema: PacketSchema,
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    rng: RngState,
    epoch_progress: EpochProgress,
    tensors: Vec<TensorEntry>,
}

fn groups(ckpt: &Checkpoint) -> [(&'static str, &ModelParams<f32>); 3] {
    [("params", &ckpt.params), ("adam.m", &ckpt.adam.m), ("adam.v", &ckpt.adam.v)]
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut tensors = Vec::new();
        for (prefix, params) in groups(self) {
            for t in params.tensors() {
                let offset = blobs.len();
                for x in t.data {
                    blobs.extend_from_slice(&x.to_le_bytes());
                }
                tensors.push(TensorEntry {
                    name: format!("{prefix}.{}", t.name),
                    shape: t.shape,
                    offset,
                    bytes: blobs.len() - offset,
                    sha256: hex::encode(Sha256::digest(&blobs[offset..])),
                });
            }
        }
        let header = Header {
            format_version: self.format_version,
            schema: self.schema.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            rng: self.rng.clone(),
            epoch_progress: self.epoch_progress,
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + json.len() + blobs.len() + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(format!("{}\n", json.len()).as_bytes());
        out.extend_from_slice(&json);
        out.push(b'\n');
        out.extend_from_slice(&blobs);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let malformed = |m: &str| CheckpointError::Malformed(m.to_string());
        let rest = bytes.strip_prefix(CHECKPOINT_MAGIC).ok_or_else(|| malformed("missing magic"))?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| malformed("missing header length"))?;
        let header_len: usize = std::str::from_utf8(&rest[..nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("bad header length"))?;
        let rest = &rest[nl + 1..];
        if rest.len() < header_len + 1 {
            return Err(malformed("header truncated"));
        }
        let header_bytes = &rest[..header_len];
        let probe: serde_json::Value = serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let found = probe.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| malformed("no format_version"))? as u32;
        if found != CHECKPOINT_FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if rest[header_len] != b'\n' {
            return Err(malformed("header not newline-terminated"));
        }
        let blobs = &rest[header_len + 1..];

        let mut ckpt = Checkpoint {
            format_version: header.format_version,
            schema: header.schema,
            model: header.model.clone(),
            train: header.train,
            step: header.step,
            params: ModelParams::zeros(&header.model),
            adam: AdamState::new(&header.model),
            rng: header.rng,
            epoch_progress: header.epoch_progress,
        };
        let expected: Vec<(String, Vec<usize>)> = groups(&ckpt)
            .iter()
            .flat_map(|(prefix, p)| p.tensors().into_iter().map(move |t| (format!("{prefix}.{}", t.name), t.shape)))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(CheckpointError::CorruptTensor(format!(
                "manifest lists {} tensors, model config implies {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
            if &entry.name != name || &entry.shape != shape {
                return Err(CheckpointError::CorruptTensor(format!(
                    "manifest entry {} {:?} does not match expected {} {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
            let numel: usize = shape.iter().product();
            if entry.bytes != numel * 4 {
                return Err(CheckpointError::CorruptTensor(format!("{}: {} bytes for {} elements", entry.name, entry.bytes, numel)));
            }
            let end = entry.offset.checked_add(entry.bytes).filter(|&e| e <= blobs.len()).ok_or_else(|| {
                CheckpointError::CorruptTensor(format!("{}: blob extends past end of file (truncated?)", entry.name))
            })?;
            let blob = &blobs[entry.offset..end];
            if hex::encode(Sha256::digest(blob)) != entry.sha256 {
                return Err(CheckpointError::CorruptTensor(format!("{}: checksum mismatch", entry.name)));
            }
        }
        let mut entries = header.tensors.iter();
        for target in [&mut ckpt.params, &mut ckpt.adam.m, &mut ckpt.adam.v] {
            for dst in target.tensors_mut() {
                let e = entries.next().expect("counted above");
                let blob = &blobs[e.offset..e.offset + e.bytes];
                for (d, chunk) in dst.iter_mut().zip(blob.chunks_exact(4)) {
                    *d = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                }
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::IoFailure {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::IoFailure {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::load(path)
}
