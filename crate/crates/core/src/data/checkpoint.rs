//! Binary checkpoint container.
//!
//! Layout: the magic bytes `VNCA`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then the payload of
//! little-endian `f32` tensors laid out back to back in manifest order. The
//! header carries the model and training configuration, the tensor manifest,
//! counters, the RNG state and a SHA-256 digest of the payload.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vae::ModelConfig;

pub const MAGIC: &[u8; 4] = b"VNCA";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Full encoder plus hypernetwork decoder.
    VaeNca,
    /// A single rule trained directly on one image.
    Rule,
}

/// Everything in the header except the manifest and the digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Optimizer steps completed.
    pub step: u64,
    pub rng_state: Option<[u64; 4]>,
    pub best_loss: Option<f64>,
    /// Adam's own step counter, when optimizer moments are stored.
    pub adam_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset within the payload.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = std::collections::HashSet::new();
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::Usage(format!("duplicate checkpoint tensor {name}")));
            }
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            manifest.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            meta: self.meta.clone(),
            tensors: manifest,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses and verifies a checkpoint. `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let parse = |offset: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < PREAMBLE {
            return Err(parse(
                0,
                format!("file is {} bytes, shorter than the preamble", bytes.len()),
            ));
        }
        if &bytes[..4] != MAGIC {
            return Err(parse(0, "missing VNCA magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = PREAMBLE
            .checked_add(usize::try_from(header_len).unwrap_or(usize::MAX))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| parse(8, format!("header length {header_len} exceeds file size")))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| parse(PREAMBLE, format!("bad header: {e}")))?;
        let payload = &bytes[header_end..];

        let mut expected_offset = 0u64;
        for entry in &header.tensors {
            let numel: usize = entry.shape.iter().product();
            if entry.offset != expected_offset || entry.nbytes != numel as u64 * 4 {
                return Err(parse(
                    header_end + entry.offset as usize,
                    format!(
                        "manifest entry {} is not contiguous or has the wrong size",
                        entry.name
                    ),
                ));
            }
            expected_offset += entry.nbytes;
        }
        if expected_offset != payload.len() as u64 {
            return Err(parse(
                header_end,
                format!(
                    "manifest covers {expected_offset} payload bytes, file has {}",
                    payload.len()
                ),
            ));
        }
        let actual = hex::encode(Sha256::digest(payload));
        if actual != header.payload_sha256 {
            return Err(Error::ChecksumMismatch {
                expected: header.payload_sha256,
                actual,
            });
        }

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let start = entry.offset as usize;
            let raw = &payload[start..start + entry.nbytes as usize];
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape, data)
                .map_err(|e| parse(header_end + start, format!("tensor {}: {e}", entry.name)))?;
            tensors.push((entry.name, t));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// crash never leaves a truncated checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let file_name = path
            .file_name()
            .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
