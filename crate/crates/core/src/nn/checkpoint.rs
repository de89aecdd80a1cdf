//! Versioned binary container for network parameters and training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TSECKPT\0"
//! version  u32
//! hlen     u32      byte length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! payload  f64 values, one section after another, in header order
//! ```
//!
//! The header always carries `"kind"` and `"sections": [{"name", "len"}]`;
//! the remaining fields depend on the kind.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::Segment;
use super::unet::{NetworkConfig, ScoreNetwork};
use crate::error::{Error, Result};
use crate::sde::SdeParams;
use crate::stft::StftConfig;

pub const MAGIC: &[u8; 8] = b"TSECKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub name: String,
    pub len: usize,
}

/// Parsed container: JSON header plus named `f64` sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Value,
    pub sections: BTreeMap<String, Vec<f64>>,
}

pub fn encode_container(kind: &str, mut header: Value, sections: &[(&str, &[f64])]) -> Result<Vec<u8>> {
    let obj = header
        .as_object_mut()
        .ok_or_else(|| Error::Checkpoint("header must be a JSON object".into()))?;
    obj.insert("kind".into(), Value::String(kind.into()));
    let info: Vec<SectionInfo> = sections
        .iter()
        .map(|(n, d)| SectionInfo {
            name: (*n).into(),
            len: d.len(),
        })
        .collect();
    obj.insert("sections".into(), serde_json::to_value(info).map_err(json_err)?);
    let hbytes = serde_json::to_vec(&header).map_err(json_err)?;
    let payload: usize = sections.iter().map(|(_, d)| d.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + hbytes.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(hbytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&hbytes);
    for (_, data) in sections {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8], expected_kind: &str) -> Result<Container> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let hend = 16 + hlen;
    if bytes.len() < hend {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Value = serde_json::from_slice(&bytes[16..hend]).map_err(json_err)?;
    let kind = header.get("kind").and_then(Value::as_str).unwrap_or("");
    if kind != expected_kind {
        return Err(Error::Checkpoint(format!("expected a {expected_kind} file, found kind {kind:?}")));
    }
    let info: Vec<SectionInfo> = serde_json::from_value(header.get("sections").cloned().unwrap_or(Value::Null))
        .map_err(json_err)?;
    let total: usize = info.iter().map(|s| s.len * 8).sum();
    if bytes.len() != hend + total {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header declares {total}",
            bytes.len() - hend
        )));
    }
    let mut sections = BTreeMap::new();
    let mut pos = hend;
    for s in info {
        let data = bytes[pos..pos + s.len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += s.len * 8;
        sections.insert(s.name, data);
    }
    Ok(Container { header, sections })
}

/// Writes `bytes` to `path` through a temporary sibling file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn json_err(e: serde_json::Error) -> Error {
    Error::Checkpoint(format!("header: {e}"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMetadata {
    pub step: u64,
    pub seed: u64,
    /// `general` or `finetune`.
    pub mode: String,
    /// Set for fine-tuned models.
    pub target_speaker: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    network: NetworkConfig,
    sde: SdeParams,
    stft: StftConfig,
    metadata: TrainingMetadata,
    segments: Vec<Segment>,
}

/// Network configuration, parameters and training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetworkCheckpoint {
    pub network: NetworkConfig,
    pub sde: SdeParams,
    pub stft: StftConfig,
    pub metadata: TrainingMetadata,
    pub params: Vec<f64>,
}

impl ScoreNetworkCheckpoint {
    pub const KIND: &'static str = "score_network";

    /// Builds the network described by this checkpoint and checks the
    /// parameter count against it.
    pub fn build(&self) -> Result<ScoreNetwork> {
        let net = ScoreNetwork::new(self.network.clone(), self.sde)?;
        if net.param_count() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "configuration needs {} parameters, checkpoint has {}",
                net.param_count(),
                self.params.len()
            )));
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = self.build()?;
        let header = CheckpointHeader {
            network: self.network.clone(),
            sde: self.sde,
            stft: self.stft,
            metadata: self.metadata.clone(),
            segments: net.segments().to_vec(),
        };
        let header = serde_json::to_value(header).map_err(json_err)?;
        encode_container(Self::KIND, header, &[("params", &self.params)])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = decode_container(bytes, Self::KIND)?;
        let h: CheckpointHeader = serde_json::from_value(c.header).map_err(json_err)?;
        let params = c
            .sections
            .remove("params")
            .ok_or_else(|| Error::Checkpoint("missing params section".into()))?;
        let ckpt = Self {
            network: h.network,
            sde: h.sde,
            stft: h.stft,
            metadata: h.metadata,
            params,
        };
        let net = ckpt.build()?;
        if net.segments() != h.segments.as_slice() {
            return Err(Error::Checkpoint("segment table does not match the configuration".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
