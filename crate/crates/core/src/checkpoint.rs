//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, `u32` little-endian header length, a JSON header
//! (format version, backbone and head specs, input size, parameter table),
//! then every parameter as little-endian `f32` in table order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{BackboneSpec, HeadSpec, Network, RegressionNetwork};
use crate::nn::ParamEntry;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CNTNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    pub input_size: usize,
    pub params: Vec<ParamEntry>,
}

/// Decoded checkpoint before it is bound to a network.
#[derive(Clone, Debug)]
pub struct RawCheckpoint {
    pub header: CheckpointHeader,
    pub entries: Vec<ParamEntry>,
    pub values: Vec<f32>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub fn save(net: &RegressionNetwork, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: "f32-le".into(),
        backbone: net.backbone_spec().clone(),
        head: net.head_spec().clone(),
        input_size: net.input_size(),
        params: net.param_table().to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * net.params().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in net.params() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + header_len).ok_or_else(|| bad(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(path, format!("invalid header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(path, format!("unsupported format version {}", header.format_version)));
    }
    if header.dtype != "f32-le" {
        return Err(bad(path, format!("unsupported dtype {}", header.dtype)));
    }
    let data = &bytes[12 + header_len..];
    let expected: usize = header.params.iter().map(|e| e.len).sum();
    if data.len() != expected * 4 {
        return Err(bad(path, format!("expected {expected} parameters, found {} bytes", data.len())));
    }
    let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(RawCheckpoint { entries: header.params.clone(), header, values })
}

pub fn load(path: impl AsRef<Path>) -> Result<RegressionNetwork> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let h = &raw.header;
    let mut net: RegressionNetwork = Network::assemble(h.backbone.clone(), h.head.clone(), h.input_size)?;
    if net.param_table() != raw.entries.as_slice() {
        let layer = net
            .param_table()
            .iter()
            .zip(&raw.entries)
            .find(|(a, b)| a != b)
            .map(|(a, _)| a.name.clone())
            .unwrap_or_else(|| "parameter table length".into());
        return Err(Error::Build { layer, reason: format!("checkpoint {} does not match its declared architecture", path.display()) });
    }
    net.params_mut().copy_from_slice(&raw.values);
    Ok(net)
}

/// Path of the best-epoch checkpoint inside an output directory.
pub fn default_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}
