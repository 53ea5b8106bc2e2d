//! Binary checkpoint format:
//!
//! ```text
//! b"LIPSCAN1" | u64 LE header length | UTF-8 JSON header | theta (f64 LE) | theta_init (f64 LE)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, InitScheme, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LIPSCAN1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub init_scheme: InitScheme,
    /// Fingerprint of the training configuration that produced theta.
    pub train_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f64>,
    pub theta_init: Vec<f64>,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Offsets {
    theta: usize,
    theta_init: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    architecture: Architecture,
    param_count: usize,
    meta: CheckpointMeta,
    /// Byte offsets of the arrays, relative to the end of the header.
    offsets: Offsets,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let p = ckpt.network.param_count();
    if ckpt.theta_init.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: ckpt.theta_init.len(),
        });
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        architecture: ckpt.network.architecture().clone(),
        param_count: p,
        meta: ckpt.meta.clone(),
        offsets: Offsets {
            theta: 0,
            theta_init: p * 8,
        },
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 16 * p);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in ckpt.network.theta().iter().chain(&ckpt.theta_init) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |detail: String| Error::CorruptFile {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(corrupt(format!("header length {header_len} exceeds file size")));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| corrupt(format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let mut network = Network::<f64>::new(header.architecture).map_err(|e| corrupt(e.to_string()))?;
    let p = network.param_count();
    if header.param_count != p {
        return Err(corrupt(format!(
            "header declares {} parameters, architecture has {p}",
            header.param_count
        )));
    }
    if header.offsets.theta != 0 || header.offsets.theta_init != p * 8 {
        return Err(corrupt("unexpected array offsets".into()));
    }
    let arrays = &body[header_len..];
    if arrays.len() != 16 * p {
        return Err(corrupt(format!(
            "expected {} array bytes, found {}",
            16 * p,
            arrays.len()
        )));
    }
    let mut values = arrays
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let theta: Vec<f64> = values.by_ref().take(p).collect();
    let theta_init: Vec<f64> = values.collect();
    network.set_theta(theta)?;
    Ok(Checkpoint {
        network,
        theta_init,
        meta: header.meta,
    })
}
