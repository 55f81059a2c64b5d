//! MORPHNET1 model checkpoints.
//!
//! Layout: the 9-byte magic `MORPHNET1`, one JSON manifest line ending in
//! `\n` (format version, network config, and for every parameter its name,
//! shape, byte offset and element count), then the little-endian `f64`
//! parameter payload in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_f64s, split_header};
use crate::error::{Error, Result};
use crate::network::{build_network, NetworkConfig, SegmentationModel};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"MORPHNET1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    version: u32,
    config: NetworkConfig,
    params: Vec<ParamEntry>,
    payload_bytes: usize,
}

pub fn encode_checkpoint<S: Scalar>(model: &SegmentationModel<S>) -> Result<Vec<u8>> {
    let mut params = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += 8 * t.len();
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        params,
        payload_bytes: offset,
    };
    let mut bytes = CHECKPOINT_MAGIC.to_vec();
    bytes.extend(serde_json::to_vec(&manifest)?);
    bytes.push(b'\n');
    bytes.reserve(offset);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8], path: &Path) -> Result<SegmentationModel<S>> {
    let (head, payload) = split_header(bytes, CHECKPOINT_MAGIC, path)?;
    let m: CheckpointManifest = serde_json::from_slice(head)
        .map_err(|e| Error::format(path, format!("invalid manifest: {e}")))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {}", m.version),
        ));
    }
    m.config
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if payload.len() != m.payload_bytes {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: m.payload_bytes,
            found: payload.len(),
        });
    }
    let mut params = ParamStore::new();
    let mut next = 0;
    for e in &m.params {
        let numel: usize = e.shape.iter().product();
        if e.offset != next || e.len != numel || e.offset + 8 * e.len > payload.len() {
            return Err(Error::format(
                path,
                format!("parameter {} has inconsistent shape/offset/len", e.name),
            ));
        }
        let values = read_f64s(&payload[e.offset..e.offset + 8 * e.len]);
        let t = Tensor::new(e.shape.clone(), values.into_iter().map(S::of).collect())
            .map_err(|err| Error::format(path, err.to_string()))?;
        params
            .insert(e.name.clone(), t)
            .map_err(|err| Error::format(path, err.to_string()))?;
        next = e.offset + 8 * e.len;
    }
    if next != m.payload_bytes {
        return Err(Error::format(path, "payload has bytes not covered by any parameter"));
    }
    let reference = build_network::<f64>(&m.config, 0)?;
    let layout_matches = reference.params.len() == params.len()
        && reference
            .params
            .iter()
            .zip(params.iter())
            .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape());
    if !layout_matches {
        return Err(Error::format(path, "parameters do not match the network config"));
    }
    Ok(SegmentationModel {
        config: m.config,
        params,
    })
}

pub fn save_checkpoint<S: Scalar>(path: impl AsRef<Path>, model: &SegmentationModel<S>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<SegmentationModel<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
