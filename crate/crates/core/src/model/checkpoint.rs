//! Checkpoint file: the magic bytes `MXEX1`, a little-endian `u64` byte
//! length, the model config as canonical (sorted-key) JSON, then every
//! parameter value as a little-endian `f64` in storage order.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::forward::MultiExitModel;
use super::params::ParameterStore;
use super::topology::ExitTopology;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MXEX1";

/// Serializes to JSON with object keys sorted at every level.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps objects in a BTreeMap unless `preserve_order`
    // is enabled, so a round trip through Value sorts the keys.
    let value = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&value)?)
}

pub fn to_bytes(model: &MultiExitModel) -> Result<Vec<u8>> {
    let header = canonical_json(&model.config)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + model.params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in model.params.flat_values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<MultiExitModel> {
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| Error::Checkpoint("missing MXEX1 magic".into()))?;
    if rest.len() < 8 {
        return Err(Error::Checkpoint("truncated header length".into()));
    }
    let (len_bytes, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(Error::Checkpoint("truncated config header".into()));
    }
    let (header, body) = rest.split_at(len);
    let config: ModelConfig = serde_json::from_slice(header)?;
    config.validate()?;
    let topology = ExitTopology::new(config.exit_layers.clone())?;
    if body.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "parameter payload of {} bytes is not a whole number of f64 values",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = ParameterStore::skeleton(&config, &topology);
    params.fill_from(&values)?;
    Ok(MultiExitModel {
        config,
        topology,
        params,
    })
}

pub fn save(model: &MultiExitModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<MultiExitModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
