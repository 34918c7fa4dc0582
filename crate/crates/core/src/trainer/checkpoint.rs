//! Checkpoint files.
//!
//! Layout: `u64` little-endian header length, the JSON header, then the
//! body of concatenated little-endian `f32` tensors. The header lists each
//! tensor's shape and byte offset into the body, the frozen set, the model
//! config and a digest of it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RegionBlip};
use crate::params::{Param, ParamStore};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_digest: String,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub frozen: Vec<String>,
}

pub fn config_digest(cfg: &ModelConfig) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    Ok(format!("{:x}", Sha256::digest(json)))
}

pub fn encode_checkpoint(cfg: &ModelConfig, store: &ParamStore) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut frozen = Vec::new();
    let mut body = Vec::new();
    for (name, p) in store.iter() {
        tensors.insert(name.clone(), TensorEntry { shape: p.shape.clone(), offset: body.len() as u64 });
        for v in &p.data {
            body.extend(v.to_le_bytes());
        }
        if p.frozen {
            frozen.push(name.clone());
        }
    }
    let header = CheckpointHeader { format_version: FORMAT_VERSION, config_digest: config_digest(cfg)?, config: cfg.clone(), tensors, frozen };
    let hjson = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + hjson.len() + body.len());
    out.extend((hjson.len() as u64).to_le_bytes());
    out.extend(hjson);
    out.extend(body);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &RegionBlip) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_checkpoint(&model.cfg, &model.store)?)?;
    Ok(())
}

/// Parses and validates a checkpoint image.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamStore)> {
    let len_bytes = bytes.get(..8).ok_or(Error::CheckpointTruncated { needed: 8, actual: bytes.len() as u64 })?;
    let hlen = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes"));
    let hend = 8u64.checked_add(hlen).filter(|&e| e <= bytes.len() as u64).ok_or(Error::CheckpointTruncated {
        needed: 8u64.saturating_add(hlen),
        actual: bytes.len() as u64,
    })? as usize;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[8..hend]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let version = raw.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let header: CheckpointHeader = serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if config_digest(&header.config)? != header.config_digest {
        return Err(Error::Checkpoint("config digest does not match the stored config".into()));
    }
    let body = &bytes[hend..];
    let mut spans: Vec<(u64, u64, &String)> = header
        .tensors
        .iter()
        .map(|(n, e)| (e.offset, e.offset + 4 * e.shape.iter().product::<usize>() as u64, n))
        .collect();
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::CheckpointOverlap { first: w[0].2.clone(), second: w[1].2.clone() });
        }
    }
    if let Some(&(_, end, _)) = spans.iter().max_by_key(|s| s.1) {
        if end > body.len() as u64 {
            return Err(Error::CheckpointTruncated { needed: end, actual: body.len() as u64 });
        }
    }
    let frozen: std::collections::BTreeSet<&String> = header.frozen.iter().collect();
    if let Some(f) = frozen.iter().find(|f| !header.tensors.contains_key(**f)) {
        return Err(Error::Checkpoint(format!("frozen list names unknown tensor `{f}`")));
    }
    let mut store = ParamStore::new();
    for (start, end, name) in spans {
        let data = body[start as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let shape = header.tensors[name].shape.clone();
        store.raw_insert(name.clone(), Param { shape, data, frozen: frozen.contains(name) });
    }
    Ok((header.config, store))
}

pub fn load_checkpoint(path: &Path) -> Result<RegionBlip> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Checkpoint(format!("no checkpoint at {}", path.display())),
        _ => e.into(),
    })?;
    let (cfg, store) = decode_checkpoint(&bytes)?;
    RegionBlip::from_store(cfg, store)
}
