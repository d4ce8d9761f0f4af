//! Named tensor stores and their per-segment safetensors files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor, Var};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::init::sorted_vars;

/// Tensors by dotted name, e.g. `denoiser.conv_in.weight`.
pub type ParamStore = BTreeMap<String, Tensor>;

/// Leading path component of a parameter name.
pub fn segment_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Detached copies of every variable in `varmap`.
pub fn snapshot(varmap: &VarMap) -> Result<ParamStore> {
    sorted_vars(varmap)
        .into_iter()
        .map(|(k, v)| Ok((k, v.as_tensor().detach().copy()?)))
        .collect()
}

/// Inserts `store` entries into `varmap` as fresh variables, replacing any existing ones.
pub fn preload(varmap: &VarMap, store: &ParamStore, dtype: candle_core::DType) -> Result<()> {
    let mut data = varmap.data().lock().unwrap();
    for (k, t) in store {
        data.insert(k.clone(), Var::from_tensor(&t.to_dtype(dtype)?)?);
    }
    Ok(())
}

/// Overwrites the values of existing variables; every name in `store` must exist.
pub fn assign(varmap: &VarMap, store: &ParamStore) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    for (k, t) in store {
        let var = data
            .get(k)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {k}")))?;
        if var.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {k}: stored {:?}, model {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

/// Entries under `prefix.`, renamed into `into.` (or stripped if `into` is empty).
pub fn rename_prefix(store: &ParamStore, prefix: &str, into: &str) -> ParamStore {
    let from = format!("{prefix}.");
    store
        .iter()
        .filter_map(|(k, t)| {
            let rest = k.strip_prefix(&from)?;
            let name = if into.is_empty() { rest.to_string() } else { format!("{into}.{rest}") };
            Some((name, t.clone()))
        })
        .collect()
}

pub fn save_store(store: &ParamStore, path: &Path) -> Result<()> {
    let map: HashMap<String, Tensor> = store.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

pub fn load_store(path: &Path, device: &Device) -> Result<ParamStore> {
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("missing {}", path.display())));
    }
    Ok(candle_core::safetensors::load(path, device)?.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub name: String,
    pub file: String,
    pub sha256: String,
    pub tensors: usize,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Writes one `{segment}.safetensors` per leading name component.
pub fn save_segments(store: &ParamStore, dir: &Path) -> Result<Vec<SegmentInfo>> {
    std::fs::create_dir_all(dir)?;
    let mut groups: BTreeMap<&str, ParamStore> = BTreeMap::new();
    for (k, t) in store {
        groups.entry(segment_of(k)).or_default().insert(k.clone(), t.clone());
    }
    groups
        .into_iter()
        .map(|(name, part)| {
            let file = format!("{name}.safetensors");
            let path = dir.join(&file);
            save_store(&part, &path)?;
            Ok(SegmentInfo {
                name: name.to_string(),
                file,
                sha256: sha256_file(&path)?,
                tensors: part.len(),
            })
        })
        .collect()
}

/// Loads and integrity-checks the listed segments.
pub fn load_segments(dir: &Path, segments: &[SegmentInfo], device: &Device) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for seg in segments {
        let path = dir.join(&seg.file);
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("missing segment {}", path.display())));
        }
        let digest = sha256_file(&path)?;
        if digest != seg.sha256 {
            return Err(Error::Checkpoint(format!("segment {} fails its checksum", seg.name)));
        }
        let part = load_store(&path, device)?;
        if part.len() != seg.tensors {
            return Err(Error::Checkpoint(format!("segment {} tensor count changed", seg.name)));
        }
        store.extend(part);
    }
    Ok(store)
}
