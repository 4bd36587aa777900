//! Checkpoints: a flat binary of little-endian f32 tensors plus a JSON
//! manifest (`<name>.json` next to the binary) giving each tensor's name,
//! shape and byte offset.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsd_autograd::{Shape, Tensor};

use crate::distillation::Variant;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TsdModel, STORE_PREFIXES};

pub const FORMAT: &str = "f32-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 3],
    /// Byte offset into the binary.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub model: ModelConfig,
    /// Training variant; decides whether inference uses targets.
    #[serde(default)]
    pub variant: Option<Variant>,
    pub num_params: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(model: &TsdModel, variant: Option<Variant>, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(model.num_params() * 4);
    let mut tensors = Vec::new();
    for (prefix, store) in STORE_PREFIXES.iter().zip(model.stores()) {
        for (name, t) in store.iter() {
            let s = t.shape();
            tensors.push(TensorEntry {
                name: format!("{prefix}.{name}"),
                shape: [s.batch, s.rows, s.cols],
                offset: bytes.len(),
            });
            for v in t.data() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        model: model.config,
        variant,
        num_params: model.num_params(),
        tensors,
    };
    write_atomic(path, &bytes)?;
    write_atomic(
        &manifest_path(path),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", mpath.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format {:?}",
            m.format
        )));
    }
    Ok(m)
}

pub fn load(path: &Path) -> Result<TsdModel> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest = read_manifest(path)?;
    let mut tensors = HashMap::new();
    for e in &manifest.tensors {
        let shape = Shape::new(e.shape[0], e.shape[1], e.shape[2]);
        let end = e.offset + shape.numel() * 4;
        let raw = bytes.get(e.offset..end).ok_or_else(|| {
            Error::Checkpoint(format!("tensor {} runs past the end of the file", e.name))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.insert(e.name.clone(), Tensor::from_vec(shape, data));
    }
    let mut model = TsdModel::init(manifest.model, 0)?;
    for (prefix, store) in STORE_PREFIXES.iter().zip(model.stores_mut()) {
        store.load_from(|name| tensors.get(&format!("{prefix}.{name}")))?;
    }
    if !model.is_finite() {
        return Err(Error::Checkpoint(
            "checkpoint holds non-finite values".into(),
        ));
    }
    Ok(model)
}
