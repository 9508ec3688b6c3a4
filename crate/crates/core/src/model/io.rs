use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelCheckpoint, ModelConfig};
use crate::error::{bail, Result};
use crate::tensor::{Precision, Real, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

const FORMAT: &str = "ul2prune-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    precision: Precision,
    config: ModelConfig,
    metadata: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// Writes `dir/manifest.json` and `dir/tensors.bin`, creating `dir`.
pub fn save_checkpoint<F: Real>(model: &ModelCheckpoint<F>, dir: &Path) -> Result<()> {
    model.validate()?;
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(model.param_count() * F::PRECISION.bytes());
    let mut tensors = Vec::with_capacity(model.tensors.len());
    for (name, t) in &model.tensors {
        let offset = blob.len() as u64;
        t.data().iter().for_each(|&v| v.put_le(&mut blob));
        tensors.push(Entry { name: name.clone(), shape: t.shape().to_vec(), offset, nbytes: blob.len() as u64 - offset });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        precision: F::PRECISION,
        config: model.config.clone(),
        metadata: model.metadata.clone(),
        tensors,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<ModelCheckpoint<F>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| crate::Error::Format(format!("manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        bail!(Format, "unsupported checkpoint {} v{}", manifest.format, manifest.version);
    }
    if manifest.precision != F::PRECISION || manifest.config.precision != F::PRECISION {
        bail!(Format, "checkpoint holds {:?} data, requested {:?}", manifest.precision, F::PRECISION);
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let width = F::PRECISION.bytes();
    let mut tensors = BTreeMap::new();
    let mut expected_offset = 0u64;
    for e in manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.nbytes != (numel * width) as u64 {
            bail!(Format, "tensor {} has inconsistent offset/size in manifest", e.name);
        }
        let end = (e.offset + e.nbytes) as usize;
        if end > blob.len() {
            bail!(Format, "tensor {} truncated: needs bytes up to {end}, blob has {}", e.name, blob.len());
        }
        let data = blob[e.offset as usize..end].chunks_exact(width).map(F::get_le).collect();
        let t = Tensor::new(e.shape, data).map_err(|err| crate::Error::Format(format!("tensor {}: {err}", e.name)))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            bail!(Format, "duplicate tensor {}", e.name);
        }
        expected_offset = end as u64;
    }
    if expected_offset as usize != blob.len() {
        bail!(Format, "blob has {} trailing bytes", blob.len() - expected_offset as usize);
    }
    let model = ModelCheckpoint { config: manifest.config, tensors, metadata: manifest.metadata };
    model.validate().map_err(|e| crate::Error::Format(e.to_string()))?;
    Ok(model)
}
