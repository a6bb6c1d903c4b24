//! Single-file checkpoints in the safetensors container.
//!
//! The header metadata carries a `manifest` (one `{name, shape, dtype,
//! group}` record per tensor), the model `config`, and any caller-supplied
//! string entries. Tensors that belong to no model group (optimizer moments)
//! are tagged `optimizer`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::params::{ParamGroup, ParamStore};
use crate::models::ModelConfig;

pub const OPTIMIZER_GROUP: &str = "optimizer";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub group: String,
}

/// A checkpoint read into memory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

fn group_of(name: &str) -> String {
    ParamGroup::of_name(name)
        .map(|g| g.as_str().to_string())
        .unwrap_or_else(|| OPTIMIZER_GROUP.to_string())
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

fn write_file(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    config: &ModelConfig,
    metadata: &HashMap<String, String>,
) -> Result<()> {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut buffers = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            dtype: "f32".into(),
            group: group_of(name),
        });
        buffers.push((name.clone(), t.dims().to_vec(), tensor_bytes(t)?));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info = metadata.clone();
    info.insert("manifest".into(), serde_json::to_string(&manifest)?);
    info.insert("config".into(), serde_json::to_string(config)?);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, Some(info), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Writes every tensor of `store` plus `extra` tensors.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config: &ModelConfig,
    extra: &[(String, Tensor)],
    metadata: &[(&str, String)],
) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = store
        .all()
        .into_iter()
        .map(|(k, v)| (k, v.as_tensor().clone()))
        .collect();
    for (name, t) in extra {
        if ParamGroup::of_name(name).is_some() || tensors.insert(name.clone(), t.clone()).is_some() {
            return Err(Error::Checkpoint(format!("extra tensor {name} collides with a parameter")));
        }
    }
    let metadata = metadata.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    write_file(path, &tensors, config, &metadata)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let metadata = header.metadata().clone().unwrap_or_default();
    let manifest: Vec<ManifestEntry> = serde_json::from_str(
        metadata
            .get("manifest")
            .ok_or_else(|| bad("missing manifest".into()))?,
    )
    .map_err(|e| bad(format!("manifest: {e}")))?;
    let config: ModelConfig = serde_json::from_str(
        metadata
            .get("config")
            .ok_or_else(|| bad("missing model config".into()))?,
    )
    .map_err(|e| bad(format!("config: {e}")))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for entry in &manifest {
        let view = st
            .tensor(&entry.name)
            .map_err(|e| bad(format!("{}: {e}", entry.name)))?;
        if view.dtype() != Dtype::F32 || view.shape() != entry.shape.as_slice() {
            return Err(bad(format!("{}: dtype or shape disagrees with manifest", entry.name)));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(
            entry.name.clone(),
            Tensor::from_vec(values, entry.shape.clone(), &Device::Cpu)?,
        );
    }
    if st.len() != manifest.len() {
        return Err(bad("tensors present that the manifest does not list".into()));
    }
    Ok(Checkpoint {
        config,
        manifest,
        tensors,
        metadata,
    })
}

impl Checkpoint {
    /// Tensors whose manifest group is one of `groups`.
    pub fn group_values(&self, groups: &[ParamGroup]) -> Result<BTreeMap<String, Tensor>> {
        let wanted: Vec<&str> = groups.iter().map(|g| g.as_str()).collect();
        Ok(self
            .manifest
            .iter()
            .filter(|e| wanted.contains(&e.group.as_str()))
            .map(|e| (e.name.clone(), self.tensors[&e.name].clone()))
            .collect())
    }

    pub fn has_group(&self, group: &str) -> bool {
        self.manifest.iter().any(|e| e.group == group)
    }

    /// Tensors tagged `optimizer`.
    pub fn optimizer_values(&self) -> BTreeMap<String, Tensor> {
        self.manifest
            .iter()
            .filter(|e| e.group == OPTIMIZER_GROUP)
            .map(|e| (e.name.clone(), self.tensors[&e.name].clone()))
            .collect()
    }

    /// Writes a copy holding only the listed groups (metadata is kept).
    pub fn save_subset(&self, path: &Path, groups: &[&str]) -> Result<()> {
        let tensors: BTreeMap<String, Tensor> = self
            .manifest
            .iter()
            .filter(|e| groups.contains(&e.group.as_str()))
            .map(|e| (e.name.clone(), self.tensors[&e.name].clone()))
            .collect();
        let mut metadata = self.metadata.clone();
        metadata.remove("manifest");
        metadata.remove("config");
        write_file(path, &tensors, &self.config, &metadata)
    }
}
