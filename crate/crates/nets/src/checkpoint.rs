//! Named `f32` tensors plus one JSON metadata entry in a safetensors file.
//! A single metadata key keeps the header byte-identical across runs.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub const META_KEY: &str = "config";

pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn save<M: Serialize>(path: &Path, meta: &M, tensors: &[NamedTensor]) -> Result<()> {
    let err = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    let json = serde_json::to_string(meta).map_err(|e| err(e.to_string()))?;
    let bytes: Vec<Vec<u8>> = tensors.iter().map(|t| t.data.iter().flat_map(|v| v.to_le_bytes()).collect()).collect();
    let mut views = Vec::with_capacity(tensors.len());
    for (t, b) in tensors.iter().zip(&bytes) {
        let view = TensorView::new(Dtype::F32, t.shape.clone(), b).map_err(|e| err(format!("{}: {e}", t.name)))?;
        views.push((t.name.clone(), view));
    }
    let meta = HashMap::from([(META_KEY.to_string(), json)]);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let data = safetensors::serialize(views, &Some(meta)).map_err(|e| err(e.to_string()))?;
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

pub struct Loaded<M> {
    pub meta: M,
    pub tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

impl<M> Loaded<M> {
    /// Removes a tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize], path: &Path) -> Result<Vec<f32>> {
        let (s, d) = self.tensors.remove(name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing tensor {name}"),
        })?;
        if s != shape {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("tensor {name} has shape {s:?}, expected {shape:?}"),
            });
        }
        Ok(d)
    }
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<Loaded<M>> {
    let err = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| err(e.to_string()))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| err(format!("no {META_KEY:?} metadata")))?;
    let meta = serde_json::from_str(json).map_err(|e| err(format!("metadata: {e}")))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| err(e.to_string()))?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(err(format!("tensor {name} is {:?}, expected F32", view.dtype())));
        }
        let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.insert(name, (view.shape().to_vec(), data));
    }
    Ok(Loaded { meta, tensors })
}
