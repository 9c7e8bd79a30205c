//! Checkpoints as safetensors files.
//!
//! Parameters are stored as `param.<name>`, optimizer moments as
//! `optim.m.<name>` and `optim.v.<name>`, all little-endian F64. The model
//! configuration, optimizer settings, step and seed live in the header
//! metadata as JSON strings.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::types::ModelConfig;

const FORMAT: &str = "shipseg-checkpoint-1";
const PARAM: &str = "param.";
const MOMENT1: &str = "optim.m.";
const MOMENT2: &str = "optim.v.";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(path: &Path, name: &str, view: &TensorView<'_>) -> Result<Tensor> {
    if view.dtype() != Dtype::F64 {
        return Err(Error::format(
            path,
            format!("tensor `{name}` is {:?}, expected F64", view.dtype()),
        ));
    }
    let data = view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::try_new(view.shape(), data)
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

fn meta<T: DeserializeOwned>(path: &Path, map: &HashMap<String, String>, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::format(path, format!("missing metadata `{key}`")))?;
    serde_json::from_str(raw).map_err(|e| Error::format(path, format!("metadata `{key}`: {e}")))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, t) in self.params.iter() {
            owned.push((format!("{PARAM}{name}"), t.shape().to_vec(), to_bytes(t)));
        }
        for (prefix, moments) in [(MOMENT1, &self.optimizer.m), (MOMENT2, &self.optimizer.v)] {
            for (name, t) in moments {
                owned.push((format!("{prefix}{name}"), t.shape().to_vec(), to_bytes(t)));
            }
        }
        let views = owned
            .iter()
            .map(|(n, s, b)| Ok((n.as_str(), TensorView::new(Dtype::F64, s.clone(), b)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let mut info = HashMap::new();
        info.insert("format".to_string(), json(&FORMAT));
        info.insert("model_config".to_string(), json(&self.model));
        info.insert("optimizer".to_string(), json(&self.optimizer.config));
        info.insert("step".to_string(), json(&self.optimizer.step));
        info.insert("seed".to_string(), json(&self.seed));
        let bytes = safetensors::serialize(views, Some(info))
            .map_err(|e| Error::format(path, e.to_string()))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) =
            SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let info = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::format(path, "no metadata"))?;
        let format: String = meta(path, &info, "format")?;
        if format != FORMAT {
            return Err(Error::format(
                path,
                format!("unknown checkpoint format `{format}`"),
            ));
        }
        let model: ModelConfig = meta(path, &info, "model_config")?;
        let config: AdamWConfig = meta(path, &info, "optimizer")?;
        let step: u64 = meta(path, &info, "step")?;
        let seed: u64 = meta(path, &info, "seed")?;
        let st =
            SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let mut params = ParamStore::new();
        let mut optimizer = AdamW::new(config);
        optimizer.step = step;
        for (name, view) in st.tensors() {
            let t = from_view(path, &name, &view)?;
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n, t);
            } else if let Some(n) = name.strip_prefix(MOMENT1) {
                optimizer.m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(MOMENT2) {
                optimizer.v.insert(n.to_string(), t);
            } else {
                return Err(Error::format(path, format!("unexpected tensor `{name}`")));
            }
        }
        Ok(Self {
            model,
            seed,
            params,
            optimizer,
        })
    }

    /// Checks that this checkpoint can run under `expected`: identical
    /// architecture fields and a parameter set of matching names and shapes.
    pub fn check_compatible(&self, expected: &ModelConfig, reference: &ParamStore) -> Result<()> {
        let mut problems = config_differences(expected, &self.model)
            .into_iter()
            .filter(|k| !matches!(k.as_str(), "seed" | "score_threshold" | "mask_threshold"))
            .collect::<Vec<_>>();
        for (name, t) in reference.iter() {
            match self.params.get(name) {
                None => problems.push(format!("missing parameter {name}")),
                Some(p) if p.shape() != t.shape() => problems.push(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    p.shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for name in self.params.names() {
            if !reference.contains(name) {
                problems.push(format!("unexpected parameter {name}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(problems.join(", ")))
        }
    }
}

/// Copies every parameter of `source` whose name and shape match an entry
/// of `store` and returns the copied names. Entry point for starting from
/// externally trained weights, e.g. a backbone converted to this naming.
pub fn import_matching(store: &mut ParamStore, source: &ParamStore) -> Vec<String> {
    let mut copied = Vec::new();
    for (name, t) in source.iter() {
        if let Some(dst) = store.get_mut(name) {
            if dst.shape() == t.shape() {
                *dst = t.clone();
                copied.push(name.clone());
            }
        }
    }
    copied
}

/// Dotted paths of the leaf fields whose values differ between two
/// serializable configurations.
pub fn config_differences<T: Serialize>(a: &T, b: &T) -> Vec<String> {
    let (a, b) = (
        serde_json::to_value(a).expect("serializable"),
        serde_json::to_value(b).expect("serializable"),
    );
    let mut out = Vec::new();
    diff_values("", &a, &b, &mut out);
    out
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a.as_object(), b.as_object()) {
        (Some(ao), Some(bo)) => {
            let mut keys: Vec<&String> = ao.keys().chain(bo.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let child = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match (ao.get(k), bo.get(k)) {
                    (Some(x), Some(y)) => diff_values(&child, x, y, out),
                    _ => out.push(child),
                }
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}
