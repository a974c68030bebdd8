//! Versioned JSON model files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, ModelParams, ModelSpec, Real};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &str = "SLIDEGRAPH-MODEL-v1";

/// How batch normalization gathered statistics during training.
pub const BN_MODE: &str = "batch-rows";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub magic: String,
    pub spec: ModelSpec,
    pub bn_mode: String,
    /// Hash of the training configuration that produced the weights.
    pub config_hash: String,
    pub parameters: Vec<StoredTensor>,
    pub buffers: Vec<StoredTensor>,
}

fn store(views: Vec<super::TensorRef<'_>>) -> Vec<StoredTensor> {
    views.into_iter().map(|t| StoredTensor { name: t.name, shape: t.shape, data: t.data.iter().map(|&v| v as f64).collect() }).collect()
}

impl ModelFile {
    pub fn from_params(params: &ModelParams, config_hash: &str) -> Self {
        ModelFile {
            magic: MODEL_MAGIC.into(),
            spec: params.spec.clone(),
            bn_mode: BN_MODE.into(),
            config_hash: config_hash.into(),
            parameters: store(params.trainable()),
            buffers: store(params.buffers()),
        }
    }

    /// Rebuilds parameters, checking names and shapes against the spec.
    pub fn to_params(&self) -> Result<ModelParams> {
        if self.magic != MODEL_MAGIC {
            return Err(Error::invalid(format!("not a model file (magic `{}`)", self.magic)));
        }
        let mut params = init_params(&self.spec)?;
        let expected: Vec<(String, Vec<usize>)> =
            params.trainable().iter().chain(params.buffers().iter()).map(|t| (t.name.clone(), t.shape.clone())).collect();
        let stored: Vec<&StoredTensor> = self.parameters.iter().chain(&self.buffers).collect();
        if stored.len() != expected.len() {
            return Err(Error::invalid(format!("model file has {} tensors, spec needs {}", stored.len(), expected.len())));
        }
        for (s, (name, shape)) in stored.iter().zip(&expected) {
            if &s.name != name || &s.shape != shape || s.data.len() != shape.iter().product::<usize>() {
                return Err(Error::invalid(format!("tensor `{}` {:?} does not match expected `{name}` {shape:?}", s.name, s.shape)));
            }
        }
        let mut targets = params.trainable_mut();
        for (t, s) in targets.iter_mut().zip(&self.parameters) {
            for (d, &v) in t.data.iter_mut().zip(&s.data) {
                *d = v as Real;
            }
        }
        drop(targets);
        for (t, s) in params.buffers_mut().iter_mut().zip(&self.buffers) {
            for (d, &v) in t.data.iter_mut().zip(&s.data) {
                *d = v as Real;
            }
        }
        if !params.is_finite() {
            return Err(Error::invalid("model file contains non-finite values"));
        }
        Ok(params)
    }
}

pub fn save_model(path: &Path, params: &ModelParams, config_hash: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(&ModelFile::from_params(params, config_hash)).map_err(|e| Error::invalid(e.to_string()))?;
    crate::graph_model::io::write_text(path, &text)
}

pub fn load_model_file(path: &Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { context: path.display().to_string(), line: e.line(), message: e.to_string() })
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    load_model_file(path)?.to_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut p = init_params(&ModelSpec { seed: 3, ..ModelSpec::default_for(5) }).unwrap();
        for t in p.buffers_mut() {
            t.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 + i as Real / 7.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&path, &p, "abc").unwrap();
        let f = load_model_file(&path).unwrap();
        assert_eq!(f.magic, MODEL_MAGIC);
        assert_eq!(f.config_hash, "abc");
        assert_eq!(f.to_params().unwrap(), p);
    }

    #[test]
    fn bad_magic_and_shapes_are_rejected() {
        let p = init_params(&ModelSpec::default_for(2)).unwrap();
        let mut f = ModelFile::from_params(&p, "");
        f.magic = "OTHER".into();
        assert!(f.to_params().is_err());
        let mut f = ModelFile::from_params(&p, "");
        f.parameters[0].shape = vec![1, 1];
        assert!(f.to_params().is_err());
        let mut f = ModelFile::from_params(&p, "");
        f.buffers.pop();
        assert!(f.to_params().is_err());
    }
}
