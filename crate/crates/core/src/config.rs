//! Declarative run configuration (TOML) and its provenance hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gnn::ModelSpec;
use crate::graph_model::DEFAULT_MPP;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub s_min: f64,
    /// Feature-kernel decay; estimated from the data when absent.
    pub lambda_h: Option<f64>,
    /// Geometric decay; `1 / d_max` when absent.
    pub lambda_g: Option<f64>,
    /// Patch pairs sampled for the median feature distance.
    pub median_pairs: usize,
    pub seed: u64,
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection { s_min: 0.8, lambda_h: None, lambda_g: None, median_pairs: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    /// Maximum edge length in base-resolution pixels.
    pub d_max: f64,
    pub mpp: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection { d_max: 4000.0, mpp: DEFAULT_MPP }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// When false, raw node features feed the first EdgeConv layer and the
    /// layer-0 head.
    pub base_net: bool,
    pub base_dims: Vec<usize>,
    pub layer_dims: Vec<usize>,
    pub use_batch_norm: bool,
    pub head_bias: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = ModelSpec::default_for(1);
        ModelSection {
            base_net: true,
            base_dims: s.base_dims,
            layer_dims: s.layer_dims,
            use_batch_norm: s.use_batch_norm,
            head_bias: s.head_bias,
            bn_momentum: s.bn_momentum,
            bn_eps: s.bn_eps,
            seed: s.seed,
        }
    }
}

impl ModelSection {
    pub fn spec(&self, input_dim: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            base_dims: if self.base_net { self.base_dims.clone() } else { Vec::new() },
            layer_dims: self.layer_dims.clone(),
            use_batch_norm: self.use_batch_norm,
            head_bias: self.head_bias,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub folds: usize,
}

impl Default for CvSection {
    fn default() -> Self {
        CvSection { folds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { bootstrap_resamples: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub kernel: KernelSection,
    pub graph: GraphSection,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub cv: CvSection,
    pub synth: SynthConfig,
    pub analysis: AnalysisSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.kernel;
        if !(k.s_min > 0.0 && k.s_min <= 1.0) {
            return Err(Error::Config("kernel.s_min must be in (0, 1]".into()));
        }
        for (name, v) in [("lambda_h", k.lambda_h), ("lambda_g", k.lambda_g)] {
            if v.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("kernel.{name} must be positive")));
            }
        }
        if !(self.graph.d_max >= 0.0) || !(self.graph.mpp > 0.0) {
            return Err(Error::Config("graph.d_max must be non-negative and graph.mpp positive".into()));
        }
        if self.cv.folds < 2 {
            return Err(Error::Config("cv.folds must be at least 2".into()));
        }
        self.model.spec(1).validate()?;
        self.training.validate()?;
        self.synth.validate()
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        crate::training::hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.kernel.s_min, 0.8);
        assert_eq!(c.graph.d_max, 4000.0);
        assert_eq!(c.training.learning_rate, 0.001);
        assert_eq!(c.training.weight_decay, 0.0001);
        assert_eq!(c.model.layer_dims, vec![16, 16, 8]);
    }

    #[test]
    fn round_trip_and_hash() {
        let c = Config::from_toml("[training]\nmax_epochs = 7\n[kernel]\nlambda_h = 0.5\n").unwrap();
        assert_eq!(c.training.max_epochs, 7);
        let again = Config::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
        assert_ne!(c.hash(), Config::default().hash());
    }

    #[test]
    fn invalid_values_and_keys_are_rejected() {
        assert!(Config::from_toml("[kernel]\ns_min = 0.0\n").is_err());
        assert!(Config::from_toml("[training]\nlearning_rate = -1.0\n").is_err());
        assert!(Config::from_toml("[graph]\nd_maks = 3\n").is_err());
        assert!(Config::from_toml("[cv]\nfolds = 1\n").is_err());
    }

    #[test]
    fn base_net_switch() {
        let c = Config::from_toml("[model]\nbase_net = false\n").unwrap();
        assert!(c.model.spec(4).base_dims.is_empty());
        assert_eq!(Config::default().model.spec(4), ModelSpec::default_for(4));
    }
}
