//! EdgeConv graph network producing per-node, per-layer scores that pool to a
//! slide score, with hand-written reverse-mode gradients.
//!
//! Dataflow for one graph with node features `x`:
//!
//! ```text
//! u0 = BaseNet(x)                          (Linear -> BN -> ReLU blocks)
//! ul[k] = sum_{j in N(k)} H_l(ul-1[k], ul-1[j] - ul-1[k])   l = 1..L
//! f_l(k) = w_l . ul[k] + b_l               node score per layer
//! F_l = sum_k f_l(k),  F = sum_l F_l       slide score
//! ```

mod batch;
pub mod io;
mod model;

pub use batch::GraphBatch;
pub use model::{backward, edgeconv_forward, forward, forward_batch, ForwardCache, Mode, PredictionBundle};

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Floating-point type used for all network arithmetic.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

fn default_momentum() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    1e-5
}

fn yes() -> bool {
    true
}

/// Network shape and initialization seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Hidden widths of the Base Net; empty feeds raw features to layer 1.
    pub base_dims: Vec<usize>,
    /// Output width of each EdgeConv layer's MLP.
    pub layer_dims: Vec<usize>,
    #[serde(default = "yes")]
    pub use_batch_norm: bool,
    #[serde(default = "yes")]
    pub head_bias: bool,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    /// One 16-wide Base Net block and EdgeConv widths 16, 16, 8.
    pub fn default_for(input_dim: usize) -> Self {
        ModelSpec {
            input_dim,
            base_dims: vec![16],
            layer_dims: vec![16, 16, 8],
            use_batch_norm: true,
            head_bias: true,
            bn_momentum: default_momentum(),
            bn_eps: default_eps(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if self.layer_dims.is_empty() {
            return Err(Error::Config("at least one EdgeConv layer is required".into()));
        }
        if self.base_dims.iter().chain(&self.layer_dims).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("invalid batch-norm momentum or epsilon".into()));
        }
        Ok(())
    }

    /// Width of the embedding entering layer 1 (and the layer-0 head).
    pub fn embedding_dim(&self) -> usize {
        *self.base_dims.last().unwrap_or(&self.input_dim)
    }

    /// Number of layers L; there are L + 1 heads.
    pub fn depth(&self) -> usize {
        self.layer_dims.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out x in`.
    pub weight: Array2<Real>,
    pub bias: Array1<Real>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<Real>,
    pub beta: Array1<Real>,
    pub running_mean: Array1<Real>,
    pub running_var: Array1<Real>,
}

/// Linear -> (BatchNorm) -> ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Array1<Real>,
    /// Length 1 with a bias term, 0 without.
    pub bias: Array1<Real>,
}

/// All weights of the network plus batch-norm running statistics. The same
/// type doubles as the gradient container (running statistics unused).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub base: Vec<Block>,
    pub layers: Vec<Block>,
    pub heads: Vec<Head>,
}

fn uniform(r: &mut rng::Rng, rows: usize, cols: usize, bound: f64) -> Array2<Real> {
    Array2::from_shape_fn((rows, cols), |_| (r.random::<f64>() * 2.0 - 1.0) * bound).mapv(|v| v as Real)
}

fn new_block(r: &mut rng::Rng, fan_in: usize, width: usize, bn: bool) -> Block {
    Block {
        linear: Linear { weight: uniform(r, width, fan_in, 1.0 / (fan_in as f64).sqrt()), bias: Array1::zeros(width) },
        norm: bn.then(|| BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }),
    }
}

/// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, biases zero,
/// batch-norm scale one. Deterministic in `spec.seed`.
pub fn init_params(spec: &ModelSpec) -> Result<ModelParams> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, 0x1417);
    let mut base = Vec::new();
    let mut dim = spec.input_dim;
    for &w in &spec.base_dims {
        base.push(new_block(&mut r, dim, w, spec.use_batch_norm));
        dim = w;
    }
    let mut dims = vec![dim];
    let mut layers = Vec::new();
    for &w in &spec.layer_dims {
        layers.push(new_block(&mut r, 2 * dim, w, spec.use_batch_norm));
        dim = w;
        dims.push(w);
    }
    let heads = dims
        .iter()
        .map(|&d| Head {
            weight: uniform(&mut r, 1, d, 1.0 / (d as f64).sqrt()).row(0).to_owned(),
            bias: Array1::zeros(usize::from(spec.head_bias)),
        })
        .collect();
    Ok(ModelParams { spec: spec.clone(), base, layers, heads })
}

/// A named view of one parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [Real],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [Real],
}

fn blocks_named<'a>(prefix: &str, blocks: &'a [Block]) -> impl Iterator<Item = (String, &'a Block)> + 'a {
    let prefix = prefix.to_string();
    blocks.iter().enumerate().map(move |(i, b)| (format!("{prefix}.{i}"), b))
}

impl ModelParams {
    /// Trainable tensors in a fixed order (optimizer state and model files
    /// rely on it).
    pub fn trainable(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (p, b) in blocks_named("base", &self.base).chain(blocks_named("layers", &self.layers)) {
            let w = &b.linear.weight;
            out.push(TensorRef { name: format!("{p}.weight"), shape: w.shape().to_vec(), data: w.as_slice().expect("standard layout") });
            out.push(TensorRef {
                name: format!("{p}.bias"),
                shape: vec![b.linear.bias.len()],
                data: b.linear.bias.as_slice().expect("standard layout"),
            });
            if let Some(n) = &b.norm {
                out.push(TensorRef {
                    name: format!("{p}.bn.gamma"),
                    shape: vec![n.gamma.len()],
                    data: n.gamma.as_slice().expect("standard layout"),
                });
                out.push(TensorRef {
                    name: format!("{p}.bn.beta"),
                    shape: vec![n.beta.len()],
                    data: n.beta.as_slice().expect("standard layout"),
                });
            }
        }
        for (i, h) in self.heads.iter().enumerate() {
            out.push(TensorRef {
                name: format!("heads.{i}.weight"),
                shape: vec![h.weight.len()],
                data: h.weight.as_slice().expect("standard layout"),
            });
            if !h.bias.is_empty() {
                out.push(TensorRef { name: format!("heads.{i}.bias"), shape: vec![1], data: h.bias.as_slice().expect("standard layout") });
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let base = self.base.iter_mut().enumerate().map(|(i, b)| (format!("base.{i}"), b));
        let layers = self.layers.iter_mut().enumerate().map(|(i, b)| (format!("layers.{i}"), b));
        for (p, b) in base.chain(layers) {
            out.push(TensorMut { name: format!("{p}.weight"), data: b.linear.weight.as_slice_mut().expect("standard layout") });
            out.push(TensorMut { name: format!("{p}.bias"), data: b.linear.bias.as_slice_mut().expect("standard layout") });
            if let Some(n) = &mut b.norm {
                out.push(TensorMut { name: format!("{p}.bn.gamma"), data: n.gamma.as_slice_mut().expect("standard layout") });
                out.push(TensorMut { name: format!("{p}.bn.beta"), data: n.beta.as_slice_mut().expect("standard layout") });
            }
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push(TensorMut { name: format!("heads.{i}.weight"), data: h.weight.as_slice_mut().expect("standard layout") });
            if !h.bias.is_empty() {
                out.push(TensorMut { name: format!("heads.{i}.bias"), data: h.bias.as_slice_mut().expect("standard layout") });
            }
        }
        out
    }

    /// Batch-norm running statistics, named like `base.0.bn.running_mean`.
    pub fn buffers(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (p, b) in blocks_named("base", &self.base).chain(blocks_named("layers", &self.layers)) {
            if let Some(n) = &b.norm {
                out.push(TensorRef {
                    name: format!("{p}.bn.running_mean"),
                    shape: vec![n.running_mean.len()],
                    data: n.running_mean.as_slice().expect("standard layout"),
                });
                out.push(TensorRef {
                    name: format!("{p}.bn.running_var"),
                    shape: vec![n.running_var.len()],
                    data: n.running_var.as_slice().expect("standard layout"),
                });
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let base = self.base.iter_mut().enumerate().map(|(i, b)| (format!("base.{i}"), b));
        let layers = self.layers.iter_mut().enumerate().map(|(i, b)| (format!("layers.{i}"), b));
        for (p, b) in base.chain(layers) {
            if let Some(n) = &mut b.norm {
                out.push(TensorMut { name: format!("{p}.bn.running_mean"), data: n.running_mean.as_slice_mut().expect("standard layout") });
                out.push(TensorMut { name: format!("{p}.bn.running_var"), data: n.running_var.as_slice_mut().expect("standard layout") });
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.data.len()).sum()
    }

    /// Same shapes, every trainable value zero.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for t in z.trainable_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().chain(self.buffers().iter()).all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}
