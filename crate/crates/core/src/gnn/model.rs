use ndarray::{s, Array1, Array2, Axis};

use super::{Block, GraphBatch, ModelParams, Real};
use crate::error::{Error, Result};
use crate::graph_model::SlideGraph;

/// Training mode normalizes with the statistics of the current batch (nodes
/// for the Base Net, messages for EdgeConv MLPs); evaluation mode uses the
/// running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything the network says about one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    /// Node embeddings `u^(l)`, one `nodes x width` matrix per l = 0..=L.
    pub node_embeddings: Vec<Array2<Real>>,
    /// `nodes x (L + 1)` matrix of per-layer node scores.
    pub node_scores: Array2<Real>,
    /// Per-layer slide scores (column sums of `node_scores`).
    pub layer_scores: Vec<Real>,
    /// Sum of `layer_scores`.
    pub total: Real,
}

impl PredictionBundle {
    /// Per-node score summed over layers.
    pub fn node_totals(&self) -> Vec<Real> {
        self.node_scores.rows().into_iter().map(|r| r.sum()).collect()
    }
}

#[derive(Clone, Debug)]
struct BlockCache {
    input: Array2<Real>,
    xhat: Option<Array2<Real>>,
    inv_std: Option<Array1<Real>>,
    batch_mean: Option<Array1<Real>>,
    batch_var: Option<Array1<Real>>,
    pre_relu: Array2<Real>,
}

/// Intermediate values of a forward pass, needed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    mode: Mode,
    base: Vec<BlockCache>,
    layers: Vec<BlockCache>,
    pub embeddings: Vec<Array2<Real>>,
    pub node_scores: Array2<Real>,
    /// `graphs x (L + 1)`.
    pub layer_scores: Array2<Real>,
    pub totals: Vec<Real>,
}

fn block_forward(block: &Block, x: Array2<Real>, mode: Mode, eps: Real) -> (Array2<Real>, BlockCache) {
    let z = x.dot(&block.linear.weight.t()) + &block.linear.bias;
    let rows = z.nrows();
    let (y, xhat, inv_std, batch_mean, batch_var) = match (&block.norm, mode) {
        (None, _) => (z, None, None, None, None),
        (Some(_), _) if rows == 0 => (z, None, None, None, None),
        (Some(bn), Mode::Train) => {
            let mean = z.mean_axis(Axis(0)).expect("non-empty");
            let centered = &z - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
            let inv = var.mapv(|v| 1.0 / (v + eps).sqrt());
            let xhat = &centered * &inv;
            let y = &xhat * &bn.gamma + &bn.beta;
            (y, Some(xhat), Some(inv), Some(mean), Some(var))
        }
        (Some(bn), Mode::Eval) => {
            let inv = bn.running_var.mapv(|v| 1.0 / (v + eps).sqrt());
            let xhat = (&z - &bn.running_mean) * &inv;
            let y = &xhat * &bn.gamma + &bn.beta;
            (y, Some(xhat), Some(inv), None, None)
        }
    };
    let out = y.mapv(|v| v.max(0.0));
    (out, BlockCache { input: x, xhat, inv_std, batch_mean, batch_var, pre_relu: y })
}

/// Accumulates parameter gradients into `grad` and returns the input gradient.
fn block_backward(block: &Block, cache: &BlockCache, d_out: &Array2<Real>, mode: Mode, grad: &mut Block) -> Array2<Real> {
    let mut dy = d_out.clone();
    ndarray::Zip::from(&mut dy).and(&cache.pre_relu).for_each(|d, &y| {
        if y <= 0.0 {
            *d = 0.0;
        }
    });
    let dz = match (&block.norm, &cache.xhat, &cache.inv_std) {
        (Some(bn), Some(xhat), Some(inv)) => {
            let gbn = grad.norm.as_mut().expect("gradient block mirrors params");
            gbn.gamma = &gbn.gamma + &(&dy * xhat).sum_axis(Axis(0));
            gbn.beta = &gbn.beta + &dy.sum_axis(Axis(0));
            let dxhat = &dy * &bn.gamma;
            match mode {
                Mode::Eval => dxhat * inv,
                Mode::Train => {
                    let n = dy.nrows() as Real;
                    let sum_d = dxhat.sum_axis(Axis(0));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                    ((dxhat * n - &sum_d) - &(xhat * &sum_dx)) * &(inv / n)
                }
            }
        }
        _ => dy,
    };
    grad.linear.weight = &grad.linear.weight + &dz.t().dot(&cache.input);
    grad.linear.bias = &grad.linear.bias + &dz.sum_axis(Axis(0));
    dz.dot(&block.linear.weight)
}

/// Edge-feature matrix: row `m` is `[u_t, u_s - u_t]` for message `s -> t`.
fn gather(u: &Array2<Real>, batch: &GraphBatch) -> Array2<Real> {
    let d = u.ncols();
    let u = u.as_standard_layout();
    let src = u.as_slice().expect("standard layout");
    let mut m = vec![0.0; batch.message_count() * 2 * d];
    for (row, (&t, &s)) in m.chunks_exact_mut(2 * d).zip(batch.msg_target.iter().zip(&batch.msg_source)) {
        let (ut, us) = (&src[t * d..(t + 1) * d], &src[s * d..(s + 1) * d]);
        let (own, diff) = row.split_at_mut(d);
        own.copy_from_slice(ut);
        for c in 0..d {
            diff[c] = us[c] - ut[c];
        }
    }
    Array2::from_shape_vec((batch.message_count(), 2 * d), m).expect("shape")
}

fn gather_backward(dm: &Array2<Real>, batch: &GraphBatch, du: &mut Array2<Real>) {
    let d = du.ncols();
    let dm = dm.as_standard_layout();
    let rows = dm.as_slice().expect("standard layout");
    let out = du.as_slice_mut().expect("standard layout");
    for (row, (&t, &s)) in rows.chunks_exact(2 * d).zip(batch.msg_target.iter().zip(&batch.msg_source)) {
        let (own, diff) = row.split_at(d);
        for c in 0..d {
            out[t * d + c] += own[c] - diff[c];
            out[s * d + c] += diff[c];
        }
    }
}

/// Sums each node's incoming message rows; nodes without messages get zeros.
fn scatter_sum(h: &Array2<Real>, batch: &GraphBatch) -> Array2<Real> {
    let n = batch.node_count();
    let d = h.ncols();
    let h = h.as_standard_layout();
    let rows = h.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * d];
    for k in 0..n {
        let acc = &mut out[k * d..(k + 1) * d];
        for m in batch.msg_offsets[k]..batch.msg_offsets[k + 1] {
            for (a, &v) in acc.iter_mut().zip(&rows[m * d..(m + 1) * d]) {
                *a += v;
            }
        }
    }
    Array2::from_shape_vec((n, d), out).expect("shape")
}

fn scatter_backward(du: &Array2<Real>, batch: &GraphBatch) -> Array2<Real> {
    let d = du.ncols();
    let du = du.as_standard_layout();
    let src = du.as_slice().expect("standard layout");
    let mut dh = Vec::with_capacity(batch.message_count() * d);
    for &t in &batch.msg_target {
        dh.extend_from_slice(&src[t * d..(t + 1) * d]);
    }
    Array2::from_shape_vec((batch.message_count(), d), dh).expect("shape")
}

/// One EdgeConv layer: for every node, the sum over its neighbors of the
/// layer MLP applied to `[u_k, u_j - u_k]`.
pub fn edgeconv_forward(u: &Array2<Real>, batch: &GraphBatch, block: &Block, mode: Mode, eps: Real) -> Array2<Real> {
    let (h, _) = block_forward(block, gather(u, batch), mode, eps);
    scatter_sum(&h, batch)
}

/// Forward pass over a batch of graphs.
pub fn forward_batch(params: &ModelParams, batch: &GraphBatch, mode: Mode) -> Result<ForwardCache> {
    let spec = &params.spec;
    if batch.features.ncols() != spec.input_dim {
        return Err(Error::DimensionMismatch { expected: spec.input_dim, found: batch.features.ncols() });
    }
    let eps = spec.bn_eps as Real;
    let mut u = batch.features.clone();
    let mut base = Vec::with_capacity(params.base.len());
    for block in &params.base {
        let (out, cache) = block_forward(block, u, mode, eps);
        base.push(cache);
        u = out;
    }
    let mut embeddings = vec![u];
    let mut layers = Vec::with_capacity(params.layers.len());
    for block in &params.layers {
        let m = gather(embeddings.last().expect("u0"), batch);
        let (h, cache) = block_forward(block, m, mode, eps);
        layers.push(cache);
        embeddings.push(scatter_sum(&h, batch));
    }

    let n = batch.node_count();
    let depth = params.heads.len();
    let mut node_scores = Array2::zeros((n, depth));
    for (l, (head, emb)) in params.heads.iter().zip(&embeddings).enumerate() {
        let mut col = emb.dot(&head.weight);
        if let Some(&b) = head.bias.first() {
            col += b;
        }
        node_scores.column_mut(l).assign(&col);
    }
    let g = batch.graph_count();
    let mut layer_scores = Array2::zeros((g, depth));
    let mut totals = Vec::with_capacity(g);
    for gi in 0..g {
        let (lo, hi) = (batch.node_offsets[gi], batch.node_offsets[gi + 1]);
        for l in 0..depth {
            layer_scores[[gi, l]] = node_scores.slice(s![lo..hi, l]).iter().sum::<Real>();
        }
        totals.push(layer_scores.row(gi).iter().sum::<Real>());
    }
    Ok(ForwardCache { mode, base, layers, embeddings, node_scores, layer_scores, totals })
}

impl ForwardCache {
    /// Smallest absolute ReLU input over every block; finite differences
    /// are only meaningful when this is large against the step.
    pub fn kink_margin(&self) -> Real {
        self.base.iter().chain(&self.layers).flat_map(|b| b.pre_relu.iter()).fold(Real::INFINITY, |m, &v| m.min(v.abs()))
    }

    /// Splits the batch outputs into one bundle per graph.
    pub fn bundles(&self, batch: &GraphBatch) -> Vec<PredictionBundle> {
        (0..batch.graph_count())
            .map(|gi| {
                let (lo, hi) = (batch.node_offsets[gi], batch.node_offsets[gi + 1]);
                PredictionBundle {
                    node_embeddings: self.embeddings.iter().map(|e| e.slice(s![lo..hi, ..]).to_owned()).collect(),
                    node_scores: self.node_scores.slice(s![lo..hi, ..]).to_owned(),
                    layer_scores: self.layer_scores.row(gi).to_vec(),
                    total: self.totals[gi],
                }
            })
            .collect()
    }
}

/// Inference on one graph with running batch-norm statistics.
pub fn forward(g: &SlideGraph, params: &ModelParams) -> Result<PredictionBundle> {
    let batch = GraphBatch::single(g, params.spec.input_dim)?;
    let cache = forward_batch(params, &batch, Mode::Eval)?;
    Ok(cache.bundles(&batch).pop().expect("one graph"))
}

/// Gradient of `sum_g d_totals[g] * F(G_g) + sum_{k,l} d_node[k,l] * f_l(v_k)`
/// with respect to every trainable parameter.
pub fn backward(
    params: &ModelParams,
    batch: &GraphBatch,
    cache: &ForwardCache,
    d_totals: &[Real],
    d_node_scores: Option<&Array2<Real>>,
) -> Result<ModelParams> {
    if d_totals.len() != batch.graph_count() {
        return Err(Error::DimensionMismatch { expected: batch.graph_count(), found: d_totals.len() });
    }
    let n = batch.node_count();
    let depth = params.heads.len();
    let mut ds = match d_node_scores {
        Some(d) => {
            if d.dim() != (n, depth) {
                return Err(Error::DimensionMismatch { expected: n * depth, found: d.len() });
            }
            d.clone()
        }
        None => Array2::zeros((n, depth)),
    };
    for gi in 0..batch.graph_count() {
        for k in batch.node_offsets[gi]..batch.node_offsets[gi + 1] {
            ds.row_mut(k).mapv_inplace(|v| v + d_totals[gi]);
        }
    }

    let mut grad = params.zeros_like();
    // Head gradients, and the embedding gradients they seed.
    let mut d_emb: Vec<Array2<Real>> = Vec::with_capacity(depth);
    for (l, head) in params.heads.iter().enumerate() {
        let col = ds.column(l);
        grad.heads[l].weight = cache.embeddings[l].t().dot(&col);
        if !head.bias.is_empty() {
            grad.heads[l].bias[0] = col.sum();
        }
        d_emb.push(Array2::from_shape_fn((n, head.weight.len()), |(k, c)| col[k] * head.weight[c]));
    }

    for l in (0..params.layers.len()).rev() {
        let dh = scatter_backward(&d_emb[l + 1], batch);
        let dm = block_backward(&params.layers[l], &cache.layers[l], &dh, cache.mode, &mut grad.layers[l]);
        gather_backward(&dm, batch, &mut d_emb[l]);
    }

    let mut du = d_emb.swap_remove(0);
    for b in (0..params.base.len()).rev() {
        du = block_backward(&params.base[b], &cache.base[b], &du, cache.mode, &mut grad.base[b]);
    }
    Ok(grad)
}

impl ModelParams {
    /// Blends the batch statistics recorded by a training-mode forward pass
    /// into the running statistics: `running = (1 - m) running + m batch`,
    /// with the unbiased batch variance.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let m = self.spec.bn_momentum as Real;
        let pairs = self.base.iter_mut().zip(&cache.base).chain(self.layers.iter_mut().zip(&cache.layers));
        for (block, c) in pairs {
            let (Some(bn), Some(mean), Some(var)) = (&mut block.norm, &c.batch_mean, &c.batch_var) else {
                continue;
            };
            let rows = c.input.nrows();
            if rows < 2 {
                continue;
            }
            let unbiased = var * (rows as Real / (rows - 1) as Real);
            bn.running_mean = &bn.running_mean * (1.0 - m) + &(mean * m);
            bn.running_var = &bn.running_var * (1.0 - m) + &(unbiased * m);
        }
    }
}
