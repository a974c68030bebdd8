use ndarray::Array2;

use super::Real;
use crate::error::{Error, Result};
use crate::graph_model::SlideGraph;

/// Disjoint union of one or more graphs, with every undirected edge expanded
/// into two directed messages. Messages are sorted by target then source, so
/// each node's incoming messages form one contiguous run.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub features: Array2<Real>,
    /// `node_offsets[g]..node_offsets[g + 1]` are graph `g`'s nodes.
    pub node_offsets: Vec<usize>,
    pub msg_target: Vec<usize>,
    pub msg_source: Vec<usize>,
    /// `msg_offsets[k]..msg_offsets[k + 1]` are the messages into node `k`.
    pub msg_offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&SlideGraph], input_dim: usize) -> Result<Self> {
        let total: usize = graphs.iter().map(|g| g.nodes.len()).sum();
        let mut features = Array2::zeros((total, input_dim));
        let mut node_offsets = Vec::with_capacity(graphs.len() + 1);
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut base = 0;
        for g in graphs {
            node_offsets.push(base);
            for (k, node) in g.nodes.iter().enumerate() {
                if node.features.len() != input_dim {
                    return Err(Error::DimensionMismatch { expected: input_dim, found: node.features.len() });
                }
                for (f, &v) in node.features.iter().enumerate() {
                    features[[base + k, f]] = v as Real;
                }
            }
            for &(a, b) in &g.edges {
                if a >= g.nodes.len() || b >= g.nodes.len() || a == b {
                    return Err(Error::invalid(format!("slide `{}`: invalid edge ({a},{b})", g.slide_id)));
                }
                pairs.push((base + a, base + b));
                pairs.push((base + b, base + a));
            }
            base += g.nodes.len();
        }
        node_offsets.push(base);
        pairs.sort_unstable();
        pairs.dedup();
        let mut msg_offsets = vec![0; total + 1];
        for &(t, _) in &pairs {
            msg_offsets[t + 1] += 1;
        }
        for k in 0..total {
            msg_offsets[k + 1] += msg_offsets[k];
        }
        Ok(GraphBatch {
            features,
            node_offsets,
            msg_target: pairs.iter().map(|p| p.0).collect(),
            msg_source: pairs.iter().map(|p| p.1).collect(),
            msg_offsets,
        })
    }

    pub fn single(g: &SlideGraph, input_dim: usize) -> Result<Self> {
        Self::new(&[g], input_dim)
    }

    pub fn graph_count(&self) -> usize {
        self.node_offsets.len() - 1
    }

    pub fn node_count(&self) -> usize {
        self.features.nrows()
    }

    pub fn message_count(&self) -> usize {
        self.msg_target.len()
    }
}
