//! Domain types for patches, cluster nodes and slide graphs.

mod folds;
pub mod io;

pub use folds::{stratified_assign, stratified_folds, stratified_holdout, FoldSplit};

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geometry::predicates::segments_conflict;

/// Base-resolution microns per pixel that coordinates are expected in.
pub const DEFAULT_MPP: f64 = 0.25;

/// One patch: top-left (or whatever convention the input uses) pixel
/// coordinates at base resolution plus its feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub coords: [f64; 2],
    pub features: Vec<f64>,
}

impl PatchRecord {
    pub fn new(x: f64, y: f64, features: Vec<f64>) -> Self {
        PatchRecord { coords: [x, y], features }
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite()) && self.features.iter().all(|f| f.is_finite())
    }
}

/// All patches of one slide, as read from a feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidePatches {
    pub slide_id: String,
    pub patches: Vec<PatchRecord>,
    pub label: Option<u8>,
}

/// Patch-level dataset: many slides sharing one feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    pub slides: Vec<SlidePatches>,
    pub feature_dim: usize,
    pub feature_names: Option<Vec<String>>,
    pub mpp: f64,
}

impl PatchDataset {
    pub fn slide(&self, id: &str) -> Option<&SlidePatches> {
        self.slides.iter().find(|s| s.slide_id == id)
    }

    /// Attaches labels by slide id; slides missing from `labels` keep `None`.
    pub fn apply_labels(&mut self, labels: &std::collections::BTreeMap<String, u8>) {
        for s in &mut self.slides {
            if let Some(&l) = labels.get(&s.slide_id) {
                s.label = Some(l);
            }
        }
    }
}

/// A graph vertex: the mean position and mean feature vector of the patches
/// that were agglomerated into one cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterNode {
    pub centroid: [f64; 2],
    pub features: Vec<f64>,
    pub member_count: usize,
    pub member_indices: Vec<usize>,
}

/// One slide as an undirected graph of cluster nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideGraph {
    pub slide_id: String,
    pub nodes: Vec<ClusterNode>,
    /// Unordered pairs, stored with `i < j` by the builder.
    pub edges: Vec<(usize, usize)>,
    pub label: Option<u8>,
    pub mpp: f64,
}

impl SlideGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.features.len())
    }

    pub fn centroids(&self) -> Vec<[f64; 2]> {
        self.nodes.iter().map(|n| n.centroid).collect()
    }

    /// Returns a copy with nodes reordered so that new node `i` is old node
    /// `order[i]`; edges are remapped accordingly.
    pub fn permuted(&self, order: &[usize]) -> SlideGraph {
        assert_eq!(order.len(), self.nodes.len());
        let mut inverse = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        SlideGraph {
            slide_id: self.slide_id.clone(),
            nodes: order.iter().map(|&o| self.nodes[o].clone()).collect(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| {
                    let (a, b) = (inverse[a], inverse[b]);
                    (a.min(b), a.max(b))
                })
                .collect(),
            label: self.label,
            mpp: self.mpp,
        }
    }
}

/// Graph-level dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<SlideGraph>,
    pub feature_dim: usize,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    /// Checks shared feature dimension and unique slide ids.
    pub fn new(graphs: Vec<SlideGraph>, feature_names: Option<Vec<String>>) -> Result<Self> {
        let feature_dim = graphs.first().map_or(0, |g| g.feature_dim());
        let mut seen = HashSet::new();
        for g in &graphs {
            if g.feature_dim() != feature_dim {
                return Err(Error::DimensionMismatch { expected: feature_dim, found: g.feature_dim() });
            }
            if !seen.insert(g.slide_id.as_str()) {
                return Err(Error::invalid(format!("duplicate slide id `{}`", g.slide_id)));
            }
        }
        if let Some(names) = &feature_names {
            if names.len() != feature_dim {
                return Err(Error::DimensionMismatch { expected: feature_dim, found: names.len() });
            }
        }
        Ok(Dataset { graphs, feature_dim, feature_names })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Labels of all graphs; fails if any graph is unlabeled.
    pub fn labels(&self) -> Result<Vec<bool>> {
        self.graphs
            .iter()
            .map(|g| match g.label {
                Some(l) => Ok(l == 1),
                None => Err(Error::invalid(format!("slide `{}` has no label", g.slide_id))),
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            graphs: indices.iter().map(|&i| self.graphs[i].clone()).collect(),
            feature_dim: self.feature_dim,
            feature_names: self.feature_names.clone(),
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Lists every violated structural invariant of `g`. An empty list means the
/// graph is well formed: valid, loop-free, duplicate-free edges no longer than
/// `d_max`, consistent node records, and a crossing-free (planar) embedding.
pub fn validate_graph(g: &SlideGraph, d_max: f64) -> Vec<String> {
    let mut out = Vec::new();
    let n = g.nodes.len();
    if n == 0 {
        out.push("graph has no nodes".to_string());
    }
    let dim = g.feature_dim();
    for (i, node) in g.nodes.iter().enumerate() {
        if node.member_count == 0 {
            out.push(format!("node {i} has zero members"));
        }
        if !node.member_indices.is_empty() && node.member_indices.len() != node.member_count {
            out.push(format!("node {i} member_count {} differs from {} member indices", node.member_count, node.member_indices.len()));
        }
        if node.features.len() != dim {
            out.push(format!("node {i} has {} features, expected {dim}", node.features.len()));
        }
        if !node.centroid.iter().chain(&node.features).all(|v| v.is_finite()) {
            out.push(format!("node {i} has non-finite values"));
        }
    }
    if let Some(l) = g.label {
        if l > 1 {
            out.push(format!("label {l} is not binary"));
        }
    }

    let mut seen = HashSet::new();
    let mut sound = Vec::with_capacity(g.edges.len());
    for (e, &(a, b)) in g.edges.iter().enumerate() {
        if a >= n || b >= n {
            out.push(format!("edge {e} ({a},{b}) references a missing node"));
            continue;
        }
        if a == b {
            out.push(format!("self-loop at edge {e}"));
            continue;
        }
        if !seen.insert((a.min(b), a.max(b))) {
            out.push(format!("duplicate edge {e} ({a},{b})"));
            continue;
        }
        let d = dist(g.nodes[a].centroid, g.nodes[b].centroid);
        if d > d_max || d.is_nan() {
            out.push(format!("edge {e} ({a},{b}) has length {d} > d_max {d_max}"));
        }
        sound.push(e);
    }

    for (e, f) in crossing_pairs(g, &sound) {
        out.push(format!("edges {e} and {f} intersect"));
    }
    out
}

/// Pairs of edges (by index) whose segments meet anywhere other than at a
/// shared endpoint. Candidate pairs are pruned by an x-extent sweep.
fn crossing_pairs(g: &SlideGraph, edges: &[usize]) -> Vec<(usize, usize)> {
    let seg = |e: usize| {
        let (a, b) = g.edges[e];
        (a, b, g.nodes[a].centroid, g.nodes[b].centroid)
    };
    let mut order: Vec<(f64, f64, usize)> = edges
        .iter()
        .map(|&e| {
            let (_, _, p, q) = seg(e);
            (p[0].min(q[0]), p[0].max(q[0]), e)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));

    let mut out = Vec::new();
    for i in 0..order.len() {
        let (_, max_x, e) = order[i];
        let (a, b, p1, p2) = seg(e);
        for &(min_x2, _, f) in &order[i + 1..] {
            if min_x2 > max_x {
                break;
            }
            let (c, d, q1, q2) = seg(f);
            let shared = [a, b].iter().filter(|v| **v == c || **v == d).count();
            let hit = match shared {
                0 => segments_conflict(p1, p2, q1, q2),
                1 => {
                    // Only a collinear overlap beyond the shared vertex counts.
                    let (s, u, v) = if a == c {
                        (p1, p2, q2)
                    } else if a == d {
                        (p1, p2, q1)
                    } else if b == c {
                        (p2, p1, q2)
                    } else {
                        (p2, p1, q1)
                    };
                    crate::geometry::predicates::orient(s, u, v) == 0.0
                        && (u[0] - s[0]) * (v[0] - s[0]) + (u[1] - s[1]) * (v[1] - s[1]) > 0.0
                }
                _ => false,
            };
            if hit {
                out.push((e.min(f), e.max(f)));
            }
        }
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn node(x: f64, y: f64, f: &[f64]) -> ClusterNode {
        ClusterNode { centroid: [x, y], features: f.to_vec(), member_count: 1, member_indices: vec![0] }
    }

    fn triangle() -> SlideGraph {
        SlideGraph {
            slide_id: "t".into(),
            nodes: vec![node(0.0, 0.0, &[1.0]), node(100.0, 0.0, &[2.0]), node(0.0, 100.0, &[3.0])],
            edges: vec![(0, 1), (1, 2), (0, 2)],
            label: Some(1),
            mpp: DEFAULT_MPP,
        }
    }

    #[test]
    fn well_formed_triangle_has_no_violations() {
        assert!(validate_graph(&triangle(), 4000.0).is_empty());
    }

    #[test]
    fn self_loop_is_reported() {
        let mut g = triangle();
        g.edges = vec![(0, 0)];
        assert_eq!(validate_graph(&g, 4000.0), vec!["self-loop at edge 0".to_string()]);
    }

    #[test]
    fn long_edge_is_reported() {
        let g = SlideGraph {
            slide_id: "s".into(),
            nodes: vec![node(0.0, 0.0, &[0.0]), node(3000.0, 4000.0, &[0.0])],
            edges: vec![(0, 1)],
            label: None,
            mpp: DEFAULT_MPP,
        };
        let v = validate_graph(&g, 4000.0);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("edge 0") && v[0].contains("5000"), "{v:?}");
        assert!(validate_graph(&g, 5000.0).is_empty());
    }

    #[test]
    fn mutations_each_introduce_a_violation() {
        let base = triangle();
        let mut mutants = Vec::new();
        let mut g = base.clone();
        g.edges.push((1, 0));
        mutants.push(g);
        let mut g = base.clone();
        g.edges.push((0, 7));
        mutants.push(g);
        let mut g = base.clone();
        g.nodes[1].member_count = 0;
        mutants.push(g);
        let mut g = base.clone();
        g.nodes[2].features.push(1.0);
        mutants.push(g);
        let mut g = base.clone();
        g.nodes[0].centroid[0] = f64::NAN;
        mutants.push(g);
        let mut g = base.clone();
        g.label = Some(3);
        mutants.push(g);
        let mut g = base.clone();
        g.nodes[2].member_indices = vec![0, 1];
        mutants.push(g);
        for (i, m) in mutants.iter().enumerate() {
            assert!(!validate_graph(m, 4000.0).is_empty(), "mutant {i} passed");
        }
    }

    #[test]
    fn crossing_edges_are_reported() {
        let g = SlideGraph {
            slide_id: "x".into(),
            nodes: vec![node(0.0, 0.0, &[0.0]), node(10.0, 10.0, &[0.0]), node(0.0, 10.0, &[0.0]), node(10.0, 0.0, &[0.0])],
            edges: vec![(0, 1), (2, 3), (0, 2)],
            label: None,
            mpp: DEFAULT_MPP,
        };
        assert_eq!(validate_graph(&g, 100.0), vec!["edges 0 and 1 intersect".to_string()]);
    }

    #[test]
    fn collinear_overlap_through_shared_vertex_is_reported() {
        let g = SlideGraph {
            slide_id: "c".into(),
            nodes: vec![node(0.0, 0.0, &[0.0]), node(1.0, 0.0, &[0.0]), node(2.0, 0.0, &[0.0])],
            edges: vec![(0, 1), (0, 2)],
            label: None,
            mpp: DEFAULT_MPP,
        };
        assert_eq!(validate_graph(&g, 100.0).len(), 1);
    }

    #[test]
    fn permutation_remaps_edges() {
        let g = triangle();
        let p = g.permuted(&[2, 0, 1]);
        assert_eq!(p.nodes[0], g.nodes[2]);
        assert!(validate_graph(&p, 4000.0).is_empty());
        assert_eq!(p.edges.len(), 3);
    }

    #[test]
    fn dataset_rejects_duplicates_and_mismatch() {
        let g = triangle();
        assert!(Dataset::new(vec![g.clone(), g.clone()], None).is_err());
        let mut h = g.clone();
        h.slide_id = "u".into();
        for n in &mut h.nodes {
            n.features.push(0.0);
        }
        assert!(matches!(Dataset::new(vec![g, h], None), Err(Error::DimensionMismatch { .. })));
    }
}
