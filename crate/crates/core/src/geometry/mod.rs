//! Delaunay edges over cluster centroids, distance filtering, and the full
//! patches-to-graph construction.

pub mod delaunay;
pub mod predicates;

use serde::{Deserialize, Serialize};

use crate::clustering::{agglomerate, aggregate_clusters, KernelParams};
use crate::error::{Error, Result};
use crate::graph_model::{validate_graph, SlideGraph, SlidePatches};

pub use delaunay::{triangulate, Triangulation};

/// Undirected edges `(i, j)`, `i < j`, sorted and duplicate-free.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSet {
    pairs: Vec<(usize, usize)>,
}

impl EdgeSet {
    /// Normalizes orientation, drops self-loops and duplicates.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pairs: Vec<(usize, usize)> = pairs.into_iter().filter(|(a, b)| a != b).map(|(a, b)| (a.min(b), a.max(b))).collect();
        pairs.sort_unstable();
        pairs.dedup();
        EdgeSet { pairs }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn into_pairs(self) -> Vec<(usize, usize)> {
        self.pairs
    }
}

/// Delaunay edge set of `points`. Exact duplicates are collapsed onto the
/// smallest index at their location and each duplicate is joined to that
/// representative by a zero-length edge, so no point is left isolated.
pub fn delaunay_edges(points: &[[f64; 2]]) -> Result<EdgeSet> {
    if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::invalid(format!("point {i} is not finite")));
    }
    let t = triangulate(points);
    let dup_links = t.representative.iter().enumerate().filter(|(i, r)| *i != **r).map(|(i, &r)| (i, r));
    Ok(EdgeSet::from_pairs(t.edges.iter().copied().chain(dup_links)))
}

/// Keeps edges whose endpoint distance is at most `d_max`.
pub fn filter_edges(edges: &EdgeSet, points: &[[f64; 2]], d_max: f64) -> EdgeSet {
    EdgeSet {
        pairs: edges
            .pairs
            .iter()
            .copied()
            .filter(|&(a, b)| {
                let (p, q) = (points[a], points[b]);
                (p[0] - q[0]).hypot(p[1] - q[1]) <= d_max
            })
            .collect(),
    }
}

/// Clusters a slide's patches, places one node per cluster at its centroid,
/// and connects nodes by distance-limited Delaunay edges.
pub fn build_slide_graph(slide: &SlidePatches, p: &KernelParams, d_max: f64, mpp: f64) -> Result<SlideGraph> {
    if slide.patches.is_empty() {
        return Err(Error::invalid(format!("slide `{}` has no patches", slide.slide_id)));
    }
    p.validate()?;
    if let Some(i) = slide.patches.iter().position(|q| !q.is_finite()) {
        return Err(Error::invalid(format!("slide `{}`: patch {i} has non-finite values", slide.slide_id)));
    }
    let assignment = agglomerate(&slide.patches, p)?;
    let nodes = aggregate_clusters(&slide.patches, &assignment)?;
    let centroids: Vec<[f64; 2]> = nodes.iter().map(|n| n.centroid).collect();
    let edges = filter_edges(&delaunay_edges(&centroids)?, &centroids, d_max);
    let g = SlideGraph { slide_id: slide.slide_id.clone(), nodes, edges: edges.into_pairs(), label: slide.label, mpp };
    let violations = validate_graph(&g, d_max);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(g)
}
