//! Incremental (Bowyer–Watson) Delaunay triangulation with ghost triangles.
//!
//! Points are deduplicated and inserted in lexicographic `(x, y)` order, so
//! each new point lies outside the current hull. A triangle is in conflict
//! with a new point only if the point is strictly inside its circumcircle (or
//! strictly beyond a hull edge, for ghosts). Cocircular ties therefore resolve
//! by insertion order, which makes the output a function of the point set
//! alone.

use std::collections::HashSet;

use super::predicates::{in_circle, orient};

const GHOST: usize = usize::MAX;

/// Result of triangulating a point set.
#[derive(Clone, Debug, Default)]
pub struct Triangulation {
    /// Counter-clockwise triangles over original point indices.
    pub triangles: Vec<[usize; 3]>,
    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// `representative[i]` is the index standing in for point `i`; differs
    /// from `i` only for exact duplicates, which map to the smallest index
    /// at the same location.
    pub representative: Vec<usize>,
}

/// Triangulates `points`. All-collinear inputs produce no triangles and the
/// path of consecutive points along the line as edges.
pub fn triangulate(points: &[[f64; 2]]) -> Triangulation {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]).then(points[a][1].total_cmp(&points[b][1])).then(a.cmp(&b)));
    let mut representative: Vec<usize> = (0..n).collect();
    let mut uniq: Vec<usize> = Vec::with_capacity(n);
    for &i in &order {
        match uniq.last() {
            Some(&u) if points[u] == points[i] => representative[i] = u,
            _ => uniq.push(i),
        }
    }

    let mut out = Triangulation { representative, ..Default::default() };
    if uniq.len() < 2 {
        return out;
    }

    let p = |i: usize| points[i];
    let first_off_line = (2..uniq.len()).find(|&t| orient(p(uniq[0]), p(uniq[1]), p(uniq[t])) != 0.0);
    let Some(t) = first_off_line else {
        out.edges = uniq.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1]))).collect();
        out.edges.sort_unstable();
        return out;
    };

    // Fan from the first off-line point over the collinear prefix. Its
    // triangles are Delaunay: any circle meets the line in at most the chord
    // between its two on-line vertices.
    let apex = uniq[t];
    let mut tris: Vec<[usize; 3]> = uniq[..t]
        .windows(2)
        .map(|w| if orient(p(w[0]), p(w[1]), p(apex)) > 0.0 { [w[0], w[1], apex] } else { [w[1], w[0], apex] })
        .collect();
    let directed: HashSet<(usize, usize)> = tris.iter().flat_map(|t| tri_edges(*t)).collect();
    let ghosts: Vec<[usize; 3]> = directed.iter().filter(|&&(a, b)| !directed.contains(&(b, a))).map(|&(a, b)| [b, a, GHOST]).collect();
    tris.extend(ghosts);
    // HashSet iteration order must not leak into the result.
    tris.sort_unstable();

    for &v in &uniq[t + 1..] {
        insert(points, &mut tris, v);
    }

    let mut edges = HashSet::new();
    for tri in tris.iter().filter(|t| t[2] != GHOST) {
        out.triangles.push(*tri);
        for (a, b) in tri_edges(*tri) {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    out.triangles.sort_unstable();
    out.edges = edges.into_iter().collect();
    out.edges.sort_unstable();
    out
}

fn tri_edges(t: [usize; 3]) -> [(usize, usize); 3] {
    [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]
}

fn conflicts(points: &[[f64; 2]], t: [usize; 3], v: usize) -> bool {
    let pv = points[v];
    if t[2] == GHOST {
        // Real edge t0 -> t1 has the exterior on its left.
        let (a, b) = (points[t[0]], points[t[1]]);
        let o = orient(a, b, pv);
        o > 0.0 || (o == 0.0 && (pv[0] - a[0]) * (pv[0] - b[0]) + (pv[1] - a[1]) * (pv[1] - b[1]) < 0.0)
    } else {
        in_circle(points[t[0]], points[t[1]], points[t[2]], pv) > 0.0
    }
}

/// Removes every triangle in conflict with `v` and re-fans the cavity
/// boundary to `v`. New triangles keep the cavity edge's orientation, so
/// ghost/real consistency is maintained by rotating `GHOST` into last place.
fn insert(points: &[[f64; 2]], tris: &mut Vec<[usize; 3]>, v: usize) {
    let (cavity, keep): (Vec<[usize; 3]>, Vec<[usize; 3]>) = tris.iter().partition(|t| conflicts(points, **t, v));
    debug_assert!(!cavity.is_empty(), "inserted point must conflict with some triangle");
    let cavity_edges: HashSet<(usize, usize)> = cavity.iter().flat_map(|t| tri_edges(*t)).collect();
    *tris = keep;
    for t in &cavity {
        for (a, b) in tri_edges(*t) {
            if cavity_edges.contains(&(b, a)) {
                continue;
            }
            let nt = if a == GHOST {
                [b, v, GHOST]
            } else if b == GHOST {
                [v, a, GHOST]
            } else {
                [a, b, v]
            };
            tris.push(nt);
        }
    }
}
