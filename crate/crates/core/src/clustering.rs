//! Joint feature/geometric similarity kernels and average-linkage
//! agglomerative clustering of patches on the resulting similarity matrix.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_model::{ClusterNode, PatchRecord};
use crate::parallel;
use crate::rng;

/// Kernel decay rates and the agglomeration stopping threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lambda_h: f64,
    pub lambda_g: f64,
    pub s_min: f64,
}

impl KernelParams {
    pub fn new(lambda_h: f64, lambda_g: f64, s_min: f64) -> Result<Self> {
        let p = KernelParams { lambda_h, lambda_g, s_min };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_h > 0.0 && self.lambda_h.is_finite()) {
            return Err(Error::Config(format!("lambda_h must be positive, got {}", self.lambda_h)));
        }
        if !(self.lambda_g > 0.0 && self.lambda_g.is_finite()) {
            return Err(Error::Config(format!("lambda_g must be positive, got {}", self.lambda_g)));
        }
        if !(self.s_min > 0.0 && self.s_min <= 1.0) {
            return Err(Error::Config(format!("s_min must lie in (0, 1], got {}", self.s_min)));
        }
        Ok(())
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `exp(-lambda_h * ||a - b||)`.
pub fn feature_kernel(a: &[f64], b: &[f64], lambda_h: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    Ok((-lambda_h * euclidean(a, b)).exp())
}

/// `exp(-lambda_g * ||a - b||)` on pixel coordinates.
pub fn geometric_kernel(a: [f64; 2], b: [f64; 2], lambda_g: f64) -> f64 {
    (-lambda_g * euclidean(&a, &b)).exp()
}

/// Product of the feature and geometric kernels.
pub fn joint_kernel(a: &PatchRecord, b: &PatchRecord, p: &KernelParams) -> Result<f64> {
    Ok(feature_kernel(&a.features, &b.features, p.lambda_h)? * geometric_kernel(a.coords, b.coords, p.lambda_g))
}

/// Symmetric similarity matrix with unit diagonal, stored as its strict
/// upper triangle in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    upper: Vec<f64>,
}

#[inline]
fn condensed(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

impl SimilarityMatrix {
    /// Builds a matrix from a full square array, which must be symmetric.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut upper = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: row.len() });
            }
            for j in i + 1..n {
                if row[j] != rows[j][i] {
                    return Err(Error::invalid(format!("similarity matrix not symmetric at ({i},{j})")));
                }
                upper.push(row[j]);
            }
        }
        Ok(SimilarityMatrix { n, upper })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => self.upper[condensed(self.n, i, j)],
            std::cmp::Ordering::Greater => self.upper[condensed(self.n, j, i)],
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.get(i, j)).collect()).collect()
    }
}

/// Joint-kernel similarity of every patch pair. Rows are filled by parallel
/// workers; each entry is computed independently so the result does not
/// depend on scheduling.
pub fn pairwise_similarity(patches: &[PatchRecord], p: &KernelParams) -> Result<SimilarityMatrix> {
    let n = patches.len();
    if n == 0 {
        return Err(Error::invalid("no patches to compare"));
    }
    let dim = patches[0].features.len();
    if let Some(bad) = patches.iter().find(|q| q.features.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, found: bad.features.len() });
    }
    let mut upper = vec![0.0; n * (n - 1) / 2];
    // Split the condensed buffer at row boundaries.
    let mut rows: Vec<&mut [f64]> = Vec::with_capacity(n);
    let mut rest = upper.as_mut_slice();
    for i in 0..n {
        let (row, tail) = rest.split_at_mut(n - i - 1);
        rows.push(row);
        rest = tail;
    }
    parallel::for_each_chunk_mut(&mut rows, 16, |chunk_idx, chunk| {
        for (k, row) in chunk.iter_mut().enumerate() {
            let i = chunk_idx * 16 + k;
            for (off, slot) in row.iter_mut().enumerate() {
                let j = i + 1 + off;
                *slot = (-p.lambda_h * euclidean(&patches[i].features, &patches[j].features)).exp()
                    * (-p.lambda_g * euclidean(&patches[i].coords, &patches[j].coords)).exp();
            }
        }
    });
    Ok(SimilarityMatrix { n, upper })
}

/// Cluster id per patch, ids contiguous from 0 and ordered by each cluster's
/// smallest member index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub cluster_count: usize,
}

impl ClusterAssignment {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cluster_count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// One agglomeration step: clusters identified by their smallest member
/// index, merged at the given average similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub kept: usize,
    pub absorbed: usize,
    pub similarity: f64,
}

/// Average-linkage agglomeration of patches under the joint kernel.
pub fn agglomerate(patches: &[PatchRecord], p: &KernelParams) -> Result<ClusterAssignment> {
    let sim = pairwise_similarity(patches, p)?;
    Ok(agglomerate_matrix(&sim, p.s_min).0)
}

#[derive(Clone, Copy)]
struct Best {
    value: f64,
    partner: usize,
}

/// Greedy average linkage on a similarity matrix: repeatedly merge the pair of
/// clusters with the highest mean pairwise similarity while that mean is at
/// least `s_min`. Equal linkage values merge the lexicographically smallest
/// `(low id, high id)` pair first. A merged cluster keeps the lower id.
pub fn agglomerate_matrix(sim: &SimilarityMatrix, s_min: f64) -> (ClusterAssignment, Vec<Merge>) {
    let n = sim.len();
    let mut size = vec![1usize; n];
    let mut alive = vec![true; n];
    // Total similarity between clusters, condensed like `sim`.
    let mut total = sim.upper.clone();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut merges = Vec::new();

    let linkage = |total: &[f64], size: &[usize], a: usize, b: usize| -> f64 {
        let (i, j) = (a.min(b), a.max(b));
        total[condensed(n, i, j)] / (size[i] * size[j]) as f64
    };
    let find_best = |total: &[f64], size: &[usize], alive: &[bool], c: usize| -> Option<Best> {
        let mut best: Option<Best> = None;
        for d in (0..n).filter(|&d| d != c && alive[d]) {
            let v = linkage(total, size, c, d);
            if best.is_none_or(|b| v > b.value) {
                best = Some(Best { value: v, partner: d });
            }
        }
        best
    };

    let mut best: Vec<Option<Best>> = (0..n).map(|c| find_best(&total, &size, &alive, c)).collect();

    loop {
        let mut pick: Option<(f64, usize, usize)> = None;
        for c in (0..n).filter(|&c| alive[c]) {
            if let Some(b) = best[c] {
                let (lo, hi) = (c.min(b.partner), c.max(b.partner));
                let better = match pick {
                    None => true,
                    Some((v, plo, phi)) => b.value > v || (b.value == v && (lo, hi) < (plo, phi)),
                };
                if better {
                    pick = Some((b.value, lo, hi));
                }
            }
        }
        let Some((value, a, b)) = pick else { break };
        if !(value >= s_min) {
            break;
        }

        merges.push(Merge { kept: a, absorbed: b, similarity: value });
        alive[b] = false;
        parent[b] = a;
        for c in (0..n).filter(|&c| alive[c] && c != a) {
            let bc = total[condensed(n, c.min(b), c.max(b))];
            total[condensed(n, c.min(a), c.max(a))] += bc;
        }
        size[a] += size[b];
        best[b] = None;
        best[a] = find_best(&total, &size, &alive, a);
        for c in (0..n).filter(|&c| alive[c] && c != a) {
            match best[c] {
                Some(bc) if bc.partner == a || bc.partner == b => {
                    best[c] = find_best(&total, &size, &alive, c);
                }
                Some(bc) => {
                    let v = linkage(&total, &size, c, a);
                    if v > bc.value || (v == bc.value && a < bc.partner) {
                        best[c] = Some(Best { value: v, partner: a });
                    }
                }
                None => best[c] = find_best(&total, &size, &alive, c),
            }
        }
    }

    // Roots are the smallest member of each cluster; number them in order.
    let mut id_of_root = vec![usize::MAX; n];
    let mut labels = Vec::with_capacity(n);
    let mut count = 0;
    for i in 0..n {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        if id_of_root[r] == usize::MAX {
            id_of_root[r] = count;
            count += 1;
        }
        labels.push(id_of_root[r]);
    }
    (ClusterAssignment { labels, cluster_count: count }, merges)
}

/// Mean position and mean feature vector of each cluster's patches.
pub fn aggregate_clusters(patches: &[PatchRecord], assignment: &ClusterAssignment) -> Result<Vec<ClusterNode>> {
    if assignment.labels.len() != patches.len() {
        return Err(Error::DimensionMismatch { expected: patches.len(), found: assignment.labels.len() });
    }
    let dim = patches.first().map_or(0, |p| p.features.len());
    let mut nodes = Vec::with_capacity(assignment.cluster_count);
    for members in assignment.members() {
        if members.is_empty() {
            return Err(Error::invalid("cluster ids are not contiguous"));
        }
        let k = members.len() as f64;
        let mut centroid = [0.0; 2];
        let mut features = vec![0.0; dim];
        for &m in &members {
            centroid[0] += patches[m].coords[0];
            centroid[1] += patches[m].coords[1];
            for (f, v) in features.iter_mut().zip(&patches[m].features) {
                *f += v;
            }
        }
        centroid[0] /= k;
        centroid[1] /= k;
        features.iter_mut().for_each(|f| *f /= k);
        nodes.push(ClusterNode { centroid, features, member_count: members.len(), member_indices: members });
    }
    Ok(nodes)
}

/// Median Euclidean feature distance over `pairs` random within-slide patch
/// pairs. Falls back to 1.0 when no pair can be drawn or all features agree.
pub fn median_feature_distance(slides: &[&[PatchRecord]], pairs: usize, seed: u64) -> f64 {
    let usable: Vec<&[PatchRecord]> = slides.iter().copied().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() || pairs == 0 {
        return 1.0;
    }
    let mut r = rng::stream(seed, 0x3ED1);
    let mut d: Vec<f64> = (0..pairs)
        .map(|_| {
            let s = usable[r.random_range(0..usable.len())];
            let i = r.random_range(0..s.len());
            let mut j = r.random_range(0..s.len() - 1);
            if j >= i {
                j += 1;
            }
            euclidean(&s[i].features, &s[j].features)
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let m = if d.len() % 2 == 1 { d[d.len() / 2] } else { 0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2]) };
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn patch(x: f64, y: f64, f: &[f64]) -> PatchRecord {
        PatchRecord::new(x, y, f.to_vec())
    }

    #[test]
    fn feature_kernel_values() {
        assert_eq!(feature_kernel(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap(), 1.0);
        assert!((feature_kernel(&[0.0], &[1.0], 1.0).unwrap() - 0.367_879_441_171_442_33).abs() < 1e-15);
        assert!((feature_kernel(&[0.0, 0.0], &[3.0, 4.0], 0.5).unwrap() - (-2.5f64).exp()).abs() < 1e-15);
        assert!((feature_kernel(&[0.0, 0.0], &[3.0, 4.0], 0.5).unwrap() - 0.082_085).abs() < 1e-6);
        assert!(matches!(feature_kernel(&[0.0], &[0.0, 1.0], 1.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn geometric_kernel_values() {
        assert_eq!(geometric_kernel([5.0, 5.0], [5.0, 5.0], 0.001), 1.0);
        assert!((geometric_kernel([0.0, 0.0], [1000.0, 0.0], 0.001) - (-1f64).exp()).abs() < 1e-15);
        assert!((geometric_kernel([0.0, 0.0], [0.0, 2000.0], 0.001) - 0.135_335).abs() < 1e-6);
    }

    #[test]
    fn joint_kernel_is_the_product() {
        let p = KernelParams::new(0.7, 0.002, 0.8).unwrap();
        let mut r = crate::rng::rng(5);
        for _ in 0..100 {
            let a = patch(r.random::<f64>() * 500.0, r.random::<f64>() * 500.0, &[r.random(), r.random()]);
            let b = patch(r.random::<f64>() * 500.0, r.random::<f64>() * 500.0, &[r.random(), r.random()]);
            let j = joint_kernel(&a, &b, &p).unwrap();
            let prod = feature_kernel(&a.features, &b.features, 0.7).unwrap() * geometric_kernel(a.coords, b.coords, 0.002);
            assert!((j - prod).abs() <= 1e-15);
            assert_eq!(j, joint_kernel(&b, &a, &p).unwrap());
            assert!(j > 0.0 && j <= 1.0);
        }
        // k_h = k_g = 0.5
        let half = std::f64::consts::LN_2;
        let q = KernelParams::new(half, half, 0.8).unwrap();
        let v = joint_kernel(&patch(0.0, 0.0, &[0.0]), &patch(1.0, 0.0, &[1.0]), &q).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn params_are_validated() {
        assert!(KernelParams::new(0.0, 1.0, 0.5).is_err());
        assert!(KernelParams::new(1.0, -1.0, 0.5).is_err());
        assert!(KernelParams::new(1.0, 1.0, 0.0).is_err());
        assert!(KernelParams::new(1.0, 1.0, 1.5).is_err());
        assert!(KernelParams::new(1.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn similarity_matrix_shape() {
        let p = KernelParams::new(1.0, 0.01, 0.8).unwrap();
        let one = pairwise_similarity(&[patch(0.0, 0.0, &[1.0])], &p).unwrap();
        assert_eq!(one.to_dense(), vec![vec![1.0]]);
        let a = patch(0.0, 0.0, &[1.0]);
        let b = patch(30.0, 40.0, &[2.0]);
        let two = pairwise_similarity(&[a.clone(), b.clone()], &p).unwrap();
        assert_eq!(two.get(0, 1), joint_kernel(&a, &b, &p).unwrap());
        assert_eq!(two.get(1, 0), two.get(0, 1));
    }

    #[test]
    fn similarity_matches_elementwise_evaluation() {
        let p = KernelParams::new(0.3, 0.004, 0.8).unwrap();
        let mut r = crate::rng::rng(20);
        let pts: Vec<PatchRecord> =
            (0..20).map(|_| patch(r.random::<f64>() * 900.0, r.random::<f64>() * 900.0, &[r.random(), r.random(), r.random()])).collect();
        let m = pairwise_similarity(&pts, &p).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let want = if i == j { 1.0 } else { joint_kernel(&pts[i], &pts[j], &p).unwrap() };
                assert_eq!(m.get(i, j), want);
            }
        }
    }

    #[test]
    fn identical_pair_clusters_apart_from_outlier() {
        // Third patch has joint similarity 0.1 to both others.
        let lam = -(0.1f64).ln();
        let p = KernelParams::new(lam, 1e-9, 0.8).unwrap();
        let pts = vec![patch(0.0, 0.0, &[0.0]), patch(0.0, 0.0, &[0.0]), patch(0.0, 0.0, &[1.0])];
        let a = agglomerate(&pts, &p).unwrap();
        assert_eq!(a.labels, vec![0, 0, 1]);
        assert_eq!(a.cluster_count, 2);
    }

    #[test]
    fn single_patch_is_one_cluster() {
        let p = KernelParams::new(1.0, 1.0, 0.8).unwrap();
        let a = agglomerate(&[patch(1.0, 2.0, &[3.0])], &p).unwrap();
        assert_eq!(a, ClusterAssignment { labels: vec![0], cluster_count: 1 });
    }

    #[test]
    fn threshold_extremes() {
        let mut r = crate::rng::rng(77);
        let mut pts: Vec<PatchRecord> =
            (0..15).map(|_| patch(r.random::<f64>() * 100.0, r.random::<f64>() * 100.0, &[r.random()])).collect();
        pts.push(pts[3].clone());
        pts.push(pts[7].clone());
        let p = KernelParams::new(1.0, 0.01, 1.0).unwrap();
        assert_eq!(agglomerate(&pts, &p).unwrap().cluster_count, 15);
        let p = KernelParams::new(1.0, 0.01, 1e-12).unwrap();
        assert_eq!(agglomerate(&pts, &p).unwrap().cluster_count, 1);
    }

    #[test]
    fn merges_respect_threshold_on_replay() {
        let p = KernelParams::new(2.0, 0.005, 0.6).unwrap();
        let mut r = crate::rng::rng(8);
        let pts: Vec<PatchRecord> =
            (0..60).map(|_| patch(r.random::<f64>() * 400.0, r.random::<f64>() * 400.0, &[r.random::<f64>() * 0.3])).collect();
        let sim = pairwise_similarity(&pts, &p).unwrap();
        let (assign, merges) = agglomerate_matrix(&sim, p.s_min);
        assert_eq!(merges.len(), 60 - assign.cluster_count);
        // Replay with explicit member lists and direct averages.
        let mut members: Vec<Vec<usize>> = (0..60).map(|i| vec![i]).collect();
        for m in &merges {
            let (a, b) = (&members[m.kept], &members[m.absorbed]);
            let mut s = 0.0;
            for &i in a {
                for &j in b {
                    s += sim.get(i, j);
                }
            }
            let avg = s / (a.len() * b.len()) as f64;
            assert!((avg - m.similarity).abs() < 1e-12);
            assert!(avg >= p.s_min - 1e-12);
            let moved = std::mem::take(&mut members[m.absorbed]);
            members[m.kept].extend(moved);
        }
    }

    #[test]
    fn aggregation_means() {
        let pts = vec![patch(0.0, 0.0, &[0.0]), patch(2.0, 2.0, &[4.0]), patch(9.0, 9.0, &[1.0])];
        let a = ClusterAssignment { labels: vec![0, 0, 1], cluster_count: 2 };
        let nodes = aggregate_clusters(&pts, &a).unwrap();
        assert_eq!(nodes[0].centroid, [1.0, 1.0]);
        assert_eq!(nodes[0].features, vec![2.0]);
        assert_eq!(nodes[0].member_indices, vec![0, 1]);
        assert_eq!(nodes[1].centroid, [9.0, 9.0]);
        assert_eq!(nodes[1].features, vec![1.0]);
        assert_eq!(nodes.iter().map(|n| n.member_count).sum::<usize>(), 3);
    }

    #[test]
    fn large_cluster_matches_independent_means() {
        let mut r = crate::rng::rng(100);
        let pts: Vec<PatchRecord> =
            (0..100).map(|_| patch(r.random::<f64>() * 1e4, r.random::<f64>() * 1e4, &[r.random(), r.random::<f64>() * 10.0])).collect();
        let a = ClusterAssignment { labels: vec![0; 100], cluster_count: 1 };
        let node = &aggregate_clusters(&pts, &a).unwrap()[0];
        let mean = |f: &dyn Fn(&PatchRecord) -> f64| pts.iter().map(f).sum::<f64>() / 100.0;
        assert!((node.centroid[0] - mean(&|p| p.coords[0])).abs() <= 1e-12 * node.centroid[0].abs());
        assert!((node.centroid[1] - mean(&|p| p.coords[1])).abs() <= 1e-12 * node.centroid[1].abs());
        assert!((node.features[1] - mean(&|p| p.features[1])).abs() <= 1e-12 * node.features[1].abs());
    }

    #[test]
    fn median_heuristic() {
        let s: Vec<PatchRecord> = (0..2).map(|i| patch(0.0, 0.0, &[i as f64 * 3.0, 0.0])).collect();
        assert_eq!(median_feature_distance(&[&s], 11, 0), 3.0);
        let same = vec![patch(0.0, 0.0, &[1.0]); 4];
        assert_eq!(median_feature_distance(&[&same], 11, 0), 1.0);
        assert_eq!(median_feature_distance(&[], 11, 0), 1.0);
    }
}
