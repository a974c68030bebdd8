//! ROC and precision–recall curves, their areas, and Pearson correlation of
//! node scores against node features.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::graph_model::SlideGraph;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; `None` for the origin.
    pub threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub roc_points: Vec<RocPoint>,
    pub pr_points: Vec<PrPoint>,
    pub auroc: f64,
    pub aupr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Cumulative (threshold, tp, fp) after each group of tied scores, highest
/// score first.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, usize, usize)>> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), found: labels.len() });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("score {i} is not finite")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (pos, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last = order.get(pos + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last {
            groups.push((scores[i], tp, fp));
        }
    }
    Ok(groups)
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let p = labels.iter().filter(|&&l| l).count();
    (p, labels.len() - p)
}

/// ROC points from the origin to (1, 1), one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::invalid("ROC needs both classes present"));
    }
    let mut pts = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: None }];
    for (t, tp, fp) in tie_groups(scores, labels)? {
        pts.push(RocPoint { fpr: fp as f64 / n as f64, tpr: tp as f64 / p as f64, threshold: Some(t) });
    }
    Ok(pts)
}

/// Trapezoidal area under the ROC curve.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(roc_area(&roc_curve(scores, labels)?))
}

fn roc_area(pts: &[RocPoint]) -> f64 {
    pts.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// Precision–recall points, one per distinct score, highest threshold first.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    let (p, _) = class_counts(labels);
    if p == 0 {
        return Err(Error::invalid("precision-recall needs at least one positive"));
    }
    Ok(tie_groups(scores, labels)?
        .into_iter()
        .map(|(t, tp, fp)| PrPoint { recall: tp as f64 / p as f64, precision: tp as f64 / (tp + fp) as f64, threshold: t })
        .collect())
}

/// Non-interpolated area: `sum_i (R_i - R_{i-1}) P_i`.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(pr_area(&pr_curve(scores, labels)?))
}

fn pr_area(pts: &[PrPoint]) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for pt in pts {
        area += (pt.recall - prev) * pt.precision;
        prev = pt.recall;
    }
    area
}

impl EvalReport {
    pub fn new(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let roc_points = roc_curve(scores, labels)?;
        let pr_points = pr_curve(scores, labels)?;
        let (n_pos, n_neg) = class_counts(labels);
        Ok(EvalReport { auroc: roc_area(&roc_points), aupr: pr_area(&pr_points), roc_points, pr_points, n_pos, n_neg })
    }

    /// `threshold,fpr,tpr`; the origin's threshold is written as `inf`.
    pub fn write_roc_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.roc_points {
            let t = p.threshold.map_or("inf".to_string(), |t| t.to_string());
            out.push_str(&format!("{t},{},{}\n", p.fpr, p.tpr));
        }
        crate::graph_model::io::write_text(path, &out)
    }

    /// `threshold,recall,precision`.
    pub fn write_pr_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("threshold,recall,precision\n");
        for p in &self.pr_points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.recall, p.precision));
        }
        crate::graph_model::io::write_text(path, &out)
    }
}

/// Sample correlation coefficient and its two-sided p-value under the
/// t distribution with `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), found: y.len() });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::invalid("correlation needs at least 3 samples"));
    }
    let r = pearson_r(x, y).ok_or_else(|| Error::invalid("correlation undefined for zero variance"))?;
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok((r, p))
}

fn pearson_r(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCorrelation {
    pub feature: usize,
    pub name: Option<String>,
    /// Correlation over all pooled nodes.
    pub r: f64,
    pub p_value: f64,
    /// Mean of the bootstrap replicates.
    pub mean_r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Correlation between per-node total scores and node feature values pooled
/// over slides, with a percentile bootstrap CI from resampling slides.
/// `node_scores[i]` holds one score per node of `graphs[i]`.
pub fn node_feature_correlations(
    graphs: &[&SlideGraph],
    node_scores: &[Vec<f64>],
    features: &[usize],
    resamples: usize,
    seed: u64,
) -> Result<Vec<FeatureCorrelation>> {
    if graphs.len() < 2 {
        return Err(Error::invalid("correlation analysis needs at least 2 slides"));
    }
    if graphs.len() != node_scores.len() {
        return Err(Error::DimensionMismatch { expected: graphs.len(), found: node_scores.len() });
    }
    for (g, s) in graphs.iter().zip(node_scores) {
        if g.nodes.len() != s.len() {
            return Err(Error::invalid(format!("slide `{}`: score count differs from node count", g.slide_id)));
        }
    }
    let dim = graphs[0].feature_dim();
    if let Some(&f) = features.iter().find(|&&f| f >= dim) {
        return Err(Error::invalid(format!("feature index {f} out of range (d = {dim})")));
    }
    let all: Vec<usize> = (0..graphs.len()).collect();
    let pooled = |slides: &[usize], f: usize| -> (Vec<f64>, Vec<f64>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &i in slides {
            for (node, &s) in graphs[i].nodes.iter().zip(&node_scores[i]) {
                xs.push(s);
                ys.push(node.features[f]);
            }
        }
        (xs, ys)
    };
    crate::parallel::try_map(features, |&f| {
        let (xs, ys) = pooled(&all, f);
        let (r, p_value) = pearson(&xs, &ys)?;
        let mut rng = crate::rng::stream(seed, f as u64);
        let mut reps = Vec::with_capacity(resamples);
        for _ in 0..resamples {
            let pick: Vec<usize> = (0..graphs.len()).map(|_| rng.random_range(0..graphs.len())).collect();
            let (xs, ys) = pooled(&pick, f);
            if let Some(r) = pearson_r(&xs, &ys) {
                reps.push(r);
            }
        }
        reps.sort_by(f64::total_cmp);
        let (mean_r, ci_low, ci_high) = if reps.is_empty() {
            (r, r, r)
        } else {
            let q = |p: f64| reps[((p * (reps.len() - 1) as f64).round() as usize).min(reps.len() - 1)];
            (reps.iter().sum::<f64>() / reps.len() as f64, q(0.025), q(0.975))
        };
        Ok(FeatureCorrelation { feature: f, name: None, r, p_value, mean_r, ci_low, ci_high })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_model::ClusterNode;
    use proptest::prelude::*;

    fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.4, 0.6, 0.1], &[true, false, true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn aupr_examples() {
        let v = aupr(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((v - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(aupr(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(aupr(&[0.5; 4], &[true, false, false, false]).unwrap(), 0.25);
        assert!(aupr(&[0.5; 2], &[false, false]).is_err());
    }

    #[test]
    fn report_curves_have_fixed_ends() {
        let r = EvalReport::new(&[0.2, 0.7, 0.7, 0.1, 0.9], &[false, true, false, false, true]).unwrap();
        let (first, last) = (r.roc_points[0], *r.roc_points.last().unwrap());
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert_eq!((r.n_pos, r.n_neg), (2, 3));
        let dir = tempfile::tempdir().unwrap();
        r.write_roc_csv(&dir.path().join("roc.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("roc.csv")).unwrap();
        assert!(text.starts_with("threshold,fpr,tpr\ninf,0,0\n"));
    }

    proptest! {
        #[test]
        fn auroc_matches_mann_whitney(
            data in prop::collection::vec((0u8..12, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 3.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - mann_whitney(&scores, &labels)).abs() < 1e-12);
            let shifted: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp() - 7.0).collect();
            prop_assert!((auroc(&shifted, &labels).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn negated_scores_complement_without_ties(
            labels in prop::collection::vec(any::<bool>(), 2..40), seed in any::<u64>()
        ) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let mut r = crate::rng::rng(seed);
            let s: Vec<f64> = labels.iter().map(|_| r.random::<f64>()).collect();
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let sum = auroc(&s, &labels).unwrap() + auroc(&neg, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pearson_affine_invariance(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut r = crate::rng::rng(seed);
            let x: Vec<f64> = (0..30).map(|_| r.random::<f64>()).collect();
            let y: Vec<f64> = x.iter().map(|v| v + r.random::<f64>()).collect();
            let base = pearson(&x, &y).unwrap().0;
            let t: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&x, &t).unwrap().0 - base).abs() < 1e-12);
            let f: Vec<f64> = y.iter().map(|v| -v).collect();
            prop_assert!((pearson(&x, &f).unwrap().0 + base).abs() < 1e-12);
        }
    }

    #[test]
    fn pearson_examples() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap().0 - 1.0).abs() < 1e-15);
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &z).unwrap().0 + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &[1.0; 10]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn pearson_recovers_known_correlation() {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = crate::rng::rng(2024);
        let rho: f64 = 0.6;
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for _ in 0..1000 {
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            x.push(a);
            y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        let (est, p) = pearson(&x, &y).unwrap();
        assert!((est - rho).abs() < 0.05, "{est}");
        assert!(p < 1e-10);
    }

    #[test]
    fn pearson_p_value_matches_table() {
        // n = 12, r = 0.576 sits at the two-sided 5% critical value.
        let n = 12;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        // Construct y with a prescribed correlation via an orthogonal residual.
        let mx = x.iter().sum::<f64>() / n as f64;
        let dx: Vec<f64> = x.iter().map(|v| v - mx).collect();
        let e: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let proj = e.iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>() / dx.iter().map(|v| v * v).sum::<f64>();
        let ort: Vec<f64> = e.iter().zip(&dx).map(|(a, b)| a - proj * b).collect();
        let (nx, no) = (dx.iter().map(|v| v * v).sum::<f64>().sqrt(), ort.iter().map(|v| v * v).sum::<f64>().sqrt());
        let r: f64 = 0.5760;
        let y: Vec<f64> = dx.iter().zip(&ort).map(|(a, b)| r * a / nx + (1.0 - r * r).sqrt() * b / no).collect();
        let (got, p) = pearson(&x, &y).unwrap();
        assert!((got - r).abs() < 1e-12);
        assert!((p - 0.05).abs() < 1e-3, "{p}");
    }

    fn graph_with(features: Vec<Vec<f64>>) -> SlideGraph {
        SlideGraph {
            slide_id: "s".into(),
            nodes: features
                .into_iter()
                .enumerate()
                .map(|(i, f)| ClusterNode { centroid: [i as f64, 0.0], features: f, member_count: 1, member_indices: vec![i] })
                .collect(),
            edges: vec![],
            label: None,
            mpp: 0.25,
        }
    }

    #[test]
    fn correlations_pick_the_scoring_feature() {
        let mut r = crate::rng::rng(5);
        let mut graphs = Vec::new();
        let mut scores = Vec::new();
        for _ in 0..10 {
            let feats: Vec<Vec<f64>> = (0..500).map(|_| (0..3).map(|_| r.random::<f64>()).collect()).collect();
            scores.push(feats.iter().map(|f| f[1]).collect::<Vec<f64>>());
            graphs.push(graph_with(feats));
        }
        let refs: Vec<&SlideGraph> = graphs.iter().collect();
        let table = node_feature_correlations(&refs, &scores, &[0, 1, 2], 200, 1).unwrap();
        assert!((table[1].r - 1.0).abs() < 1e-12);
        assert!(table[0].r.abs() < 0.1 && table[2].r.abs() < 0.1);
        assert!(table[0].ci_low <= table[0].mean_r && table[0].mean_r <= table[0].ci_high);
        assert_eq!(table, node_feature_correlations(&refs, &scores, &[0, 1, 2], 200, 1).unwrap());
        assert!(node_feature_correlations(&refs[..1], &scores[..1], &[0], 10, 1).is_err());
        assert!(node_feature_correlations(&refs, &scores, &[3], 10, 1).is_err());
    }
}
