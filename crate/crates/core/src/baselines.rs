//! Slide-level pooling of one patch feature channel and a least-squares
//! univariate scorer on the pooled value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_model::PatchDataset;
use crate::metrics::EvalReport;
use crate::training::mean_std;

pub const DEFAULT_FLOOR: f64 = 0.1;
pub const MAJORITY_BINS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Average,
    Majority,
}

impl PoolMode {
    pub const ALL: [PoolMode; 3] = [PoolMode::Max, PoolMode::Average, PoolMode::Majority];
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::Average => "average",
            PoolMode::Majority => "majority",
        })
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "average" | "avg" | "mean" => Ok(PoolMode::Average),
            "majority" => Ok(PoolMode::Majority),
            other => Err(Error::invalid(format!("unknown pooling mode `{other}` (max, average, majority)"))),
        }
    }
}

/// Pools one slide's channel values.
pub fn pool_values(values: &[f64], mode: PoolMode, floor: f64) -> f64 {
    let above: Vec<f64> = values.iter().copied().filter(|&v| v > floor).collect();
    match mode {
        PoolMode::Max if values.is_empty() => 0.0,
        PoolMode::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        PoolMode::Average if above.is_empty() => 0.0,
        PoolMode::Average => above.iter().sum::<f64>() / above.len() as f64,
        PoolMode::Majority if above.is_empty() => 0.0,
        PoolMode::Majority => {
            let width = (1.0 - floor) / MAJORITY_BINS as f64;
            let mut counts = [0usize; MAJORITY_BINS];
            for v in above {
                let b = ((v - floor) / width).ceil() as usize;
                counts[b.clamp(1, MAJORITY_BINS) - 1] += 1;
            }
            let mut best = 0;
            for (b, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = b;
                }
            }
            floor + (best as f64 + 0.5) * width
        }
    }
}

/// Per-slide pooled value of feature `channel`, over patch-level records.
pub fn pool_feature(ds: &PatchDataset, channel: usize, mode: PoolMode, floor: f64) -> Result<BTreeMap<String, f64>> {
    if channel >= ds.feature_dim {
        return Err(Error::invalid(format!("channel {channel} out of range (d = {})", ds.feature_dim)));
    }
    if !(floor < 1.0) {
        return Err(Error::invalid("pooling floor must be below 1"));
    }
    let pooled = crate::parallel::map(&ds.slides, |s| {
        let values: Vec<f64> = s.patches.iter().map(|p| p.features[channel]).collect();
        (s.slide_id.clone(), pool_values(&values, mode, floor))
    });
    Ok(pooled.into_iter().collect())
}

/// `score = slope * x + intercept`, fitted by least squares of the 0/1 label
/// on `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnivariateScorer {
    pub slope: f64,
    pub intercept: f64,
}

impl UnivariateScorer {
    pub fn score(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

pub fn univariate_score(values: &[f64], labels: &[bool]) -> Result<UnivariateScorer> {
    if values.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: values.len(), found: labels.len() });
    }
    if !(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)) {
        return Err(Error::invalid("univariate fit needs both classes"));
    }
    let n = values.len() as f64;
    let mx = values.iter().sum::<f64>() / n;
    let my = labels.iter().filter(|&&l| l).count() as f64 / n;
    let sxx: f64 = values.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::invalid("pooled values have zero variance"));
    }
    let sxy: f64 = values.iter().zip(labels).map(|(x, &l)| (x - mx) * (f64::from(u8::from(l)) - my)).sum();
    let slope = sxy / sxx;
    Ok(UnivariateScorer { slope, intercept: my - slope * mx })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineCv {
    pub mode: PoolMode,
    pub folds: Vec<EvalReport>,
    pub mean_auroc: f64,
    pub std_auroc: f64,
    pub mean_aupr: f64,
    pub std_aupr: f64,
}

/// Fits the univariate scorer on every fold's complement and evaluates on
/// the fold. `folds[i]` is slide `i`'s fold index.
pub fn cross_validate_baseline(values: &[f64], labels: &[bool], folds: &[usize], k: usize, mode: PoolMode) -> Result<BaselineCv> {
    if values.len() != labels.len() || values.len() != folds.len() {
        return Err(Error::DimensionMismatch { expected: values.len(), found: folds.len() });
    }
    let mut reports = Vec::with_capacity(k);
    for f in 0..k {
        let (mut tx, mut ty, mut sx, mut sy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..values.len() {
            if folds[i] == f {
                sx.push(values[i]);
                sy.push(labels[i]);
            } else {
                tx.push(values[i]);
                ty.push(labels[i]);
            }
        }
        let scores: Vec<f64> = match univariate_score(&tx, &ty) {
            Ok(m) => sx.iter().map(|&x| m.score(x)).collect(),
            // Constant training values carry no ranking information.
            Err(_) => vec![0.0; sx.len()],
        };
        reports.push(EvalReport::new(&scores, &sy)?);
    }
    let aurocs: Vec<f64> = reports.iter().map(|r| r.auroc).collect();
    let auprs: Vec<f64> = reports.iter().map(|r| r.aupr).collect();
    let (mean_auroc, std_auroc) = mean_std(&aurocs);
    let (mean_aupr, std_aupr) = mean_std(&auprs);
    Ok(BaselineCv { mode, folds: reports, mean_auroc, std_auroc, mean_aupr, std_aupr })
}

/// CSV `slide_id,pooled_value,label`; unlabeled slides get an empty label.
pub fn write_pooled_csv(path: &Path, pooled: &BTreeMap<String, f64>, labels: &BTreeMap<String, u8>) -> Result<()> {
    let mut out = String::from("slide_id,pooled_value,label\n");
    for (id, v) in pooled {
        let l = labels.get(id).map_or(String::new(), |l| l.to_string());
        out.push_str(&format!("{id},{},{l}\n", crate::graph_model::io::fmt_f64(*v)));
    }
    crate::graph_model::io::write_text(path, &out)
}
