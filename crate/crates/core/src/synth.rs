//! Seeded synthetic slides: grid-tiled tissue blobs split into compartments,
//! a per-slide staining offset on the density channel, and contiguous "hot"
//! regions on positive slides whose density is raised by `signal_strength`.
//!
//! Features are drawn on a latent scale and multiplied by `feature_scale`.
//! Channel 0 is a density `center + scale * (offset + noise + signal * hot)`,
//! left unclipped so that a slide's contrast survives any offset. Remaining
//! channels are compartment means plus noise.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_model::io::{write_labels, write_patch_csv, write_text};
use crate::graph_model::{PatchDataset, PatchRecord, SlidePatches, DEFAULT_MPP};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub patches_per_slide: usize,
    pub feature_dim: usize,
    pub signal_strength: f64,
    pub positive_fraction: f64,
    pub seed: u64,
    /// Patch edge length in base-resolution pixels.
    pub patch_size: f64,
    pub compartments: usize,
    /// Spread of compartment means (latent units).
    pub compartment_sd: f64,
    /// Per-patch noise (latent units).
    pub noise_sd: f64,
    /// Spread of the per-slide offset of the density channel (latent units).
    pub stain_sd: f64,
    pub density_center: f64,
    pub feature_scale: f64,
    pub hot_min_fraction: f64,
    pub hot_max_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_slides: 200,
            patches_per_slide: 300,
            feature_dim: 4,
            signal_strength: 3.0,
            positive_fraction: 0.5,
            seed: 0,
            patch_size: 224.0,
            compartments: 5,
            compartment_sd: 1.0,
            noise_sd: 0.1,
            stain_sd: 2.0,
            density_center: 0.3,
            feature_scale: 0.1,
            hot_min_fraction: 0.1,
            hot_max_fraction: 0.4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slides == 0 || self.patches_per_slide == 0 || self.feature_dim == 0 || self.compartments == 0 {
            return Err(Error::Config("synthetic counts must be at least 1".into()));
        }
        if !(self.signal_strength >= 0.0) {
            return Err(Error::Config("signal_strength must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config("positive_fraction must be in [0, 1]".into()));
        }
        if !(self.patch_size > 0.0)
            || !(self.compartment_sd >= 0.0)
            || !(self.noise_sd >= 0.0)
            || !(self.stain_sd >= 0.0)
            || !(self.feature_scale > 0.0)
            || !self.density_center.is_finite()
        {
            return Err(Error::Config("synthetic spreads must be non-negative and feature_scale positive".into()));
        }
        if !(0.0 < self.hot_min_fraction && self.hot_min_fraction <= self.hot_max_fraction && self.hot_max_fraction <= 1.0) {
            return Err(Error::Config("hot fractions must satisfy 0 < min <= max <= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub patches: PatchDataset,
    pub labels: BTreeMap<String, u8>,
    /// Per slide, whether each patch lies in a planted hot region.
    pub hot: BTreeMap<String, Vec<bool>>,
}

pub const DENSITY_CHANNEL: usize = 0;

/// Connected set of `n` grid cells grown from the origin by random frontier
/// expansion.
fn grow_blob(n: usize, r: &mut rng::Rng) -> Vec<(i64, i64)> {
    let mut cells = vec![(0i64, 0i64)];
    let mut taken: HashMap<(i64, i64), ()> = HashMap::from([((0, 0), ())]);
    let mut frontier: Vec<(i64, i64)> = Vec::new();
    let push_neighbors = |c: (i64, i64), taken: &HashMap<(i64, i64), ()>, frontier: &mut Vec<(i64, i64)>| {
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let q = (c.0 + dx, c.1 + dy);
            if !taken.contains_key(&q) && !frontier.contains(&q) {
                frontier.push(q);
            }
        }
    };
    push_neighbors((0, 0), &taken, &mut frontier);
    while cells.len() < n {
        let c = frontier.swap_remove(r.random_range(0..frontier.len()));
        taken.insert(c, ());
        cells.push(c);
        push_neighbors(c, &taken, &mut frontier);
    }
    cells
}

/// Grid-adjacent connected subset of `cells` of size `k`, grown from a random
/// cell in breadth-first order with shuffled neighbor visits.
fn grow_region(cells: &[(i64, i64)], k: usize, r: &mut rng::Rng) -> Vec<bool> {
    let index: HashMap<(i64, i64), usize> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut hot = vec![false; cells.len()];
    let start = r.random_range(0..cells.len());
    let mut queue = VecDeque::from([start]);
    hot[start] = true;
    let mut count = 1;
    while count < k {
        let Some(i) = queue.pop_front() else { break };
        let (x, y) = cells[i];
        let mut nb = [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)];
        nb.shuffle(r);
        for q in nb {
            if count >= k {
                break;
            }
            if let Some(&j) = index.get(&q) {
                if !hot[j] {
                    hot[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
    }
    hot
}

fn generate_slide(cfg: &SynthConfig, slide: usize, positive: bool) -> (SlidePatches, Vec<bool>) {
    let mut r = rng::stream(cfg.seed, 1000 + slide as u64);
    let n = cfg.patches_per_slide;
    let cells = grow_blob(n, &mut r);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    // Compartments: nearest of a few random seed cells.
    let seeds: Vec<(i64, i64)> = (0..cfg.compartments).map(|_| cells[r.random_range(0..n)]).collect();
    let means: Vec<Vec<f64>> =
        (0..cfg.compartments).map(|_| (0..cfg.feature_dim).map(|_| cfg.compartment_sd * unit.sample(&mut r)).collect()).collect();
    let offset = cfg.stain_sd * unit.sample(&mut r);

    let hot = if positive {
        let frac = r.random_range(cfg.hot_min_fraction..=cfg.hot_max_fraction);
        let k = ((frac * n as f64).round() as usize).clamp(1, n);
        grow_region(&cells, k, &mut r)
    } else {
        vec![false; n]
    };

    let patches = cells
        .iter()
        .zip(&hot)
        .map(|(&(x, y), &h)| {
            let comp =
                (0..seeds.len()).min_by_key(|&c| (seeds[c].0 - x).pow(2) + (seeds[c].1 - y).pow(2)).expect("at least one compartment");
            let features = (0..cfg.feature_dim)
                .map(|f| {
                    let noise = cfg.noise_sd * unit.sample(&mut r);
                    if f == DENSITY_CHANNEL {
                        let signal = if h { cfg.signal_strength } else { 0.0 };
                        cfg.density_center + cfg.feature_scale * (offset + noise + signal)
                    } else {
                        cfg.feature_scale * (means[comp][f] + noise)
                    }
                })
                .collect();
            PatchRecord::new(x as f64 * cfg.patch_size, y as f64 * cfg.patch_size, features)
        })
        .collect();
    (SlidePatches { slide_id: slide_id(slide), patches, label: Some(u8::from(positive)) }, hot)
}

pub fn slide_id(i: usize) -> String {
    format!("slide_{i:04}")
}

/// Deterministic in `cfg.seed`; slides are generated concurrently from
/// independent per-slide streams.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let n_pos = (cfg.positive_fraction * cfg.n_slides as f64).round() as usize;
    let mut order: Vec<usize> = (0..cfg.n_slides).collect();
    order.shuffle(&mut rng::stream(cfg.seed, 7));
    let mut positive = vec![false; cfg.n_slides];
    for &i in &order[..n_pos] {
        positive[i] = true;
    }
    let slides = crate::parallel::map_range(cfg.n_slides, |i| generate_slide(cfg, i, positive[i]));
    let mut labels = BTreeMap::new();
    let mut hot = BTreeMap::new();
    let mut out = Vec::with_capacity(slides.len());
    for (s, h) in slides {
        labels.insert(s.slide_id.clone(), s.label.expect("generated slides are labeled"));
        hot.insert(s.slide_id.clone(), h);
        out.push(s);
    }
    let mut names = vec!["density".to_string()];
    names.extend((1..cfg.feature_dim).map(|i| format!("m{i}")));
    Ok(SynthDataset {
        patches: PatchDataset { slides: out, feature_dim: cfg.feature_dim, feature_names: Some(names), mpp: DEFAULT_MPP },
        labels,
        hot,
    })
}

/// Writes `features.csv` (+ metadata sidecar), `labels.csv` and
/// `hot_mask.csv` (`slide_id,patch_index,hot`) into `dir`.
pub fn write_dataset(dir: &Path, ds: &SynthDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_patch_csv(&dir.join("features.csv"), &ds.patches)?;
    write_labels(&dir.join("labels.csv"), &ds.labels)?;
    let mut mask = String::from("slide_id,patch_index,hot\n");
    for (id, h) in &ds.hot {
        for (i, &v) in h.iter().enumerate() {
            mask.push_str(&format!("{id},{i},{}\n", u8::from(v)));
        }
    }
    write_text(&dir.join("hot_mask.csv"), &mask)
}

/// Reads a `slide_id,patch_index,hot` mask file.
pub fn read_hot_mask(path: &Path) -> Result<BTreeMap<String, Vec<bool>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse { context: path.display().to_string(), line: n + 1, message: format!("bad mask row `{line}`") };
        if parts.len() != 3 {
            return Err(bad());
        }
        let idx: usize = parts[1].parse().map_err(|_| bad())?;
        let v = out.entry(parts[0].to_string()).or_default();
        if idx != v.len() {
            return Err(bad());
        }
        v.push(parts[2] == "1");
    }
    Ok(out)
}
