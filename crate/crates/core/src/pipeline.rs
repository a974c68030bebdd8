//! Dataset-level orchestration shared by the command line and tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::{median_feature_distance, KernelParams};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::build_slide_graph;
use crate::graph_model::{Dataset, PatchDataset, PatchRecord, SlideGraph};

/// Kernel parameters for a dataset: explicit values from the config, or
/// `lambda_h = 1 / median within-slide feature distance` and
/// `lambda_g = 1 / d_max`.
pub fn resolve_kernel(ds: &PatchDataset, cfg: &Config) -> Result<KernelParams> {
    let k = &cfg.kernel;
    let lambda_h = match k.lambda_h {
        Some(v) => v,
        None => {
            let slides: Vec<&[PatchRecord]> = ds.slides.iter().map(|s| s.patches.as_slice()).collect();
            1.0 / median_feature_distance(&slides, k.median_pairs, k.seed)
        }
    };
    let lambda_g = match k.lambda_g {
        Some(v) => v,
        None if cfg.graph.d_max > 0.0 && cfg.graph.d_max.is_finite() => 1.0 / cfg.graph.d_max,
        None => return Err(Error::Config("lambda_g must be given when d_max is 0 or infinite".into())),
    };
    KernelParams::new(lambda_h, lambda_g, k.s_min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildRow {
    pub slide_id: String,
    pub n_patches: usize,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub skipped: bool,
}

pub struct BuildOutput {
    pub graphs: Vec<SlideGraph>,
    pub rows: Vec<BuildRow>,
    pub kernel: KernelParams,
}

/// Builds one graph per slide with patches, in slide-id order. Slides named
/// in `expected` but without patches are reported as skipped.
pub fn build_graphs(ds: &PatchDataset, cfg: &Config, expected: &[String]) -> Result<BuildOutput> {
    if (ds.mpp - cfg.graph.mpp).abs() > 1e-12 {
        return Err(Error::invalid(format!("feature files are at {} mpp but the config expects {} mpp", ds.mpp, cfg.graph.mpp)));
    }
    let kernel = resolve_kernel(ds, cfg)?;
    let mut slides: Vec<&crate::graph_model::SlidePatches> = ds.slides.iter().filter(|s| !s.patches.is_empty()).collect();
    slides.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let graphs = crate::parallel::try_map(&slides, |s| build_slide_graph(s, &kernel, cfg.graph.d_max, ds.mpp))?;

    let mut rows: BTreeMap<String, BuildRow> = graphs
        .iter()
        .zip(&slides)
        .map(|(g, s)| {
            (
                g.slide_id.clone(),
                BuildRow {
                    slide_id: g.slide_id.clone(),
                    n_patches: s.patches.len(),
                    n_nodes: g.nodes.len(),
                    n_edges: g.edges.len(),
                    skipped: false,
                },
            )
        })
        .collect();
    for id in expected.iter().chain(ds.slides.iter().filter(|s| s.patches.is_empty()).map(|s| &s.slide_id)) {
        rows.entry(id.clone()).or_insert_with(|| BuildRow { slide_id: id.clone(), n_patches: 0, n_nodes: 0, n_edges: 0, skipped: true });
    }
    Ok(BuildOutput { graphs, rows: rows.into_values().collect(), kernel })
}

/// Attaches labels and keeps only labeled graphs, in slide-id order.
pub fn labeled_dataset(mut graphs: Vec<SlideGraph>, labels: &BTreeMap<String, u8>, names: Option<Vec<String>>) -> Result<Dataset> {
    graphs.retain(|g| labels.contains_key(&g.slide_id));
    for g in &mut graphs {
        g.label = Some(labels[&g.slide_id]);
    }
    graphs.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    if graphs.is_empty() {
        return Err(Error::invalid("no graph has a label"));
    }
    Dataset::new(graphs, names)
}
