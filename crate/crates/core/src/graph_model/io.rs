//! File formats: patch feature tables (CSV / JSON-lines) with a metadata
//! sidecar, per-slide graph JSON, and `slide_id,label` tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClusterNode, PatchDataset, PatchRecord, SlideGraph, SlidePatches};
use crate::error::{Error, Result};

/// Contents of the `*.meta.json` sidecar next to a patch feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub mpp: f64,
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_names: Option<Vec<String>>,
}

/// `features.csv` -> `features.meta.json`.
pub fn sidecar_path(features: &Path) -> PathBuf {
    let stem = features.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    features.with_file_name(format!("{stem}.meta.json"))
}

pub fn read_meta(path: &Path) -> Result<FeatureMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta: FeatureMeta = serde_json::from_str(&text).map_err(|e| json_error(path, &e))?;
    if let Some(names) = &meta.feature_names {
        if names.len() != meta.feature_dim {
            return Err(Error::DimensionMismatch { expected: meta.feature_dim, found: names.len() });
        }
    }
    if !(meta.mpp > 0.0) {
        return Err(Error::invalid(format!("{}: mpp must be positive", path.display())));
    }
    Ok(meta)
}

pub fn write_meta(path: &Path, meta: &FeatureMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn json_error(path: &Path, e: &serde_json::Error) -> Error {
    Error::Parse { context: path.display().to_string(), line: e.line(), message: e.to_string() }
}

/// Reads a patch feature file (`.csv` or `.jsonl`) together with its sidecar.
/// Slides come back sorted by id; patch order within a slide is file order.
pub fn read_patch_file(path: &Path) -> Result<PatchDataset> {
    let meta = read_meta(&sidecar_path(path))?;
    let rows = match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("ndjson") => read_jsonl_rows(path, meta.feature_dim)?,
        _ => read_csv_rows(path, meta.feature_dim)?,
    };
    let mut by_slide: BTreeMap<String, Vec<PatchRecord>> = BTreeMap::new();
    for (id, rec) in rows {
        by_slide.entry(id).or_default().push(rec);
    }
    Ok(PatchDataset {
        slides: by_slide.into_iter().map(|(slide_id, patches)| SlidePatches { slide_id, patches, label: None }).collect(),
        feature_dim: meta.feature_dim,
        feature_names: meta.feature_names,
        mpp: meta.mpp,
    })
}

/// Reads several patch files and merges them. All files must agree on
/// feature dimension and mpp, and a slide may appear in only one file.
pub fn read_patch_files(paths: &[PathBuf]) -> Result<PatchDataset> {
    let mut merged: Option<PatchDataset> = None;
    for p in paths {
        let ds = read_patch_file(p)?;
        match &mut merged {
            None => merged = Some(ds),
            Some(m) => {
                if ds.feature_dim != m.feature_dim {
                    return Err(Error::invalid(format!(
                        "feature_dim mismatch: {} has {}, earlier files have {}",
                        p.display(),
                        ds.feature_dim,
                        m.feature_dim
                    )));
                }
                if ds.mpp != m.mpp {
                    return Err(Error::invalid(format!("mpp mismatch: {} has {}, earlier files have {}", p.display(), ds.mpp, m.mpp)));
                }
                for s in ds.slides {
                    if m.slide(&s.slide_id).is_some() {
                        return Err(Error::invalid(format!("slide `{}` appears in more than one feature file", s.slide_id)));
                    }
                    m.slides.push(s);
                }
            }
        }
    }
    let mut ds = merged.ok_or_else(|| Error::invalid("no feature files given"))?;
    ds.slides.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    Ok(ds)
}

fn parse_f64(s: &str, ctx: &Path, line: usize, col: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        context: ctx.display().to_string(),
        line,
        message: format!("column `{col}`: `{s}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { context: ctx.display().to_string(), line, message: format!("column `{col}`: non-finite value") });
    }
    Ok(v)
}

fn read_csv_rows(path: &Path, dim: usize) -> Result<Vec<(String, PatchRecord)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let expected: Vec<String> = ["slide_id", "x", "y"].iter().map(|s| s.to_string()).chain((0..dim).map(|i| format!("f{i}"))).collect();
    if headers.len() != expected.len() || headers.iter().zip(&expected).any(|(h, e)| h.trim() != e) {
        return Err(Error::Parse {
            context: path.display().to_string(),
            line: 1,
            message: format!(
                "header must be `{}` for feature_dim {dim}, found `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse { context: path.display().to_string(), line, message: "empty slide_id".into() });
        }
        let x = parse_f64(&rec[1], path, line, "x")?;
        let y = parse_f64(&rec[2], path, line, "y")?;
        let features = (0..dim).map(|i| parse_f64(&rec[3 + i], path, line, &expected[3 + i])).collect::<Result<Vec<_>>>()?;
        out.push((id, PatchRecord::new(x, y, features)));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    if let csv::ErrorKind::Io(_) = e.kind() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!()
    }
    Error::Parse { context: path.display().to_string(), line, message: e.to_string() }
}

fn read_jsonl_rows(path: &Path, dim: usize) -> Result<Vec<(String, PatchRecord)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse { context: path.display().to_string(), line: lineno, message };
        let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        let id = obj.get("slide_id").and_then(|v| v.as_str()).ok_or_else(|| perr("missing string field `slide_id`".into()))?.to_string();
        let num = |key: &str| -> Result<f64> {
            obj.get(key)
                .and_then(|v| v.as_f64())
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(format!("missing or non-finite numeric field `{key}`")))
        };
        let (x, y) = (num("x")?, num("y")?);
        let features = match obj.get("features") {
            Some(serde_json::Value::Array(a)) => a
                .iter()
                .map(|v| v.as_f64().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| perr("`features` must hold finite numbers".into()))?,
            Some(_) => return Err(perr("`features` must be an array".into())),
            None => (0..dim).map(|k| num(&format!("f{k}"))).collect::<Result<Vec<_>>>()?,
        };
        if features.len() != dim {
            return Err(perr(format!("expected {dim} features, found {}", features.len())));
        }
        out.push((id, PatchRecord::new(x, y, features)));
    }
    Ok(out)
}

/// Writes patches as CSV (`slide_id,x,y,f0..`) plus the metadata sidecar.
pub fn write_patch_csv(path: &Path, ds: &PatchDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["slide_id".to_string(), "x".into(), "y".into()];
    header.extend((0..ds.feature_dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for s in &ds.slides {
        for p in &s.patches {
            let mut row = vec![s.slide_id.clone(), fmt_f64(p.coords[0]), fmt_f64(p.coords[1])];
            row.extend(p.features.iter().map(|&v| fmt_f64(v)));
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    write_meta(&sidecar_path(path), &FeatureMeta { mpp: ds.mpp, feature_dim: ds.feature_dim, feature_names: ds.feature_names.clone() })
}

/// Writes patches as JSON-lines with `slide_id,x,y,f0..` keys plus the sidecar.
pub fn write_patch_jsonl(path: &Path, ds: &PatchDataset) -> Result<()> {
    let mut out = String::new();
    for s in &ds.slides {
        for p in &s.patches {
            let mut obj = serde_json::Map::new();
            obj.insert("slide_id".into(), s.slide_id.clone().into());
            obj.insert("x".into(), p.coords[0].into());
            obj.insert("y".into(), p.coords[1].into());
            for (i, &v) in p.features.iter().enumerate() {
                obj.insert(format!("f{i}"), v.into());
            }
            out.push_str(&serde_json::Value::Object(obj).to_string());
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    write_meta(&sidecar_path(path), &FeatureMeta { mpp: ds.mpp, feature_dim: ds.feature_dim, feature_names: ds.feature_names.clone() })
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    let s = format!("{v:?}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

#[derive(Serialize, Deserialize)]
struct NodeFile {
    x: f64,
    y: f64,
    count: usize,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    members: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    slide_id: String,
    label: Option<u8>,
    mpp: f64,
    nodes: Vec<NodeFile>,
    edges: Vec<[usize; 2]>,
}

/// Serializes a graph to the JSON graph-file format. Reals are written in
/// shortest round-trip form, so deserialization restores them exactly.
pub fn serialize_graph(g: &SlideGraph) -> Vec<u8> {
    let file = GraphFile {
        slide_id: g.slide_id.clone(),
        label: g.label,
        mpp: g.mpp,
        nodes: g
            .nodes
            .iter()
            .map(|n| NodeFile {
                x: n.centroid[0],
                y: n.centroid[1],
                count: n.member_count,
                features: n.features.clone(),
                members: n.member_indices.clone(),
            })
            .collect(),
        edges: g.edges.iter().map(|&(a, b)| [a, b]).collect(),
    };
    let mut bytes = serde_json::to_vec(&file).expect("graph serializes");
    bytes.push(b'\n');
    bytes
}

pub fn deserialize_graph(bytes: &[u8]) -> Result<SlideGraph> {
    let file: GraphFile = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        context: "graph".into(),
        line: e.line(),
        message: format!("{e} (column {})", e.column()),
    })?;
    let semantic = |message: String| Error::Parse { context: "graph".into(), line: 1, message };
    if file.nodes.is_empty() {
        return Err(semantic("graph must have ≥ 1 node".into()));
    }
    let dim = file.nodes[0].features.len();
    if let Some(i) = file.nodes.iter().position(|n| n.features.len() != dim) {
        return Err(semantic(format!("node {i} feature length differs from node 0")));
    }
    if let Some(l) = file.label {
        if l > 1 {
            return Err(semantic(format!("label must be 0 or 1, got {l}")));
        }
    }
    Ok(SlideGraph {
        slide_id: file.slide_id,
        label: file.label,
        mpp: file.mpp,
        nodes: file
            .nodes
            .into_iter()
            .map(|n| ClusterNode { centroid: [n.x, n.y], features: n.features, member_count: n.count, member_indices: n.members })
            .collect(),
        edges: file.edges.into_iter().map(|[a, b]| (a, b)).collect(),
    })
}

pub fn write_graph(path: &Path, g: &SlideGraph) -> Result<()> {
    fs::write(path, serialize_graph(g)).map_err(|e| Error::io(path, e))
}

pub fn read_graph(path: &Path) -> Result<SlideGraph> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_graph(&bytes).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse { context: path.display().to_string(), line, message },
        other => other,
    })
}

/// File name used for a slide's graph inside an output directory.
pub fn graph_file_name(slide_id: &str) -> String {
    let safe: String = slide_id.chars().map(|c| if c.is_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
    format!("{safe}.json")
}

/// Reads every `*.json` graph in `dir`, sorted by slide id.
pub fn read_graph_dir(dir: &Path) -> Result<Vec<SlideGraph>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && !p.to_string_lossy().ends_with(".meta.json"))
        .collect();
    paths.sort();
    let mut graphs = paths.iter().map(|p| read_graph(p)).collect::<Result<Vec<_>>>()?;
    graphs.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    Ok(graphs)
}

/// Reads a `slide_id,label` CSV.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, u8>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (id_col, label_col) = match (col("slide_id"), col("label")) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Parse {
                context: path.display().to_string(),
                line: 1,
                message: "labels header must contain `slide_id` and `label`".into(),
            })
        }
    };
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let label = match rec.get(label_col).map(str::trim) {
            Some("0") => 0,
            Some("1") => 1,
            other => {
                return Err(Error::Parse {
                    context: path.display().to_string(),
                    line,
                    message: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        };
        let id = rec.get(id_col).unwrap_or_default().trim().to_string();
        if out.insert(id.clone(), label).is_some() {
            return Err(Error::Parse { context: path.display().to_string(), line, message: format!("duplicate slide_id `{id}`") });
        }
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &BTreeMap<String, u8>) -> Result<()> {
    let mut out = String::from("slide_id,label\n");
    for (id, l) in labels {
        out.push_str(&format!("{id},{l}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// CSV `slide_id,score`, rows in the given order.
pub fn write_scores(path: &Path, scores: &[(String, f64)]) -> Result<()> {
    let mut out = String::from("slide_id,score\n");
    for (id, s) in scores {
        out.push_str(&format!("{id},{}\n", fmt_f64(*s)));
    }
    write_text(path, &out)
}

/// Reads a `slide_id,score` CSV; extra columns are ignored.
pub fn read_scores(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(id_col), Some(score_col)) = (col("slide_id"), col("score")) else {
        return Err(Error::Parse {
            context: path.display().to_string(),
            line: 1,
            message: "predictions header must contain `slide_id` and `score`".into(),
        });
    };
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let score = parse_f64(rec.get(score_col).unwrap_or_default(), path, line, "score")?;
        let id = rec.get(id_col).unwrap_or_default().trim().to_string();
        if out.insert(id.clone(), score).is_some() {
            return Err(Error::Parse { context: path.display().to_string(), line, message: format!("duplicate slide_id `{id}`") });
        }
    }
    Ok(out)
}

/// Small helper for writing CSV tables built in memory.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
