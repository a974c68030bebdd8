#![allow(clippy::unnecessary_cast)]
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use slidegraph::baselines::{cross_validate_baseline, pool_feature, univariate_score, write_pooled_csv, PoolMode};
use slidegraph::config::Config;
use slidegraph::gnn::io::{load_model, save_model};
use slidegraph::gnn::{forward, ModelParams};
use slidegraph::graph_model::io::{
    graph_file_name, read_graph, read_graph_dir, read_labels, read_patch_files, read_scores, write_graph, write_scores, write_text,
};
use slidegraph::graph_model::{stratified_assign, stratified_folds, SlideGraph};
use slidegraph::metrics::EvalReport;
use slidegraph::pipeline::{build_graphs, labeled_dataset};
use slidegraph::synth::{generate_dataset, write_dataset};
use slidegraph::training::{cross_validate, fit, log_to_jsonl, predict_scores};

/// Slide-level classification from patch features with clustered slide graphs
/// and an edge-convolution graph network.
#[derive(Parser)]
#[command(name = "slidegraph", version)]
struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, env = "SLIDEGRAPH_THREADS", global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster patches and build one graph JSON per slide.
    BuildGraph {
        /// Patch feature files (CSV or JSON-lines, each with a .meta.json sidecar).
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for graph files.
        #[arg(long)]
        out: PathBuf,
        /// Labels to embed; slides listed here without patches are reported as skipped.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train one model on all labeled graphs.
    Train {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model file to write; the training log goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified k-fold cross-validation.
    Cv {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of folds (defaults to the config value).
        #[arg(long)]
        folds: Option<usize>,
        /// Directory for per-fold reports, models and logs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score graphs with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        /// CSV `slide_id,score`.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of per-node total scores.
        #[arg(long)]
        node_scores: Option<PathBuf>,
    },
    /// Per-node layer-wise scores of one graph for false-colour plots.
    ExportHeatmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// AUROC and AUPR of a predictions file against labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Directory for roc.csv and pr.csv (defaults to the predictions directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic patch-feature dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pool one feature channel per slide and score it.
    Baseline {
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// max, average or majority.
        #[arg(long, default_value = "max")]
        mode: PoolMode,
        #[arg(long, default_value_t = 0.1)]
        floor: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pooled values CSV `slide_id,pooled_value,label`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn labeled_graphs(graphs: &Path, labels: &Path) -> Result<(Vec<SlideGraph>, BTreeMap<String, u8>)> {
    let graphs = read_graph_dir(graphs)?;
    let labels = read_labels(labels)?;
    for id in labels.keys().filter(|id| !graphs.iter().any(|g| &g.slide_id == *id)) {
        eprintln!("warning: labeled slide `{id}` has no graph");
    }
    for g in graphs.iter().filter(|g| !labels.contains_key(&g.slide_id)) {
        eprintln!("warning: graph `{}` has no label and is ignored", g.slide_id);
    }
    Ok((graphs, labels))
}

fn build_graph(features: &[PathBuf], config: Option<&Path>, out: &Path, labels: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = read_patch_files(features)?;
    let labels = labels.map(read_labels).transpose()?.unwrap_or_default();
    let expected: Vec<String> = labels.keys().cloned().collect();
    let built = build_graphs(&ds, &cfg, &expected)?;
    create_dir(out)?;
    for mut g in built.graphs {
        g.label = labels.get(&g.slide_id).copied();
        write_graph(&out.join(graph_file_name(&g.slide_id)), &g)?;
    }
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let mut table = String::from("slide_id,n_patches,n_nodes,n_edges\n");
    println!("{:<24} {:>9} {:>7} {:>7}", "slide_id", "n_patches", "n_nodes", "n_edges");
    for row in &built.rows {
        if row.skipped {
            eprintln!("warning: slide `{}` has no patches and was skipped", row.slide_id);
            println!("{:<24} {:>9} {:>7} {:>7}", row.slide_id, 0, "skipped", "-");
        } else {
            println!("{:<24} {:>9} {:>7} {:>7}", row.slide_id, row.n_patches, row.n_nodes, row.n_edges);
        }
        table.push_str(&format!("{},{},{},{}\n", row.slide_id, row.n_patches, row.n_nodes, row.n_edges));
    }
    write_text(&out.join("summary.csv"), &table)?;
    println!("lambda_h {} lambda_g {} s_min {}", built.kernel.lambda_h, built.kernel.lambda_g, built.kernel.s_min);
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn train(graphs: &Path, labels: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let (graphs, labels) = labeled_graphs(graphs, labels)?;
    let ds = labeled_dataset(graphs, &labels, None)?;
    let result = fit(&ds, &cfg.model.spec(ds.feature_dim), &cfg.training)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_model(out, &result.params, &cfg.hash())?;
    write_text(&sibling(out, ".log.jsonl"), &log_to_jsonl(&result.log))?;
    write_text(&sibling(out, ".config.toml"), &cfg.to_toml())?;
    match result.best_val_auroc {
        Some(a) => println!("final validation AUROC {a:.4} (epoch {} of {})", result.best_epoch, result.log.len()),
        None => println!("trained {} epochs without a validation split", result.log.len()),
    }
    Ok(())
}

fn cv(graphs: &Path, labels: &Path, config: Option<&Path>, folds: Option<usize>, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let k = folds.unwrap_or(cfg.cv.folds);
    let (graphs, labels) = labeled_graphs(graphs, labels)?;
    let ds = labeled_dataset(graphs, &labels, None)?;
    stratified_folds(&ds, k, cfg.training.seed)?;
    let result = cross_validate(&ds, &cfg.model.spec(ds.feature_dim), &cfg.training, k)?;
    for f in &result.report.folds {
        println!(
            "fold {}: AUROC {:.4} AUPR {:.4} (best epoch {} of {})",
            f.fold, f.report.auroc, f.report.aupr, f.best_epoch, f.epochs_run
        );
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let hash = cfg.hash();
        for (i, f) in result.report.folds.iter().enumerate() {
            write_text(&dir.join(format!("fold_{i}.json")), &(serde_json::to_string_pretty(f)? + "\n"))?;
            save_model(&dir.join(format!("fold_{i}.model.json")), &result.models[i], &hash)?;
            write_text(&dir.join(format!("fold_{i}.log.jsonl")), &log_to_jsonl(&result.logs[i]))?;
        }
        write_text(&dir.join("cv_report.json"), &(serde_json::to_string_pretty(&result.report)? + "\n"))?;
        write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    }
    println!("{}", result.report.summary_line());
    Ok(())
}

fn node_totals(g: &SlideGraph, model: &ModelParams) -> Result<Vec<f64>> {
    Ok(forward(g, model)?.node_totals().iter().map(|&v| v as f64).collect())
}

fn predict(model: &Path, graphs: &Path, out: &Path, node_scores: Option<&Path>) -> Result<()> {
    let model = load_model(model)?;
    let graphs = read_graph_dir(graphs)?;
    if graphs.is_empty() {
        bail!(slidegraph::Error::InvalidInput("no graph files found".into()));
    }
    let refs: Vec<&SlideGraph> = graphs.iter().collect();
    let scores = predict_scores(&model, &refs)?;
    let rows: Vec<(String, f64)> = graphs.iter().map(|g| g.slide_id.clone()).zip(scores).collect();
    write_scores(out, &rows)?;
    if let Some(path) = node_scores {
        let per_slide = slidegraph::parallel::try_map(&graphs, |g| node_totals(g, &model))?;
        let mut text = String::from("slide_id,node_id,x,y,score_total\n");
        for (g, s) in graphs.iter().zip(per_slide) {
            for (k, (node, v)) in g.nodes.iter().zip(s).enumerate() {
                text.push_str(&format!("{},{k},{},{},{}\n", g.slide_id, node.centroid[0], node.centroid[1], v));
            }
        }
        write_text(path, &text)?;
    }
    println!("scored {} slides", rows.len());
    Ok(())
}

fn export_heatmap(model: &Path, graph: &Path, out: &Path) -> Result<()> {
    let model = load_model(model)?;
    let g = read_graph(graph)?;
    let b = forward(&g, &model)?;
    let layers = b.layer_scores.len();
    let mut text = String::from("node_id,x,y,score_total");
    for l in 0..layers {
        text.push_str(&format!(",score_l{l}"));
    }
    text.push('\n');
    let totals = b.node_totals();
    for (k, node) in g.nodes.iter().enumerate() {
        text.push_str(&format!("{k},{},{},{}", node.centroid[0], node.centroid[1], totals[k]));
        for l in 0..layers {
            text.push_str(&format!(",{}", b.node_scores[[k, l]]));
        }
        text.push('\n');
    }
    write_text(out, &text)?;
    println!("{}: {} nodes, slide score {}", g.slide_id, g.nodes.len(), b.total);
    Ok(())
}

fn evaluate(predictions: &Path, labels: &Path, out: Option<&Path>) -> Result<()> {
    let scores = read_scores(predictions)?;
    let labels = read_labels(labels)?;
    let mut s = Vec::new();
    let mut y = Vec::new();
    for (id, &v) in &scores {
        match labels.get(id) {
            Some(&l) => {
                s.push(v);
                y.push(l == 1);
            }
            None => eprintln!("warning: slide `{id}` has no label and is ignored"),
        }
    }
    let report = EvalReport::new(&s, &y)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| predictions.parent().unwrap_or(Path::new(".")).to_path_buf());
    create_dir(&dir)?;
    report.write_roc_csv(&dir.join("roc.csv"))?;
    report.write_pr_csv(&dir.join("pr.csv"))?;
    println!("AUROC {:.4} AUPR {:.4} ({} positive, {} negative)", report.auroc, report.aupr, report.n_pos, report.n_neg);
    Ok(())
}

fn synth(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = generate_dataset(&cfg.synth)?;
    write_dataset(out, &ds)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let positives = ds.labels.values().filter(|&&l| l == 1).count();
    println!("wrote {} slides ({positives} positive) to {}", ds.labels.len(), out.display());
    Ok(())
}

fn baseline(
    features: &[PathBuf],
    labels: &Path,
    channel: usize,
    mode: PoolMode,
    floor: f64,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = read_patch_files(features)?;
    let labels = read_labels(labels)?;
    let pooled = pool_feature(&ds, channel, mode, floor)?;
    if let Some(path) = out {
        write_pooled_csv(path, &pooled, &labels)?;
    }
    let (ids, values): (Vec<&String>, Vec<f64>) = pooled.iter().filter(|(id, _)| labels.contains_key(*id)).map(|(id, &v)| (id, v)).unzip();
    let y: Vec<bool> = ids.iter().map(|id| labels[*id] == 1).collect();
    let scorer = univariate_score(&values, &y)?;
    let fitted: Vec<f64> = values.iter().map(|&v| scorer.score(v)).collect();
    let report = EvalReport::new(&fitted, &y)?;
    println!("{mode} pooling of channel {channel}: AUROC {:.4} AUPR {:.4} (fit on all slides)", report.auroc, report.aupr);
    let folds = stratified_assign(&y, cfg.cv.folds, cfg.training.seed)?;
    let cv = cross_validate_baseline(&values, &y, &folds, cfg.cv.folds, mode)?;
    println!("{}-fold cv: AUROC {:.2}±{:.2} | AUPR {:.2}±{:.2}", cfg.cv.folds, cv.mean_auroc, cv.std_auroc, cv.mean_aupr, cv.std_aupr);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildGraph { features, config, out, labels } => build_graph(&features, config.as_deref(), &out, labels.as_deref()),
        Command::Train { graphs, labels, config, out } => train(&graphs, &labels, config.as_deref(), &out),
        Command::Cv { graphs, labels, config, folds, out } => cv(&graphs, &labels, config.as_deref(), folds, out.as_deref()),
        Command::Predict { model, graphs, out, node_scores } => predict(&model, &graphs, &out, node_scores.as_deref()),
        Command::ExportHeatmap { model, graph, out } => export_heatmap(&model, &graph, &out),
        Command::Evaluate { predictions, labels, out } => evaluate(&predictions, &labels, out.as_deref()),
        Command::Synth { config, out } => synth(config.as_deref(), &out),
        Command::Baseline { features, labels, channel, mode, floor, config, out } => {
            baseline(&features, &labels, channel, mode, floor, config.as_deref(), out.as_deref())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<slidegraph::Error>() {
            return if e.is_input_error() { 2 } else { 1 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.filter(|&t| t > 0);
    match slidegraph::parallel::with_threads(threads, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
