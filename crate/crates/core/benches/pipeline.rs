//! Graph construction, batched forward/backward and a short training run,
//! each on the full worker pool and on a single thread. Build with
//! `--no-default-features` to time the sequential fallback instead.

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};

use slidegraph::config::Config;
use slidegraph::gnn::{backward, forward_batch, init_params, GraphBatch, Mode};
use slidegraph::graph_model::{Dataset, PatchDataset, SlideGraph};
use slidegraph::parallel::with_threads;
use slidegraph::pipeline::{build_graphs, labeled_dataset};
use slidegraph::synth::generate_dataset;
use slidegraph::training::{fit, TrainConfig};

fn fixture(slides: usize) -> (Config, PatchDataset, Dataset) {
    let mut cfg = Config::default();
    cfg.synth.n_slides = slides;
    let syn = generate_dataset(&cfg.synth).expect("synthetic data");
    let built = build_graphs(&syn.patches, &cfg, &[]).expect("graphs");
    let ds = labeled_dataset(built.graphs, &syn.labels, None).expect("labels");
    (cfg, syn.patches, ds)
}

fn pools() -> [(&'static str, Option<usize>); 2] {
    [("pool", None), ("single", Some(1))]
}

fn bench_build(c: &mut Criterion) {
    let (cfg, patches, _) = fixture(24);
    let mut group = c.benchmark_group("build_graphs");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::new(name, 24), |b| {
            b.iter(|| with_threads(threads, || build_graphs(&patches, &cfg, &[]).unwrap()))
        });
    }
    group.finish();
}

fn bench_forward_backward(c: &mut Criterion) {
    let (_, _, ds) = fixture(16);
    let params = init_params(&slidegraph::gnn::ModelSpec::default_for(ds.feature_dim)).unwrap();
    let refs: Vec<&SlideGraph> = ds.graphs.iter().collect();
    let batch = GraphBatch::new(&refs, ds.feature_dim).unwrap();
    let ones = vec![1.0; refs.len()];
    let mut group = c.benchmark_group("forward_backward");
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::new(name, refs.len()), |b| {
            b.iter(|| {
                with_threads(threads, || {
                    let cache = forward_batch(&params, &batch, Mode::Train).unwrap();
                    backward(&params, &batch, &cache, &ones, None).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_fit(c: &mut Criterion) {
    let (cfg, _, ds) = fixture(40);
    let spec = cfg.model.spec(ds.feature_dim);
    let train = TrainConfig { max_epochs: 3, ..cfg.training.clone() };
    let mut group = c.benchmark_group("fit_3_epochs");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::new(name, 40), |b| {
            b.iter_batched(|| ds.clone(), |d| with_threads(threads, || fit(&d, &spec, &train).unwrap()), BatchSize::LargeInput)
        });
    }
    group.finish();
}

criterion_group!(benches, bench_build, bench_forward_backward, bench_fit);
criterion_main!(benches);
