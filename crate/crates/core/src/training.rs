//! Pairwise ranking hinge loss, class-balanced batch sampling, Adam, the
//! training loop with validation-based model selection, and k-fold
//! cross-validation.

use std::collections::VecDeque;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gnn::{backward, forward_batch, init_params, GraphBatch, Mode, ModelParams, ModelSpec, Real};
use crate::graph_model::{stratified_folds, stratified_holdout, Dataset, SlideGraph};
use crate::metrics::EvalReport;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub pos_per_batch: usize,
    pub neg_per_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Divide the batch loss by the number of positive–negative pairs.
    pub mean_pairs: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            weight_decay: 0.0001,
            pos_per_batch: 8,
            neg_per_batch: 8,
            max_epochs: 300,
            patience: 30,
            seed: 0,
            validation_fraction: 0.2,
            mean_pairs: false,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.pos_per_batch == 0 || self.neg_per_batch == 0 {
            return Err(Error::Config("batch counts must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("invalid optimizer moments".into()));
        }
        Ok(())
    }
}

fn check_lists(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("ranking loss needs at least one positive and one negative score"));
    }
    Ok(())
}

/// `sum_i sum_j max(0, 1 - (pos_i - neg_j))`.
pub fn ranking_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_lists(pos, neg)?;
    Ok(pos.iter().map(|p| neg.iter().map(|n| (1.0 - (p - n)).max(0.0)).sum::<f64>()).sum())
}

/// Subgradient of [`ranking_loss`]: each pair with margin strictly below 1
/// adds −1 to its positive and +1 to its negative.
pub fn ranking_loss_grad(pos: &[f64], neg: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lists(pos, neg)?;
    let mut gp = vec![0.0; pos.len()];
    let mut gn = vec![0.0; neg.len()];
    for (i, p) in pos.iter().enumerate() {
        for (j, n) in neg.iter().enumerate() {
            if p - n < 1.0 {
                gp[i] -= 1.0;
                gn[j] += 1.0;
            }
        }
    }
    Ok((gp, gn))
}

/// Index batches `(positives, negatives)` for one epoch.
///
/// The epoch has `max(ceil(P / p), ceil(N / n))` batches. A class that needs
/// that many batches is drawn without replacement (its last batch may be
/// short); the other class is recycled through fresh permutations, so the
/// rarer class is oversampled. No index repeats inside a batch.
pub fn epoch_batches(
    pos: &[usize],
    neg: &[usize],
    per_pos: usize,
    per_neg: usize,
    r: &mut rng::Rng,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("training data must contain both classes"));
    }
    if per_pos == 0 || per_neg == 0 {
        return Err(Error::Config("batch counts must be at least 1".into()));
    }
    let count = pos.len().div_ceil(per_pos).max(neg.len().div_ceil(per_neg));
    let mut pos_draw = ClassDraw::new(pos, per_pos, count, r);
    let mut neg_draw = ClassDraw::new(neg, per_neg, count, r);
    Ok((0..count).map(|_| (pos_draw.next(r), neg_draw.next(r))).collect())
}

struct ClassDraw {
    items: Vec<usize>,
    per_batch: usize,
    queue: VecDeque<usize>,
    exact: bool,
}

impl ClassDraw {
    fn new(items: &[usize], per_batch: usize, batches: usize, r: &mut rng::Rng) -> Self {
        let mut d = ClassDraw {
            items: items.to_vec(),
            per_batch: per_batch.min(items.len()),
            queue: VecDeque::new(),
            exact: items.len().div_ceil(per_batch) == batches,
        };
        d.refill(r);
        d
    }

    fn refill(&mut self, r: &mut rng::Rng) {
        let mut perm = self.items.clone();
        perm.shuffle(r);
        self.queue.extend(perm);
    }

    fn next(&mut self, r: &mut rng::Rng) -> Vec<usize> {
        if self.exact {
            let take = self.per_batch.min(self.queue.len());
            return self.queue.drain(..take).collect();
        }
        let mut batch = Vec::with_capacity(self.per_batch);
        let mut deferred = Vec::new();
        while batch.len() < self.per_batch {
            if self.queue.is_empty() {
                self.refill(r);
            }
            let i = self.queue.pop_front().expect("refilled");
            if batch.contains(&i) {
                deferred.push(i);
            } else {
                batch.push(i);
            }
        }
        for i in deferred.into_iter().rev() {
            self.queue.push_front(i);
        }
        batch
    }
}

/// Adam moments for every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = params.trainable().iter().map(|t| t.data.len()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }
}

/// One bias-corrected Adam update with L2 weight decay folded into the
/// gradient. Rejects non-finite gradients before touching anything.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let g = grads.trainable();
    if g.len() != state.m.len() {
        return Err(Error::DimensionMismatch { expected: state.m.len(), found: g.len() });
    }
    for t in &g {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(t.name.clone()));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1 as Real, state.beta2 as Real);
    let c1 = 1.0 - state.beta1.powi(state.step as i32);
    let c2 = 1.0 - state.beta2.powi(state.step as i32);
    let (lr, wd, eps) = (cfg.learning_rate as Real, cfg.weight_decay as Real, state.epsilon as Real);
    let (c1, c2) = (c1 as Real, c2 as Real);
    for (((p, g), m), v) in params.trainable_mut().into_iter().zip(&g).zip(&mut state.m).zip(&mut state.v) {
        if p.data.len() != g.data.len() {
            return Err(Error::DimensionMismatch { expected: p.data.len(), found: g.data.len() });
        }
        for k in 0..p.data.len() {
            let grad = g.data[k] + wd * p.data[k];
            m[k] = b1 * m[k] + (1.0 - b1) * grad;
            v[k] = b2 * v[k] + (1.0 - b2) * grad * grad;
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            p.data[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
    pub lr: f64,
    /// Seconds since the Unix epoch; excluded from [`log_hash`].
    pub timestamp: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
    pub validation_slides: Vec<String>,
}

/// JSON-lines rendering of a training log.
pub fn log_to_jsonl(log: &[EpochRecord]) -> String {
    log.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect()
}

/// SHA-256 over every log field except the timestamp.
pub fn log_hash(log: &[EpochRecord]) -> String {
    let mut h = Sha256::new();
    for r in log {
        h.update(format!("{}|{:?}|{:?}|{:?}\n", r.epoch, r.train_loss.to_bits(), r.val_auroc.map(f64::to_bits), r.lr.to_bits()));
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Slide scores of `graphs` in inference mode, in input order.
pub fn predict_scores(params: &ModelParams, graphs: &[&SlideGraph]) -> Result<Vec<f64>> {
    let batch = GraphBatch::new(graphs, params.spec.input_dim)?;
    let cache = forward_batch(params, &batch, Mode::Eval)?;
    Ok(cache.totals.iter().map(|&t| t as f64).collect())
}

fn split_scores(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    (pos, neg)
}

/// Runs one optimization step on a batch; returns the batch loss.
fn train_step(params: &mut ModelParams, state: &mut AdamState, graphs: &[&SlideGraph], n_pos: usize, cfg: &TrainConfig) -> Result<f64> {
    let batch = GraphBatch::new(graphs, params.spec.input_dim)?;
    let cache = forward_batch(params, &batch, Mode::Train)?;
    let totals: Vec<f64> = cache.totals.iter().map(|&t| t as f64).collect();
    let (pos, neg) = totals.split_at(n_pos);
    let mut loss = ranking_loss(pos, neg)?;
    let (gp, gn) = ranking_loss_grad(pos, neg)?;
    let scale = if cfg.mean_pairs { 1.0 / (pos.len() * neg.len()) as f64 } else { 1.0 };
    loss *= scale;
    let d: Vec<Real> = gp.iter().chain(&gn).map(|g| (g * scale) as Real).collect();
    let grads = backward(params, &batch, &cache, &d, None)?;
    params.update_running_stats(&cache);
    adam_step(params, &grads, state, cfg)?;
    Ok(loss)
}

/// Trains a fresh model on `ds`. With a validation fraction, a stratified
/// slice of `ds` is held out, the parameters with the best validation AUROC
/// (ties: lower validation loss, then earlier epoch) are returned, and
/// training stops after `patience` epochs without improvement.
pub fn fit(ds: &Dataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    if spec.input_dim != ds.feature_dim {
        return Err(Error::DimensionMismatch { expected: spec.input_dim, found: ds.feature_dim });
    }
    let labels = ds.labels()?;
    let (train_idx, val_idx) = stratified_holdout(&labels, cfg.validation_fraction, rng::derive_seed(cfg.seed, 1))?;
    let pos: Vec<usize> = train_idx.iter().copied().filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = train_idx.iter().copied().filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("training data must contain both classes"));
    }
    let val_graphs: Vec<&SlideGraph> = val_idx.iter().map(|&i| &ds.graphs[i]).collect();
    let val_labels: Vec<bool> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut params = init_params(spec)?;
    let mut state = AdamState::new(&params, cfg);
    let mut r = rng::stream(cfg.seed, 2);
    let mut log = Vec::new();
    let mut best: Option<(f64, f64, usize, ModelParams)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let batches = epoch_batches(&pos, &neg, cfg.pos_per_batch, cfg.neg_per_batch, &mut r)?;
        let mut total = 0.0;
        for (bp, bn) in &batches {
            let graphs: Vec<&SlideGraph> = bp.iter().chain(bn).map(|&i| &ds.graphs[i]).collect();
            total += train_step(&mut params, &mut state, &graphs, bp.len(), cfg)?;
        }
        let train_loss = total / batches.len() as f64;
        let val_auroc = if val_graphs.is_empty() {
            None
        } else {
            let scores = predict_scores(&params, &val_graphs)?;
            let auc = crate::metrics::auroc(&scores, &val_labels)?;
            let (vp, vn) = split_scores(&scores, &val_labels);
            let vloss = ranking_loss(&vp, &vn)?;
            let improved = match &best {
                None => true,
                Some((a, l, _, _)) => auc > *a || (auc == *a && vloss < *l),
            };
            if improved {
                best = Some((auc, vloss, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            Some(auc)
        };
        log.push(EpochRecord { epoch, train_loss, val_auroc, lr: cfg.learning_rate, timestamp: now() });
        if val_auroc.is_some() && since_best >= cfg.patience {
            break;
        }
    }

    let validation_slides = val_idx.iter().map(|&i| ds.graphs[i].slide_id.clone()).collect();
    Ok(match best {
        Some((auc, _, epoch, p)) => FitResult { params: p, log, best_epoch: epoch, best_val_auroc: Some(auc), validation_slides },
        None => {
            let last = log.len();
            FitResult { params, log, best_epoch: last, best_val_auroc: None, validation_slides }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_slides: Vec<String>,
    pub test_scores: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_auroc: Option<f64>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub mean_auroc: f64,
    pub std_auroc: f64,
    pub mean_aupr: f64,
    pub std_aupr: f64,
}

impl CvReport {
    /// `AUROC 0.93±0.02 | AUPR 0.91±0.03`.
    pub fn summary_line(&self) -> String {
        format!("AUROC {:.2}±{:.2} | AUPR {:.2}±{:.2}", self.mean_auroc, self.std_auroc, self.mean_aupr, self.std_aupr)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub struct CvResult {
    pub report: CvReport,
    pub models: Vec<ModelParams>,
    pub logs: Vec<Vec<EpochRecord>>,
}

/// Stratified k-fold cross-validation. Each fold trains on the other k − 1
/// folds (with its own validation hold-out) and is scored on its own slides.
/// Folds run concurrently; results are in fold order.
pub fn cross_validate(ds: &Dataset, spec: &ModelSpec, cfg: &TrainConfig, k: usize) -> Result<CvResult> {
    cfg.validate()?;
    let split = stratified_folds(ds, k, cfg.seed)?;
    let labels = ds.labels()?;
    let fold_of: Vec<usize> = ds.graphs.iter().map(|g| split.assignments[&g.slide_id]).collect();
    let folds: Vec<usize> = (0..k).collect();
    let runs = crate::parallel::try_map(&folds, |&f| -> Result<(FoldReport, ModelParams, Vec<EpochRecord>)> {
        let train: Vec<usize> = (0..ds.len()).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..ds.len()).filter(|&i| fold_of[i] == f).collect();
        let fold_cfg = TrainConfig { seed: rng::derive_seed(cfg.seed, 100 + f as u64), ..cfg.clone() };
        let fit = fit(&ds.subset(&train), spec, &fold_cfg)?;
        let graphs: Vec<&SlideGraph> = test.iter().map(|&i| &ds.graphs[i]).collect();
        let scores = predict_scores(&fit.params, &graphs)?;
        let test_labels: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        let report = EvalReport::new(&scores, &test_labels)?;
        Ok((
            FoldReport {
                fold: f,
                test_slides: graphs.iter().map(|g| g.slide_id.clone()).collect(),
                test_scores: scores,
                best_epoch: fit.best_epoch,
                epochs_run: fit.log.len(),
                val_auroc: fit.best_val_auroc,
                report,
            },
            fit.params,
            fit.log,
        ))
    })?;
    let mut fold_reports = Vec::new();
    let mut models = Vec::new();
    let mut logs = Vec::new();
    for (r, m, l) in runs {
        fold_reports.push(r);
        models.push(m);
        logs.push(l);
    }
    let aurocs: Vec<f64> = fold_reports.iter().map(|f| f.report.auroc).collect();
    let auprs: Vec<f64> = fold_reports.iter().map(|f| f.report.aupr).collect();
    let (mean_auroc, std_auroc) = mean_std(&aurocs);
    let (mean_aupr, std_aupr) = mean_std(&auprs);
    Ok(CvResult { report: CvReport { folds: fold_reports, mean_auroc, std_auroc, mean_aupr, std_aupr }, models, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_model::ClusterNode;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn loss_examples() {
        assert_eq!(ranking_loss(&[2.0], &[0.5]).unwrap(), 0.0);
        assert_eq!(ranking_loss(&[0.0], &[0.0]).unwrap(), 1.0);
        assert!((ranking_loss(&[1.0, 0.2], &[0.5, -0.3]).unwrap() - 2.3).abs() < 1e-15);
        assert!(ranking_loss(&[], &[1.0]).is_err());
        assert!(ranking_loss_grad(&[1.0], &[]).is_err());
    }

    #[test]
    fn grad_examples() {
        assert_eq!(ranking_loss_grad(&[0.0], &[0.0]).unwrap(), (vec![-1.0], vec![1.0]));
        assert_eq!(ranking_loss_grad(&[3.0, 2.0], &[0.0]).unwrap(), (vec![0.0, 0.0], vec![0.0]));
        // Margin exactly 1 is on the boundary: no gradient.
        assert_eq!(ranking_loss_grad(&[1.0], &[0.0]).unwrap(), (vec![0.0], vec![0.0]));
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut r = rng::rng(4);
        for _ in 0..50 {
            let pos: Vec<f64> = (0..5).map(|_| r.random::<f64>() * 3.0 - 1.0).collect();
            let neg: Vec<f64> = (0..4).map(|_| r.random::<f64>() * 3.0 - 1.0).collect();
            let (gp, gn) = ranking_loss_grad(&pos, &neg).unwrap();
            // Piecewise linear: exact differences away from the hinge kinks.
            let h = 1e-3;
            let near_kink = pos.iter().any(|p| neg.iter().any(|n| (p - n - 1.0).abs() < 2.0 * h));
            if near_kink {
                continue;
            }
            for i in 0..pos.len() {
                let (mut a, mut b) = (pos.clone(), pos.clone());
                a[i] += h;
                b[i] -= h;
                let fd = (ranking_loss(&a, &neg).unwrap() - ranking_loss(&b, &neg).unwrap()) / (2.0 * h);
                assert!((fd - gp[i]).abs() < 1e-8);
            }
            for j in 0..neg.len() {
                let (mut a, mut b) = (neg.clone(), neg.clone());
                a[j] += h;
                b[j] -= h;
                let fd = (ranking_loss(&pos, &a).unwrap() - ranking_loss(&pos, &b).unwrap()) / (2.0 * h);
                assert!((fd - gn[j]).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn loss_properties(
            pos in prop::collection::vec(-3.0f64..3.0, 1..8),
            neg in prop::collection::vec(-3.0f64..3.0, 1..8),
            shift in -5.0f64..5.0,
        ) {
            let l = ranking_loss(&pos, &neg).unwrap();
            prop_assert!(l >= 0.0);
            let all_ok = pos.iter().all(|p| neg.iter().all(|n| p - n >= 1.0));
            prop_assert_eq!(l == 0.0, all_ok);
            let (gp, gn) = ranking_loss_grad(&pos, &neg).unwrap();
            prop_assert_eq!(gp.iter().chain(&gn).sum::<f64>(), 0.0);
            let sp: Vec<f64> = pos.iter().map(|v| v + shift).collect();
            let sn: Vec<f64> = neg.iter().map(|v| v + shift).collect();
            prop_assert!((ranking_loss(&sp, &sn).unwrap() - l).abs() < 1e-9);
            let up: Vec<f64> = pos.iter().map(|v| v + 1.0).collect();
            let dn: Vec<f64> = neg.iter().map(|v| v - 1.0).collect();
            prop_assert!(ranking_loss(&up, &dn).unwrap() <= l);
            let mut rp = pos.clone();
            rp.reverse();
            prop_assert!((ranking_loss(&rp, &neg).unwrap() - l).abs() < 1e-9);
        }
    }

    #[test]
    fn balanced_epoch_covers_each_slide_once() {
        let pos: Vec<usize> = (0..5).collect();
        let neg: Vec<usize> = (5..10).collect();
        let b = epoch_batches(&pos, &neg, 2, 2, &mut rng::rng(1)).unwrap();
        assert!(b.len() >= 2);
        assert_eq!(b.iter().filter(|(p, n)| p.len() == 2 && n.len() == 2).count(), 2);
        let mut seen: Vec<usize> = b.iter().flat_map(|(p, n)| p.iter().chain(n).copied()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn rare_class_is_reused() {
        let b = epoch_batches(&[0], &(1..11).collect::<Vec<_>>(), 1, 4, &mut rng::rng(2)).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|(p, _)| p == &vec![0]));
        let mut negs: Vec<usize> = b.iter().flat_map(|(_, n)| n.clone()).collect();
        negs.sort_unstable();
        assert_eq!(negs, (1..11).collect::<Vec<_>>());
        assert!(epoch_batches(&[], &[1, 2], 1, 1, &mut rng::rng(3)).is_err());
    }

    #[test]
    fn recycled_class_never_repeats_within_a_batch() {
        let mut r = rng::rng(5);
        for _ in 0..50 {
            let b = epoch_batches(&[0, 1, 2], &(3..40).collect::<Vec<_>>(), 2, 3, &mut r).unwrap();
            for (p, _) in &b {
                assert_eq!(p.len(), 2);
                assert_ne!(p[0], p[1]);
            }
        }
    }

    fn scalar_params(v: Real) -> ModelParams {
        let spec = ModelSpec {
            input_dim: 1,
            base_dims: vec![],
            layer_dims: vec![1],
            use_batch_norm: false,
            head_bias: false,
            ..ModelSpec::default_for(1)
        };
        let mut p = init_params(&spec).unwrap();
        for t in p.trainable_mut() {
            t.data.iter_mut().for_each(|x| *x = v);
        }
        p
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = scalar_params(0.7);
        let before = p.clone();
        let mut st = AdamState::new(&p, &cfg);
        adam_step(&mut p, &before.zeros_like(), &mut st, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = scalar_params(0.0);
        let mut g = p.zeros_like();
        for t in g.trainable_mut() {
            t.data.iter_mut().for_each(|x| *x = 1.0);
        }
        let mut st = AdamState::new(&p, &cfg);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        for t in p.trainable() {
            for &v in t.data {
                let tol = if cfg!(feature = "f32") { 1e-7 } else { 1e-10 };
                assert!((v as f64 + 0.001).abs() < tol, "{v}");
            }
        }
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        let cfg = TrainConfig { learning_rate: 0.05, ..TrainConfig::default() };
        let mut p = scalar_params(0.0);
        let target = 2.0;
        let loss =
            |p: &ModelParams| -> f64 { p.trainable().iter().flat_map(|t| t.data.iter()).map(|&v| (v as f64 - target).powi(2)).sum() };
        let mut st = AdamState::new(&p, &cfg);
        let mut prev = loss(&p);
        for _ in 0..10 {
            let mut g = p.zeros_like();
            for (gt, pt) in g.trainable_mut().into_iter().zip(p.trainable()) {
                for (gv, &pv) in gt.data.iter_mut().zip(pt.data) {
                    *gv = 2.0 * (pv - target as Real);
                }
            }
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            let now = loss(&p);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(0.0);
        let mut g = p.zeros_like();
        g.heads[1].weight[0] = Real::NAN;
        let mut st = AdamState::new(&p, &cfg);
        let before = p.clone();
        match adam_step(&mut p, &g, &mut st, &cfg) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "heads.1.weight"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p, before);
    }

    /// Positives carry one extra node with a large first feature.
    pub(crate) fn separable(n: usize, seed: u64) -> Dataset {
        let mut r = rng::rng(seed);
        let graphs = (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let count = 4 + r.random_range(0..3);
                let mut nodes: Vec<ClusterNode> = (0..count)
                    .map(|k| ClusterNode {
                        centroid: [k as f64 * 100.0, (k % 2) as f64 * 150.0],
                        features: vec![r.random::<f64>() * 0.2, r.random::<f64>()],
                        member_count: 1,
                        member_indices: vec![k],
                    })
                    .collect();
                if label == 1 {
                    nodes[0].features[0] = 3.0;
                }
                let edges = crate::geometry::delaunay_edges(&nodes.iter().map(|n| n.centroid).collect::<Vec<_>>()).unwrap().into_pairs();
                SlideGraph { slide_id: format!("s{i:03}"), nodes, edges, label: Some(label), mpp: 0.25 }
            })
            .collect();
        Dataset::new(graphs, None).unwrap()
    }

    #[test]
    fn separable_data_reaches_zero_training_loss() {
        let ds = separable(24, 1);
        let cfg = TrainConfig { learning_rate: 0.01, validation_fraction: 0.0, max_epochs: 300, ..TrainConfig::default() };
        let fit = fit(&ds, &ModelSpec::default_for(2), &cfg).unwrap();
        assert_eq!(fit.log.last().unwrap().train_loss, 0.0, "{:?}", fit.log.last());
        assert_eq!(fit.best_val_auroc, None);
    }

    #[test]
    fn fit_is_reproducible_and_patience_zero_runs_one_epoch() {
        let ds = separable(20, 2);
        let cfg = TrainConfig { max_epochs: 5, seed: 9, ..TrainConfig::default() };
        let a = fit(&ds, &ModelSpec::default_for(2), &cfg).unwrap();
        let b = fit(&ds, &ModelSpec::default_for(2), &cfg).unwrap();
        assert_eq!(log_hash(&a.log), log_hash(&b.log));
        assert_eq!(a.params, b.params);
        assert_eq!(a.validation_slides.len(), 4);
        let once = fit(&ds, &ModelSpec::default_for(2), &TrainConfig { patience: 0, ..cfg }).unwrap();
        assert_eq!(once.log.len(), 1);
        assert!(log_to_jsonl(&once.log).contains("\"val_auroc\""));
    }

    #[test]
    fn cross_validation_is_deterministic() {
        let ds = separable(20, 3);
        let cfg = TrainConfig { max_epochs: 4, ..TrainConfig::default() };
        let a = cross_validate(&ds, &ModelSpec::default_for(2), &cfg, 5).unwrap();
        let b = cross_validate(&ds, &ModelSpec::default_for(2), &cfg, 5).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.models, b.models);
        assert_eq!(a.report.folds.len(), 5);
        assert!(a.report.summary_line().starts_with("AUROC "));
        assert!(cross_validate(&ds, &ModelSpec::default_for(2), &cfg, 11).is_err());
    }

    #[test]
    fn mean_std_is_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
