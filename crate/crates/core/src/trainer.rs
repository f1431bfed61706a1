//! Training loop, evaluation, early stopping, metrics and replicates.

use std::borrow::Cow;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape};
use crate::checkpoint::Checkpoint;
use crate::config::{Binarization, DatasetKind, TrainConfig};
use crate::data::{
    binarize, carve_validation, derive_seed, load_mnist_dir, load_stocks_csv, make_stock_splits, sample_label_budget,
    split_mnist, Budget, DataKind, Dataset, LabelColumn, SemiSplit, ZScore,
};
use crate::error::{Error, Result};
use crate::model::{Architecture, CcVae, HeadKind, OutputKind};
use crate::objectives::{labeled_elbo_graph, standard_noise, total_objective, Labeled, ObjectiveTerms};
use crate::optim::AdamState;
use crate::tensor::Tensor;

/// Raw data as loaded from disk, before any split.
#[derive(Debug, Clone)]
pub struct Source {
    pub kind: DatasetKind,
    /// MNIST: the 60000-row training file. Stocks: every row.
    pub pool: Dataset,
    /// MNIST: the separate test file.
    pub test: Option<Dataset>,
    pub warnings: Vec<String>,
}

impl Source {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        match cfg.data.kind {
            DatasetKind::Mnist => {
                let (pool, test) = load_mnist_dir(&cfg.data.path)?;
                Ok(Source {
                    kind: DatasetKind::Mnist,
                    pool,
                    test: Some(test),
                    warnings: Vec::new(),
                })
            }
            DatasetKind::Stocks => {
                let col = LabelColumn::parse(&cfg.data.label_column)
                    .ok_or_else(|| Error::Config("bad data.label_column".into()))?;
                let loaded = load_stocks_csv(&cfg.data.path, col)?;
                Ok(Source {
                    kind: DatasetKind::Stocks,
                    pool: loaded.dataset,
                    test: None,
                    warnings: loaded.warnings,
                })
            }
        }
    }
}

/// The datasets one training run sees. Binary-kind evaluation sets are
/// already binarized with a fixed seed; training sets keep intensities.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub labeled: Option<Dataset>,
    pub unlabeled: Option<Dataset>,
    pub validation: Option<Dataset>,
    pub test: Option<Dataset>,
    /// The labeled set binarized once, for reporting training error.
    pub labeled_eval: Option<Dataset>,
    pub kind: DataKind,
    pub data_dim: usize,
    pub label_values: Vec<f64>,
    pub split: SemiSplit,
}

fn subset(d: &Dataset, idx: &[usize]) -> Result<Option<Dataset>> {
    if idx.is_empty() {
        Ok(None)
    } else {
        d.subset(idx).map(Some)
    }
}

fn limit(mut idx: Vec<usize>, cap: Option<usize>, seed: u64) -> Vec<usize> {
    if let Some(cap) = cap {
        if idx.len() > cap {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(cap);
            idx.sort_unstable();
        }
    }
    idx
}

fn fixed_binarization(d: Option<Dataset>, seed: u64) -> Result<Option<Dataset>> {
    d.map(|mut d| {
        if d.kind == DataKind::Binary {
            d.x = binarize(&d.x, &mut ChaCha8Rng::seed_from_u64(seed))?;
        }
        Ok(d)
    })
    .transpose()
}

/// Seed streams derived from the run seed.
mod streams {
    pub const LABELS: u64 = 1;
    pub const UNLABELED_CAP: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const EVAL_BINARIZE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const STEPS: u64 = 6;
    pub const EPOCH_BINARIZE: u64 = 1 << 32;
}

/// Builds the labeled/unlabeled/validation/test sets for replicate `replicate`.
///
/// MNIST: fixed 50000/10000 train/validation partition (by `split_seed`),
/// the separate test file, and a labeled subset drawn with the run seed.
/// Stocks: split `replicate mod n_splits` of the seeded 600/350 partitions,
/// a validation carve-out, then the label budget; features are z-scored with
/// statistics of the non-test rows.
pub fn prepare(cfg: &TrainConfig, src: &Source, replicate: usize) -> Result<Prepared> {
    let d = &cfg.data;
    let seed = cfg.run.seed;
    let pool = &src.pool;
    let labels = pool.labels()?;
    let (split, train_size, pool_data, mut test_data) = match src.kind {
        DatasetKind::Mnist => {
            let (tr, va) = split_mnist(pool, d.split_seed)?;
            let va = limit(va, d.validation_limit, derive_seed(d.split_seed, streams::VALIDATION));
            let test = src
                .test
                .as_ref()
                .ok_or_else(|| Error::Dataset("MNIST source has no test set".into()))?;
            let test_idx: Vec<usize> = (0..test.len()).collect();
            let test_idx = limit(test_idx, d.test_limit, derive_seed(d.split_seed, streams::VALIDATION));
            let n = tr.len();
            (SemiSplit::new(tr, Vec::new(), va, Vec::new(), d.split_seed)?, n, Cow::Borrowed(pool), test.subset(&test_idx)?)
        }
        DatasetKind::Stocks => {
            let splits = make_stock_splits(pool.len(), d.n_splits, d.train_size, d.test_size, d.split_seed)?;
            let sp = &splits[replicate % splits.len()];
            let sp = carve_validation(sp, d.validation_fraction, derive_seed(sp.seed, streams::VALIDATION))?;
            let mut fit_rows = sp.training();
            fit_rows.extend(&sp.validation);
            let z = ZScore::fit(&pool.x.gather_rows(&fit_rows)?)?;
            let normalized = Dataset {
                x: z.apply(&pool.x)?,
                ..pool.clone()
            };
            let test = normalized.subset(&sp.test)?;
            (sp, d.train_size, Cow::Owned(normalized), test)
        }
    };
    let count = match (d.labeled, d.label_fraction) {
        (Some(c), _) => c,
        // fractions count against the whole training portion, validation carve-out included
        (None, Some(f)) => Budget::Fraction(f).resolve(train_size)?.min(split.training().len()),
        (None, None) => split.training().len(),
    };
    let label_seed = derive_seed(seed, streams::LABELS);
    let split = if count == 0 {
        SemiSplit::new(Vec::new(), split.training(), split.validation, split.test, split.seed)?
    } else {
        sample_label_budget(&split, count, labels, label_seed, d.stratified)?
    };
    let unlabeled = limit(split.unlabeled.clone(), d.unlabeled_limit, derive_seed(seed, streams::UNLABELED_CAP));
    let split = SemiSplit::new(split.labeled, unlabeled, split.validation, split.test, split.seed)?;

    // evaluation sets get one draw tied to the partition, so every replicate sees the same pixels
    let eval_seed = derive_seed(d.split_seed, streams::EVAL_BINARIZE);
    if test_data.kind == DataKind::Binary {
        test_data.x = binarize(&test_data.x, &mut ChaCha8Rng::seed_from_u64(eval_seed))?;
    }
    let validation = fixed_binarization(subset(&pool_data, &split.validation)?, eval_seed ^ 1)?;
    let labeled = subset(&pool_data, &split.labeled)?;
    let labeled_eval = fixed_binarization(labeled.clone(), derive_seed(seed, streams::EVAL_BINARIZE))?;
    let unlabeled = subset(&pool_data, &split.unlabeled)?;
    if labeled.is_none() && unlabeled.is_none() {
        return Err(Error::Dataset("no training examples".into()));
    }
    Ok(Prepared {
        labeled,
        unlabeled,
        validation,
        test: Some(test_data),
        labeled_eval,
        kind: pool.kind,
        data_dim: pool.dim(),
        label_values: pool.label_values.clone(),
        split,
    })
}

pub fn architecture(cfg: &TrainConfig, prep: &Prepared) -> Architecture {
    let m = &cfg.model;
    Architecture {
        data_dim: prep.data_dim,
        latent_dim: m.latent_dim,
        num_classes: prep.label_values.len(),
        recognition_hidden: m.recognition_hidden.clone(),
        generative_hidden: m.generative_hidden.clone(),
        classifier_hidden: m.classifier_hidden.clone(),
        activation: m.activation,
        output: match prep.kind {
            DataKind::Binary => OutputKind::Bernoulli,
            DataKind::Continuous => OutputKind::Gaussian,
        },
        global_variance: m.global_variance,
        head: m.head,
        label_values: prep.label_values.clone(),
        learn_class_prior: m.learn_class_prior,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub error: f64,
    pub mae: f64,
    pub n: usize,
}

/// Zero-one error and mean absolute error over raw label values.
pub fn evaluate(m: &CcVae, d: &Dataset) -> Result<Evaluation> {
    let y = d.labels()?;
    let pred = m.predict(&d.x)?;
    Ok(score(&pred, y, &d.label_values))
}

pub fn score(pred: &[usize], truth: &[usize], label_values: &[f64]) -> Evaluation {
    let n = truth.len();
    let wrong = pred.iter().zip(truth).filter(|(p, t)| p != t).count();
    let abs: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (label_values[p] - label_values[t]).abs())
        .sum();
    Evaluation {
        error: wrong as f64 / n as f64,
        mae: abs / n as f64,
        n,
    }
}

/// Mean labeled ELBO over `d` with seeded noise, evaluated in chunks.
pub fn mean_labeled_elbo(m: &CcVae, d: &Dataset, seed: u64) -> Result<f64> {
    let y = d.labels()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for start in (0..d.len()).step_by(500) {
        let idx: Vec<usize> = (start..(start + 500).min(d.len())).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(d.x.gather_rows(&idx)?);
        let eps = standard_noise(&mut rng, idx.len(), m.arch.latent_dim);
        let labels: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let e = labeled_elbo_graph(&mut tape, m.view(), x, &labels, &eps)?;
        total += tape.value(e).sum();
    }
    Ok(total / d.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub neg_labeled_elbo: f64,
    pub neg_unlabeled_bound: f64,
    pub neg_classifier: f64,
    pub neg_total: f64,
    pub train: Option<Evaluation>,
    pub validation: Option<Evaluation>,
    pub test: Option<Evaluation>,
}

pub const METRICS_HEADER: &str = "epoch,neg_labeled_elbo,neg_unlabeled_bound,neg_classifier,neg_total,\
train_error,validation_error,test_error,train_mae,validation_mae,test_mae";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let f = |e: Option<Evaluation>, mae: bool| {
            e.map(|e| format!("{}", if mae { e.mae } else { e.error })).unwrap_or_default()
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.neg_labeled_elbo,
            self.neg_unlabeled_bound,
            self.neg_classifier,
            self.neg_total,
            f(self.train, false),
            f(self.validation, false),
            f(self.test, false),
            f(self.train, true),
            f(self.validation, true),
            f(self.test, true),
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The selected model: best validation error if a validation set exists, else the last.
    pub model: CcVae,
    pub optimizer: AdamState,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub steps: u64,
    /// Seconds spent per evaluated epoch, aligned with `history`.
    pub seconds: Vec<f64>,
    pub final_test: Option<Evaluation>,
    pub final_validation: Option<Evaluation>,
}

/// Recycling labeled stream: reshuffles whenever fewer than a batch remain.
struct Stream {
    order: Vec<usize>,
    cursor: usize,
}

impl Stream {
    fn new(n: usize) -> Self {
        Stream {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let b = batch.min(self.order.len());
        if self.cursor + b > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        out
    }
}

fn epoch_inputs(d: &Option<Dataset>, mode: Binarization, statics: &Option<Tensor>, seed: u64) -> Result<Option<Tensor>> {
    let Some(d) = d else { return Ok(None) };
    if d.kind != DataKind::Binary {
        return Ok(Some(d.x.clone()));
    }
    match mode {
        Binarization::Static => Ok(statics.clone()),
        Binarization::Dynamic => binarize(&d.x, &mut ChaCha8Rng::seed_from_u64(seed)).map(Some),
    }
}

struct Outputs {
    dir: PathBuf,
    metrics: fs::File,
    timing: fs::File,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<fs::File> {
            let p = dir.join(name);
            let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(f, "{header}").map_err(|e| Error::io(&p, e))?;
            Ok(f)
        };
        Ok(Outputs {
            dir: dir.to_path_buf(),
            metrics: open("metrics.csv", METRICS_HEADER)?,
            timing: open("timing.csv", "epoch,seconds")?,
        })
    }

    fn record(&mut self, m: &EpochMetrics, seconds: f64) -> Result<()> {
        let p = self.dir.join("metrics.csv");
        writeln!(self.metrics, "{}", m.csv_row()).map_err(|e| Error::io(&p, e))?;
        self.metrics.flush().map_err(|e| Error::io(&p, e))?;
        let p = self.dir.join("timing.csv");
        writeln!(self.timing, "{},{seconds:.3}", m.epoch).map_err(|e| Error::io(&p, e))
    }
}

fn checkpoint(model: &CcVae, opt: &AdamState, cfg: &TrainConfig, epoch: usize) -> Checkpoint {
    let mut c = Checkpoint::new(model.clone(), Some(opt.clone()));
    c.meta.insert("seed".into(), cfg.run.seed.to_string());
    c.meta.insert("epoch".into(), epoch.to_string());
    c.meta.insert("alpha".into(), cfg.train.alpha.to_string());
    c
}

fn is_better(candidate: &EpochMetrics, best: Option<&EpochMetrics>) -> bool {
    let Some(best) = best else { return true };
    let (c, b) = (candidate.validation.map(|v| v.error), best.validation.map(|v| v.error));
    match (c, b) {
        (Some(c), Some(b)) => c < b || (c == b && candidate.neg_total < best.neg_total),
        _ => false,
    }
}

/// Trains a fresh model. Writes `metrics.csv`, `timing.csv`, `best.ckpt`
/// and `last.ckpt` under `out_dir` when given; `progress` sees each
/// evaluation as it happens.
pub fn train(
    cfg: &TrainConfig,
    prep: &Prepared,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let arch = architecture(cfg, prep);
    let model = CcVae::init(arch, derive_seed(cfg.run.seed, streams::INIT))?;
    train_model(cfg, prep, model, out_dir, progress)
}

pub fn train_model(
    cfg: &TrainConfig,
    prep: &Prepared,
    mut model: CcVae,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for d in [&prep.labeled, &prep.unlabeled, &prep.validation, &prep.test].into_iter().flatten() {
        if d.dim() != model.arch.data_dim {
            return Err(Error::Dataset(format!(
                "data has {} features, model expects {}",
                d.dim(),
                model.arch.data_dim
            )));
        }
    }
    let t = &cfg.train;
    let seed = cfg.run.seed;
    let mut outputs = out_dir.map(Outputs::create).transpose()?;
    let mut opt = AdamState::new(cfg.optim.adam())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::STEPS));

    let static_seed = derive_seed(seed, streams::EPOCH_BINARIZE);
    let static_l = match (&prep.labeled, cfg.data.binarize) {
        (Some(d), Binarization::Static) if d.kind == DataKind::Binary => {
            Some(binarize(&d.x, &mut ChaCha8Rng::seed_from_u64(static_seed))?)
        }
        _ => None,
    };
    let static_u = match (&prep.unlabeled, cfg.data.binarize) {
        (Some(d), Binarization::Static) if d.kind == DataKind::Binary => {
            Some(binarize(&d.x, &mut ChaCha8Rng::seed_from_u64(static_seed ^ 1))?)
        }
        _ => None,
    };
    let labels = prep.labeled.as_ref().map(|d| d.labels()).transpose()?;
    let mut lab_stream = prep.labeled.as_ref().map(|d| Stream::new(d.len()));
    let n_unl = prep.unlabeled.as_ref().map_or(0, |d| d.len());

    let mut history = Vec::new();
    let mut seconds = Vec::new();
    let mut best: Option<(EpochMetrics, ParamStore)> = None;
    let mut since_best = 0usize;
    let mut steps = 0u64;

    for epoch in 1..=t.epochs {
        let started = Instant::now();
        let ep_seed = derive_seed(static_seed, epoch as u64);
        let xl = epoch_inputs(&prep.labeled, cfg.data.binarize, &static_l, ep_seed)?;
        let xu = epoch_inputs(&prep.unlabeled, cfg.data.binarize, &static_u, ep_seed ^ 1)?;

        let mut unl_order: Vec<usize> = (0..n_unl).collect();
        unl_order.shuffle(&mut rng);
        let n_steps = if n_unl > 0 {
            n_unl.div_ceil(t.batch_size_unlabeled)
        } else {
            prep.labeled.as_ref().map_or(0, |d| d.len()).div_ceil(t.batch_size_labeled)
        };
        let mut sums = ObjectiveTerms {
            labeled_elbo: 0.0,
            unlabeled_bound: 0.0,
            classifier_loss: 0.0,
            total: 0.0,
            alpha: t.alpha,
        };
        for s in 0..n_steps {
            let lbatch = match (&xl, &mut lab_stream, labels) {
                (Some(x), Some(stream), Some(y)) => {
                    let idx = stream.next(t.batch_size_labeled, &mut rng);
                    let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
                    Some((x.gather_rows(&idx)?, yb))
                }
                _ => None,
            };
            let ubatch = match &xu {
                Some(x) => {
                    let lo = s * t.batch_size_unlabeled;
                    let hi = (lo + t.batch_size_unlabeled).min(n_unl);
                    Some(x.gather_rows(&unl_order[lo..hi])?)
                }
                None => None,
            };
            let mut tape = Tape::new();
            let lab = lbatch.as_ref().map(|(x, y)| Labeled { x, y });
            let g = total_objective(&mut tape, model.view(), lab, ubatch.as_ref(), t.alpha, &mut rng)?;
            if !g.terms.total.is_finite() {
                return Err(Error::NonFinite { op: "objective" });
            }
            let loss = tape.neg(g.total)?;
            model.params.zero_grads();
            tape.backward(loss, &mut model.params)?;
            opt.step(&mut model.params)?;
            if model.params.iter().any(|(_, p)| !p.value.is_finite()) {
                return Err(Error::NonFinite { op: "adam step" });
            }
            steps += 1;
            sums.labeled_elbo += g.terms.labeled_elbo;
            sums.unlabeled_bound += g.terms.unlabeled_bound;
            sums.classifier_loss += g.terms.classifier_loss;
            sums.total += g.terms.total;
        }

        let last = epoch == t.epochs;
        if epoch % t.eval_every != 0 && !last {
            continue;
        }
        let k = n_steps.max(1) as f64;
        let eval = |d: &Option<Dataset>| d.as_ref().map(|d| evaluate(&model, d)).transpose();
        let metrics = EpochMetrics {
            epoch,
            neg_labeled_elbo: -sums.labeled_elbo / k,
            neg_unlabeled_bound: -sums.unlabeled_bound / k,
            neg_classifier: -sums.classifier_loss / k,
            neg_total: -sums.total / k,
            train: eval(&prep.labeled_eval)?,
            validation: eval(&prep.validation)?,
            test: eval(&prep.test)?,
        };
        let secs = started.elapsed().as_secs_f64();
        if let Some(o) = outputs.as_mut() {
            o.record(&metrics, secs)?;
            checkpoint(&model, &opt, cfg, epoch).save(&o.dir.join("last.ckpt"))?;
        }
        progress(&metrics);
        let improved = metrics.validation.is_some() && is_better(&metrics, best.as_ref().map(|b| &b.0));
        if improved {
            if let Some(o) = &outputs {
                checkpoint(&model, &opt, cfg, epoch).save(&o.dir.join("best.ckpt"))?;
            }
            best = Some((metrics.clone(), model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(metrics);
        seconds.push(secs);
        if t.early_stop_patience > 0 && since_best >= t.early_stop_patience {
            break;
        }
    }

    let best_epoch = best.as_ref().map(|b| b.0.epoch);
    if let Some((_, params)) = best {
        model.params = params;
    }
    let final_test = prep.test.as_ref().map(|d| evaluate(&model, d)).transpose()?;
    let final_validation = prep.validation.as_ref().map(|d| evaluate(&model, d)).transpose()?;
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        history,
        best_epoch,
        steps,
        seconds,
        final_test,
        final_validation,
    })
}

/// Sample mean and standard deviation (n − 1 denominator) of final test metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSummary {
    pub test_errors: Vec<f64>,
    pub test_maes: Vec<f64>,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_mae: f64,
    pub std_mae: f64,
    /// Set when only one run exists, so the standard deviation is reported as 0.
    pub degenerate: bool,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ReplicateSummary {
    pub fn from_runs(errors: Vec<f64>, maes: Vec<f64>) -> Self {
        let (mean_error, std_error) = mean_std(&errors);
        let (mean_mae, std_mae) = mean_std(&maes);
        ReplicateSummary {
            degenerate: errors.len() < 2,
            test_errors: errors,
            test_maes: maes,
            mean_error,
            std_error,
            mean_mae,
            std_mae,
        }
    }
}

/// The configuration of replicate `r`: the run seed is replaced by a seed
/// derived from it, so every replicate gets fresh labels, noise and init.
pub fn replicate_config(cfg: &TrainConfig, r: usize) -> TrainConfig {
    let mut c = cfg.clone();
    c.run.seed = derive_seed(cfg.run.seed, 1000 + r as u64);
    c
}

/// Trains `n_runs` replicates (stocks replicates also cycle through the fixed splits).
pub fn run_replicates(
    cfg: &TrainConfig,
    src: &Source,
    n_runs: usize,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(usize, &TrainOutcome),
) -> Result<ReplicateSummary> {
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    let mut errors = Vec::with_capacity(n_runs);
    let mut maes = Vec::with_capacity(n_runs);
    for r in 0..n_runs {
        let c = replicate_config(cfg, r);
        let prep = prepare(&c, src, r)?;
        let dir = out_dir.map(|d| d.join(format!("run{r:02}")));
        let out = train(&c, &prep, dir.as_deref(), &mut |_| {})?;
        let test = out
            .final_test
            .ok_or_else(|| Error::Dataset("replicates need a test set".into()))?;
        errors.push(test.error);
        maes.push(test.mae);
        progress(r, &out);
    }
    Ok(ReplicateSummary::from_runs(errors, maes))
}

/// One row of a label-budget × head sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub head: HeadKind,
    /// Label fraction, or `None` when the configured budget was used.
    pub fraction: Option<f64>,
    pub summary: ReplicateSummary,
}

pub fn run_grid(
    cfg: &TrainConfig,
    src: &Source,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&GridRow),
) -> Result<Vec<GridRow>> {
    let heads = if cfg.replicate.heads.is_empty() {
        vec![cfg.model.head]
    } else {
        cfg.replicate.heads.clone()
    };
    let fractions: Vec<Option<f64>> = if cfg.replicate.fractions.is_empty() {
        vec![None]
    } else {
        cfg.replicate.fractions.iter().copied().map(Some).collect()
    };
    let mut rows = Vec::new();
    for &head in &heads {
        for &fraction in &fractions {
            let mut c = cfg.clone();
            c.model.head = head;
            if let Some(f) = fraction {
                c.data.labeled = None;
                c.data.label_fraction = Some(f);
            }
            let dir = out_dir.map(|d| {
                d.join(match fraction {
                    Some(f) => format!("{}_{f}", head.name()),
                    None => head.name().to_string(),
                })
            });
            let summary = run_replicates(&c, src, cfg.replicate.n_runs, dir.as_deref(), &mut |_, _| {})?;
            let row = GridRow { head, fraction, summary };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub const SUMMARY_HEADER: &str = "head,fraction,n_runs,mean_error,std_error,mean_mae,std_mae,degenerate";

impl GridRow {
    pub fn csv_row(&self) -> String {
        let s = &self.summary;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.head.name(),
            self.fraction.map(|f| f.to_string()).unwrap_or_default(),
            s.test_errors.len(),
            s.mean_error,
            s.std_error,
            s.mean_mae,
            s.std_mae,
            s.degenerate
        )
    }
}
