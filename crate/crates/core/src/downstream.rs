//! Frozen-embedding classification: per-message features from a trained
//! model, L2-regularized multinomial logistic regression, and nested
//! cross-validation over thread-wise splits.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{seeded_hash, Thread, Vocabulary};
use crate::metrics::{argmax, f1_score, paired_t_test, F1Average, MetricError};
use crate::model::{Model, ModelError};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum DownstreamError {
    #[error("need at least two classes, found {0}")]
    SingleClass(usize),
    #[error("no examples")]
    Empty,
    #[error("feature dimension {found} differs from {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("{0} labels for {1} examples")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("regularization strength must be positive, got {0}")]
    InvalidC(f64),
    #[error("invalid cross-validation config: {0}")]
    Config(String),
    #[error("could not draw a split with two training classes after {0} attempts")]
    Resample(usize),
    #[error("no domain {0} task in the model")]
    NoTaskForDomain(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedExample {
    pub thread_id: String,
    pub index: usize,
    pub features: Vec<f64>,
    pub label: String,
}

/// Index of the first task of `domain`; its encoder stack supplies the
/// features.
pub fn embedding_task(model: &Model, domain: &str) -> Result<usize, DownstreamError> {
    model
        .config
        .tasks
        .iter()
        .position(|t| t.domain == domain)
        .ok_or_else(|| DownstreamError::NoTaskForDomain(domain.into()))
}

/// Per-message thread embeddings from the frozen model, for messages that
/// carry a `label_key` label. Unknown tokens map to `<unk>`.
pub fn embed_corpus<'a>(
    model: &Model,
    vocab: &Vocabulary,
    threads: impl IntoIterator<Item = &'a Thread>,
    task: usize,
    label_key: &str,
) -> Result<Vec<EmbeddedExample>, DownstreamError> {
    let mut out = Vec::new();
    for t in threads {
        if !t.messages.iter().any(|m| m.label_for(label_key).is_some()) {
            continue;
        }
        let tokens: Vec<Vec<usize>> = t.messages.iter().map(|m| vocab.encode_message(m)).collect();
        let es = model.embed(&tokens, task)?;
        for (i, (m, e)) in t.messages.iter().zip(es).enumerate() {
            if let Some(label) = m.label_for(label_key) {
                out.push(EmbeddedExample {
                    thread_id: t.thread_id.clone(),
                    index: i,
                    features: e,
                    label: label.into(),
                });
            }
        }
    }
    Ok(out)
}

/// Multinomial logistic regression over the classes seen in training; row
/// `r` of `weights` holds `classes[r]`'s feature weights followed by its
/// bias. Unseen classes get probability zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub n_classes: usize,
    pub classes: Vec<usize>,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

pub const LOGISTIC_TOL: f64 = 1e-6;
pub const LOGISTIC_MAX_ITER: usize = 5000;

impl LogisticModel {
    fn row(&self, class: usize) -> Option<&[f64]> {
        let r = self.classes.iter().position(|&c| c == class)?;
        Some(&self.weights[r * (self.dim + 1)..(r + 1) * (self.dim + 1)])
    }

    /// Weight of `feature` for `class`; zero for unseen classes.
    pub fn weight(&self, class: usize, feature: usize) -> f64 {
        self.row(class).map_or(0.0, |r| r[feature])
    }

    pub fn bias(&self, class: usize) -> f64 {
        self.row(class).map_or(0.0, |r| r[self.dim])
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.n_classes];
        for (c, z) in self.classes.iter().zip(logits_of(&self.weights, self.classes.len(), self.dim, x)) {
            out[*c] = z;
        }
        out
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.logits(x);
        let lse = log_sum_exp(&z);
        z.iter_mut().for_each(|v| *v = libm::exp(*v - lse));
        z
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

fn logits_of(w: &[f64], k: usize, d: usize, x: &[f64]) -> Vec<f64> {
    (0..k)
        .map(|c| {
            let row = &w[c * (d + 1)..(c + 1) * (d + 1)];
            row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[d]
        })
        .collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(z.iter().map(|v| libm::exp(v - m)).sum::<f64>())
}

/// Objective `sum_i NLL_i + ||W||^2 / (2C)` (biases unpenalized) and its
/// gradient.
fn objective(w: &[f64], x: &[Vec<f64>], y: &[usize], k: usize, d: usize, c: f64, mut grad: Option<&mut [f64]>) -> f64 {
    let mut f = 0.0;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut z = vec![0.0; k];
    for (xi, &yi) in x.iter().zip(y) {
        for (cls, zc) in z.iter_mut().enumerate() {
            let row = &w[cls * (d + 1)..(cls + 1) * (d + 1)];
            *zc = row[..d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + row[d];
        }
        let lse = log_sum_exp(&z);
        f += lse - z[yi];
        if let Some(g) = grad.as_deref_mut() {
            for cls in 0..k {
                let p = libm::exp(z[cls] - lse) - f64::from(u8::from(cls == yi));
                let row = &mut g[cls * (d + 1)..(cls + 1) * (d + 1)];
                for (gj, xj) in row[..d].iter_mut().zip(xi) {
                    *gj += p * xj;
                }
                row[d] += p;
            }
        }
    }
    let lambda = 1.0 / (2.0 * c);
    for cls in 0..k {
        for j in 0..d {
            let wv = w[cls * (d + 1) + j];
            f += lambda * wv * wv;
            if let Some(g) = grad.as_deref_mut() {
                g[cls * (d + 1) + j] += 2.0 * lambda * wv;
            }
        }
    }
    f
}

/// Full-batch gradient descent from zero with backtracking line search.
/// The trial step is the Barzilai-Borwein step from the previous iterate
/// and halves until the sufficient-decrease condition holds.
pub fn logistic_fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, c: f64) -> Result<LogisticModel, DownstreamError> {
    if !c.is_finite() || c <= 0.0 {
        return Err(DownstreamError::InvalidC(c));
    }
    if x.is_empty() {
        return Err(DownstreamError::Empty);
    }
    if x.len() != y.len() {
        return Err(DownstreamError::LengthMismatch(y.len(), x.len()));
    }
    let d = x[0].len();
    for xi in x {
        if xi.len() != d {
            return Err(DownstreamError::Dimension { expected: d, found: xi.len() });
        }
    }
    let mut present = BTreeSet::new();
    for &yi in y {
        if yi >= n_classes {
            return Err(DownstreamError::LabelOutOfRange { label: yi, n_classes });
        }
        present.insert(yi);
    }
    if present.len() < 2 {
        return Err(DownstreamError::SingleClass(present.len()));
    }
    let classes: Vec<usize> = present.into_iter().collect();
    let compact: Vec<usize> = y.iter().map(|yi| classes.binary_search(yi).expect("present")).collect();
    let y = compact.as_slice();
    let k = classes.len();
    let n = k * (d + 1);
    let mut w = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut g_prev = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut f = objective(&w, x, y, k, d, c, Some(&mut g));
    let mut step = 1.0 / x.len() as f64;
    let mut iterations = 0;
    let mut gnorm = norm(&g);
    while iterations < LOGISTIC_MAX_ITER && gnorm >= LOGISTIC_TOL {
        let g2 = gnorm * gnorm;
        let mut accepted = false;
        for _ in 0..60 {
            for ((t, wv), gv) in trial.iter_mut().zip(&w).zip(&g) {
                *t = wv - step * gv;
            }
            let ft = objective(&trial, x, y, k, d, c, None);
            if ft <= f - 0.5 * step * g2 {
                accepted = true;
                break;
            }
            // once the decrease is below rounding of f, accept any step that shrinks the gradient
            if ft - f <= 1e-13 * libm::fabs(f).max(1.0) {
                objective(&trial, x, y, k, d, c, Some(&mut g_trial));
                if norm(&g_trial) < gnorm {
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        core::mem::swap(&mut w, &mut trial);
        g_prev.copy_from_slice(&g);
        f = objective(&w, x, y, k, d, c, Some(&mut g));
        gnorm = norm(&g);
        iterations += 1;
        let (mut ss, mut sy, mut yy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let si = w[i] - trial[i];
            let yi = g[i] - g_prev[i];
            ss += si * si;
            sy += si * yi;
            yy += yi * yi;
        }
        step = if sy > 0.0 { if iterations % 2 == 0 { ss / sy } else { sy / yy } } else { step * 2.0 };
    }
    Ok(LogisticModel {
        n_classes,
        classes,
        dim: d,
        weights: w,
        iterations,
        grad_norm: gnorm,
    })
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NestedCvConfig {
    pub n_outer: usize,
    /// Fraction of threads in the outer train+dev side.
    pub train_ratio: f64,
    pub inner_folds: usize,
    pub c_grid: Vec<f64>,
    pub average: F1Average,
    pub seed: u64,
}

impl Default for NestedCvConfig {
    fn default() -> Self {
        Self {
            n_outer: 120,
            train_ratio: 0.67,
            inner_folds: 7,
            c_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            average: F1Average::Macro,
            seed: 0,
        }
    }
}

impl NestedCvConfig {
    pub fn validate(&self) -> Result<(), DownstreamError> {
        if self.n_outer == 0 {
            return Err(DownstreamError::Config("n_outer must be positive".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(DownstreamError::Config("train_ratio must be in (0, 1)".into()));
        }
        if self.inner_folds < 2 {
            return Err(DownstreamError::Config("need at least two inner folds".into()));
        }
        if self.c_grid.is_empty() {
            return Err(DownstreamError::Config("empty C grid".into()));
        }
        for &c in &self.c_grid {
            if !c.is_finite() || c <= 0.0 {
                return Err(DownstreamError::InvalidC(c));
            }
        }
        Ok(())
    }
}

/// Examples shared by every system: thread membership and label ids.
#[derive(Clone, Debug, PartialEq)]
pub struct CvData {
    pub thread_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
}

impl CvData {
    /// Label ids follow the sorted order of the label strings.
    pub fn from_examples(examples: &[EmbeddedExample]) -> Self {
        let names: BTreeSet<&str> = examples.iter().map(|e| e.label.as_str()).collect();
        let label_names: Vec<String> = names.into_iter().map(String::from).collect();
        let labels = examples
            .iter()
            .map(|e| label_names.binary_search(&e.label).expect("label collected"))
            .collect();
        Self {
            thread_ids: examples.iter().map(|e| e.thread_id.clone()).collect(),
            labels,
            label_names,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    fn unique_threads(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.thread_ids.iter().collect();
        set.into_iter().cloned().collect()
    }
}

/// One transfer setting's features for every example.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub setting: String,
    pub features: Vec<Vec<f64>>,
}

/// A compared system: its candidate feature sets are part of the
/// hyperparameter search.
#[derive(Clone, Debug, PartialEq)]
pub struct System {
    pub name: String,
    pub candidates: Vec<FeatureSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterSplit {
    pub index: usize,
    pub train_threads: Vec<String>,
    pub test_threads: Vec<String>,
    /// Redraws needed to get at least two classes on the training side.
    pub resamples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub setting: String,
    pub c: f64,
    pub inner_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: OuterSplit,
    pub selections: Vec<Selection>,
    pub test_f1: Vec<f64>,
    pub inner_resamples: usize,
}

const MAX_RESAMPLES: usize = 100;

fn split_rng(seed: u64, split: usize, sub: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seeded_hash(seed, &format!("outer/{split}/{sub}")))
}

fn classes_in(data: &CvData, idx: &[usize]) -> usize {
    idx.iter().map(|&i| data.labels[i]).collect::<BTreeSet<_>>().len()
}

fn examples_of(data: &CvData, threads: &BTreeSet<&str>) -> Vec<usize> {
    (0..data.labels.len()).filter(|&i| threads.contains(data.thread_ids[i].as_str())).collect()
}

/// Thread-wise outer split `index`: a seeded shuffle of the sorted thread
/// ids, the first `train_ratio` share going to train+dev.
pub fn outer_split(data: &CvData, cfg: &NestedCvConfig, index: usize) -> Result<OuterSplit, DownstreamError> {
    let threads = data.unique_threads();
    if threads.len() < 2 {
        return Err(DownstreamError::Empty);
    }
    let n_train = (libm::round(threads.len() as f64 * cfg.train_ratio) as usize).clamp(1, threads.len() - 1);
    for sub in 0..MAX_RESAMPLES {
        let mut order = threads.clone();
        order.shuffle(&mut split_rng(cfg.seed, index, sub));
        let (train, test) = order.split_at(n_train);
        let train_set: BTreeSet<&str> = train.iter().map(String::as_str).collect();
        if classes_in(data, &examples_of(data, &train_set)) >= 2 {
            let mut train = train.to_vec();
            let mut test = test.to_vec();
            train.sort();
            test.sort();
            return Ok(OuterSplit {
                index,
                train_threads: train,
                test_threads: test,
                resamples: sub,
            });
        }
    }
    Err(DownstreamError::Resample(MAX_RESAMPLES))
}

fn gather(features: &[Vec<f64>], labels: &[usize], idx: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    (idx.iter().map(|&i| features[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
}

fn fit_and_score(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    train: &[usize],
    test: &[usize],
    c: f64,
    average: F1Average,
) -> Result<f64, DownstreamError> {
    let (xt, yt) = gather(features, labels, train);
    let model = logistic_fit(&xt, &yt, n_classes, c)?;
    let pred: Vec<usize> = test.iter().map(|&i| model.predict(&features[i])).collect();
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    Ok(f1_score(&pred, &truth, average)?)
}

/// Thread-wise inner folds over the train+dev threads; every training side
/// must hold two classes, otherwise the assignment is redrawn.
fn inner_folds(data: &CvData, train_threads: &[String], cfg: &NestedCvConfig, split: usize) -> Result<(Vec<(Vec<usize>, Vec<usize>)>, usize), DownstreamError> {
    let k = cfg.inner_folds.min(train_threads.len());
    if k < 2 {
        return Err(DownstreamError::Config("too few threads for inner cross-validation".into()));
    }
    for sub in 0..MAX_RESAMPLES {
        let mut order = train_threads.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seeded_hash(cfg.seed, &format!("inner/{split}/{sub}")));
        order.shuffle(&mut rng);
        let fold_of: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, t)| (t.as_str(), i % k)).collect();
        let mut folds = Vec::with_capacity(k);
        let mut ok = true;
        for f in 0..k {
            let mut tr = Vec::new();
            let mut te = Vec::new();
            for i in 0..data.labels.len() {
                match fold_of.get(data.thread_ids[i].as_str()) {
                    Some(&g) if g == f => te.push(i),
                    Some(_) => tr.push(i),
                    None => {}
                }
            }
            if classes_in(data, &tr) < 2 || te.is_empty() {
                ok = false;
                break;
            }
            folds.push((tr, te));
        }
        if ok {
            return Ok((folds, sub));
        }
    }
    Err(DownstreamError::Resample(MAX_RESAMPLES))
}

/// Runs one outer split for every system: inner selection of (setting, C)
/// on train+dev, then a refit scored on the outer test side.
pub fn run_outer_split(data: &CvData, systems: &[System], cfg: &NestedCvConfig, index: usize) -> Result<SplitResult, DownstreamError> {
    let split = outer_split(data, cfg, index)?;
    let train_set: BTreeSet<&str> = split.train_threads.iter().map(String::as_str).collect();
    let test_set: BTreeSet<&str> = split.test_threads.iter().map(String::as_str).collect();
    let train_idx = examples_of(data, &train_set);
    let test_idx = examples_of(data, &test_set);
    let (folds, inner_resamples) = inner_folds(data, &split.train_threads, cfg, index)?;
    let n_classes = data.n_classes();

    let mut selections = Vec::with_capacity(systems.len());
    let mut test_f1 = Vec::with_capacity(systems.len());
    for system in systems {
        let mut best: Option<(f64, f64, usize)> = None;
        for (ci, cand) in system.candidates.iter().enumerate() {
            if cand.features.len() != data.labels.len() {
                return Err(DownstreamError::LengthMismatch(data.labels.len(), cand.features.len()));
            }
            for &c in &cfg.c_grid {
                let mut total = 0.0;
                for (tr, te) in &folds {
                    total += fit_and_score(&cand.features, &data.labels, n_classes, tr, te, c, cfg.average)?;
                }
                let score = total / folds.len() as f64;
                let better = match best {
                    None => true,
                    Some((bs, bc, _)) => score > bs || (score == bs && c < bc),
                };
                if better {
                    best = Some((score, c, ci));
                }
            }
        }
        let (score, c, ci) = best.ok_or_else(|| DownstreamError::Config(format!("system {} has no candidates", system.name)))?;
        let cand = &system.candidates[ci];
        test_f1.push(fit_and_score(&cand.features, &data.labels, n_classes, &train_idx, &test_idx, c, cfg.average)?);
        selections.push(Selection {
            setting: cand.setting.clone(),
            c,
            inner_f1: score,
        });
    }
    Ok(SplitResult {
        split,
        selections,
        test_f1,
        inner_resamples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub mean_f1: f64,
    pub f1_per_split: Vec<f64>,
    /// Counts of `setting@C` selections across outer splits.
    pub chosen_hyperparams: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub p_value: f64,
    pub t: f64,
    pub degenerate_variance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestedCvReport {
    pub config: NestedCvConfig,
    pub systems: BTreeMap<String, SystemReport>,
    /// `p_values[a][b]` for every ordered pair of distinct systems.
    pub p_values: BTreeMap<String, BTreeMap<String, PairwiseTest>>,
    pub outer_resamples: usize,
    pub inner_resamples: usize,
}

/// Combines split results, sorted by split index so the outcome does not
/// depend on completion order.
pub fn aggregate(systems: &[System], cfg: &NestedCvConfig, mut results: Vec<SplitResult>) -> Result<NestedCvReport, DownstreamError> {
    results.sort_by_key(|r| r.split.index);
    let mut reports = BTreeMap::new();
    let mut per_system = Vec::with_capacity(systems.len());
    for (s, system) in systems.iter().enumerate() {
        let f1: Vec<f64> = results.iter().map(|r| r.test_f1[s]).collect();
        let mut hist = BTreeMap::new();
        for r in &results {
            let sel = &r.selections[s];
            *hist.entry(format!("{}@{}", sel.setting, sel.c)).or_insert(0) += 1;
        }
        let mean = f1.iter().sum::<f64>() / f1.len().max(1) as f64;
        per_system.push(f1.clone());
        reports.insert(
            system.name.clone(),
            SystemReport {
                mean_f1: mean,
                f1_per_split: f1,
                chosen_hyperparams: hist,
            },
        );
    }
    let mut p_values: BTreeMap<String, BTreeMap<String, PairwiseTest>> = BTreeMap::new();
    if results.len() >= 2 {
        for (a, sa) in systems.iter().enumerate() {
            for (b, sb) in systems.iter().enumerate() {
                if a == b {
                    continue;
                }
                let t = paired_t_test(&per_system[a], &per_system[b])?;
                p_values.entry(sa.name.clone()).or_default().insert(
                    sb.name.clone(),
                    PairwiseTest {
                        p_value: t.p_value,
                        t: t.t,
                        degenerate_variance: t.degenerate_variance,
                    },
                );
            }
        }
    }
    Ok(NestedCvReport {
        config: cfg.clone(),
        systems: reports,
        p_values,
        outer_resamples: results.iter().map(|r| r.split.resamples).sum(),
        inner_resamples: results.iter().map(|r| r.inner_resamples).sum(),
    })
}

/// Sequential nested cross-validation over all outer splits.
pub fn nested_cv(data: &CvData, systems: &[System], cfg: &NestedCvConfig) -> Result<NestedCvReport, DownstreamError> {
    check_inputs(data, systems, cfg)?;
    let results = (0..cfg.n_outer)
        .map(|i| run_outer_split(data, systems, cfg, i))
        .collect::<Result<Vec<_>, _>>()?;
    aggregate(systems, cfg, results)
}

/// Validates the config and that every feature set covers every example
/// with one constant dimension.
pub fn check_inputs(data: &CvData, systems: &[System], cfg: &NestedCvConfig) -> Result<(), DownstreamError> {
    cfg.validate()?;
    if data.labels.is_empty() {
        return Err(DownstreamError::Empty);
    }
    if data.thread_ids.len() != data.labels.len() {
        return Err(DownstreamError::LengthMismatch(data.labels.len(), data.thread_ids.len()));
    }
    if data.n_classes() < 2 {
        return Err(DownstreamError::SingleClass(data.n_classes()));
    }
    for s in systems {
        if s.candidates.is_empty() {
            return Err(DownstreamError::Config(format!("system {} has no candidates", s.name)));
        }
        for c in &s.candidates {
            if c.features.len() != data.labels.len() {
                return Err(DownstreamError::LengthMismatch(data.labels.len(), c.features.len()));
            }
            let d = c.features[0].len();
            if let Some(bad) = c.features.iter().find(|f| f.len() != d) {
                return Err(DownstreamError::Dimension { expected: d, found: bad.len() });
            }
        }
    }
    Ok(())
}

/// Text table of mean F1 per system and the pairwise p-values.
pub fn format_report(report: &NestedCvReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<24} {:>8}  chosen\n", "system", "F1"));
    for (name, s) in &report.systems {
        let top = s
            .chosen_hyperparams
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(k, v)| format!("{k} ({v}/{})", s.f1_per_split.len()))
            .unwrap_or_default();
        out.push_str(&format!("{:<24} {:>8.2}  {}\n", name, s.mean_f1, top));
    }
    if !report.p_values.is_empty() {
        out.push_str("\npaired t-test p-values\n");
        for (a, row) in &report.p_values {
            for (b, t) in row {
                if a < b {
                    out.push_str(&format!("{a} vs {b}: p = {:.4}\n", t.p_value));
                }
            }
        }
    }
    out
}
