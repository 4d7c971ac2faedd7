//! Multitask/multidomain training: per-domain thread sampling, summed
//! losses, Adam updates, early stopping on validation MACE, and the
//! serializable trained-model artifact.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocabulary, CorpusError, CorpusSplits, TaskRegistry, TaskSpec, Thread, Vocabulary, DEFAULT_MIN_COUNT};
use crate::diff::{adam_step, grad_check, AdamConfig, GradCheckReport, AdamState, DiffError, Gradients, ParamStore, Tape, Tensor, Var};
use crate::encoders::{thread_loss, Dims};
use crate::metrics::{accuracy, mace, MetricError, ThreadRecord};
use crate::model::{Model, ModelConfig, ModelError, StackKey};
use crate::reparam::Strategy;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Transfer setting: the jointly trained domains.
    pub domains: Vec<String>,
    pub dims: Dims,
    pub use_attention: bool,
    pub use_recurrence: bool,
    pub adam: AdamConfig,
    pub seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Add,
            domains: vec!["E".into(), "I".into(), "R".into()],
            dims: Dims::default(),
            use_attention: true,
            use_recurrence: true,
            adam: AdamConfig::default(),
            seed: 0,
            max_epochs: 50,
            patience: 2,
            min_count: DEFAULT_MIN_COUNT,
        }
    }
}

/// Parses a transfer setting such as `E+I+R` or `E,I`.
pub fn parse_domains(s: &str) -> Vec<String> {
    s.split(['+', ','])
        .map(str::trim)
        .filter(|d| !d.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("no training threads for active domain {0}")]
    EmptyTrainingSplit(String),
    #[error("task {task} belongs to domain {task_domain}, not {domain}")]
    TaskDomainMismatch { task: String, task_domain: String, domain: String },
    #[error("thread {thread} message {message} has no label for task {task}")]
    MissingLabel { thread: String, message: usize, task: String },
    #[error("no tasks for the active domains")]
    NoTasks,
    #[error("max_epochs and patience must be positive")]
    InvalidSchedule,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl TrainError {
    /// Whether the failure is numerical rather than a data or config problem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::Diff(DiffError::NonFinite { .. }) | TrainError::Model(ModelError::Diff(DiffError::NonFinite { .. }))
        )
    }
}

/// A thread as token ids plus per-task label ids; `labels[k]` is `None` for
/// tasks outside the thread's domain.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedThread {
    pub thread_id: String,
    pub domain: usize,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<Option<Vec<usize>>>,
}

/// Encodes threads for the model's tasks. Threads from inactive domains are
/// skipped.
pub fn encode_threads<'a>(
    threads: impl IntoIterator<Item = &'a Thread>,
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Result<Vec<EncodedThread>, TrainError> {
    let mut out = Vec::new();
    for t in threads {
        let Some(domain) = config.domains.iter().position(|d| *d == t.domain) else {
            continue;
        };
        let tokens = t.messages.iter().map(|m| vocab.encode_message(m)).collect();
        let labels = config
            .tasks
            .iter()
            .map(|task| {
                if task.domain != t.domain {
                    return Ok(None);
                }
                t.messages
                    .iter()
                    .enumerate()
                    .map(|(i, m)| {
                        m.labels.get(&task.task_id).and_then(|l| task.label_index(l)).ok_or_else(|| TrainError::MissingLabel {
                            thread: t.thread_id.clone(),
                            message: i,
                            task: task.task_id.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map(Some)
            })
            .collect::<Result<_, _>>()?;
        out.push(EncodedThread {
            thread_id: t.thread_id.clone(),
            domain,
            tokens,
            labels,
        });
    }
    Ok(out)
}

/// Sum over `tasks` of each task's length-normalized NLL on one thread.
/// Tasks sharing an encoder stack share one forward pass.
pub fn multitask_loss(tape: &mut Tape, model: &Model, thread: &EncodedThread, tasks: &[usize]) -> Result<Var, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let mut cache: BTreeMap<StackKey, Vec<Var>> = BTreeMap::new();
    let mut total: Option<Var> = None;
    for &k in tasks {
        let spec = model.config.tasks.get(k).ok_or(ModelError::UnknownTask(k))?;
        let domain = &model.config.domains[thread.domain];
        let labels = match thread.labels.get(k) {
            Some(Some(l)) if spec.domain == *domain => l,
            _ => {
                return Err(TrainError::TaskDomainMismatch {
                    task: spec.task_id.clone(),
                    task_domain: spec.domain.clone(),
                    domain: domain.clone(),
                })
            }
        };
        let key = model.stack_key(k)?;
        let es = match cache.get(&key) {
            Some(es) => es.clone(),
            None => {
                let es = model.thread_embeddings(tape, &thread.tokens, k)?;
                cache.insert(key, es.clone());
                es
            }
        };
        let head = model.head(tape, k)?;
        let loss = thread_loss(tape, &es, labels, &head)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    Ok(total.expect("nonempty tasks"))
}

/// Patience-based stopping on a lower-is-better score.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        let improved = self.best.is_none_or(|(_, b)| score < b);
        if improved {
            self.best = Some((epoch, score));
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        StopDecision {
            improved,
            stop: self.bad_epochs >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_step_loss: f64,
    pub train_mace: BTreeMap<String, f64>,
    pub valid_mace: BTreeMap<String, f64>,
    pub mean_valid_mace: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// `(domain, thread_id, multitask loss)` for each sampled thread.
    pub domain_losses: Vec<(String, String, f64)>,
    pub loss: f64,
}

/// Progress callbacks; both default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _step: &StepRecord) {}
    fn on_epoch(&mut self, _epoch: &EpochRecord) {}
}

impl TrainObserver for () {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub strategy: Strategy,
    pub dims: Dims,
    pub seed: u64,
    pub config: TrainConfig,
    pub tasks: Vec<TaskSpec>,
    pub vocabulary: Vocabulary,
    pub params: Vec<NamedArray>,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ArtifactError {
    #[error("unsupported artifact version {found}; expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corrupted parameter array {field}: shape {shape:?} needs {expected} values, found {found}")]
    Corrupted {
        field: String,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("duplicate parameter array {0}")]
    Duplicate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl TrainedModel {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            strategy: self.config.strategy,
            dims: self.config.dims,
            use_attention: self.config.use_attention,
            use_recurrence: self.config.use_recurrence,
            vocab_size: self.vocabulary.len(),
            domains: self.config.domains.clone(),
            tasks: self.tasks.clone(),
        }
    }

    /// Checks the version header and every array's length against its shape.
    pub fn validate(&self) -> Result<(), ArtifactError> {
        if self.format_version != FORMAT_VERSION {
            return Err(ArtifactError::Version {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        for a in &self.params {
            let expected: usize = a.shape.iter().product();
            if a.data.len() != expected {
                return Err(ArtifactError::Corrupted {
                    field: a.name.clone(),
                    shape: a.shape.clone(),
                    expected,
                    found: a.data.len(),
                });
            }
        }
        Ok(())
    }

    /// Rebuilds the frozen model.
    pub fn model(&self) -> Result<Model, ArtifactError> {
        self.validate()?;
        let mut store = ParamStore::new();
        for a in &self.params {
            let t = Tensor::new(a.shape.clone(), a.data.clone()).ok_or_else(|| ArtifactError::Corrupted {
                field: a.name.clone(),
                shape: a.shape.clone(),
                expected: a.shape.iter().product(),
                found: a.data.len(),
            })?;
            store.insert(a.name.clone(), t).map_err(|_| ArtifactError::Duplicate(a.name.clone()))?;
        }
        Ok(Model::from_params(self.model_config(), store)?)
    }
}

pub fn named_arrays(store: &ParamStore) -> Vec<NamedArray> {
    store
        .iter()
        .map(|(_, p)| NamedArray {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect()
}

/// Model configuration for a training run over `registry`'s tasks in the
/// active domains.
pub fn model_config_for(config: &TrainConfig, registry: &TaskRegistry, vocab_size: usize) -> Result<ModelConfig, TrainError> {
    let tasks: Vec<TaskSpec> = registry.restrict(&config.domains).tasks().to_vec();
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    Ok(ModelConfig {
        strategy: config.strategy,
        dims: config.dims,
        use_attention: config.use_attention,
        use_recurrence: config.use_recurrence,
        vocab_size,
        domains: config.domains.clone(),
        tasks,
    })
}

/// Builds the vocabulary from the active domains' training threads,
/// initializes a model and trains it.
pub fn train(corpus: &CorpusSplits, registry: &TaskRegistry, config: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainedModel, TrainError> {
    for d in &config.domains {
        if corpus.domain(d).is_none_or(|s| s.train.is_empty()) {
            return Err(TrainError::EmptyTrainingSplit(d.clone()));
        }
    }
    let train_threads = config.domains.iter().flat_map(|d| corpus.domains[d].train.iter());
    let vocab = build_vocabulary(train_threads, config.min_count)?;
    let mconfig = model_config_for(config, registry, vocab.len())?;
    let model = Model::new(mconfig, config.seed)?;
    train_from(model, vocab, corpus, config, observer)
}

/// Training loop from an already initialized model.
pub fn train_from(
    mut model: Model,
    vocab: Vocabulary,
    corpus: &CorpusSplits,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedModel, TrainError> {
    if config.max_epochs == 0 || config.patience == 0 {
        return Err(TrainError::InvalidSchedule);
    }
    let mc = model.config.clone();
    let mut train_sets = Vec::with_capacity(mc.domains.len());
    let mut valid_sets = Vec::with_capacity(mc.domains.len());
    for d in &mc.domains {
        let s = corpus.domain(d).filter(|s| !s.train.is_empty()).ok_or_else(|| TrainError::EmptyTrainingSplit(d.clone()))?;
        train_sets.push(encode_threads(&s.train, &vocab, &mc)?);
        valid_sets.push(encode_threads(&s.valid, &vocab, &mc)?);
    }
    let domain_tasks: Vec<Vec<usize>> = (0..mc.domains.len())
        .map(|d| (0..mc.tasks.len()).filter(|&k| mc.task_domain(k) == Some(d)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut orders: Vec<Vec<usize>> = train_sets.iter().map(|s| (0..s.len()).collect()).collect();
    for o in &mut orders {
        o.shuffle(&mut rng);
    }
    let mut cursors = vec![0usize; orders.len()];
    let steps_per_epoch = train_sets.iter().map(Vec::len).max().unwrap_or(0);

    let mut adam = AdamState::new(&model.params, config.adam);
    let mut grads = Gradients::for_store(&model.params);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_params = model.params.clone();
    let mut trace = Vec::new();

    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        for step in 0..steps_per_epoch {
            let mut tape = Tape::new();
            let mut total: Option<Var> = None;
            let mut parts = Vec::with_capacity(train_sets.len());
            for d in 0..train_sets.len() {
                if domain_tasks[d].is_empty() {
                    continue;
                }
                if cursors[d] == orders[d].len() {
                    orders[d].shuffle(&mut rng);
                    cursors[d] = 0;
                }
                let thread = &train_sets[d][orders[d][cursors[d]]];
                cursors[d] += 1;
                let loss = multitask_loss(&mut tape, &model, thread, &domain_tasks[d])?;
                parts.push((mc.domains[d].clone(), thread.thread_id.clone(), tape.value(loss).data()[0]));
                total = Some(match total {
                    Some(t) => tape.add(t, loss)?,
                    None => loss,
                });
            }
            let Some(total) = total else { break };
            tape.backward(total)?;
            grads.zero();
            tape.param_grads(&mut grads);
            adam_step(&mut model.params, &mut grads, &mut adam)?;
            let loss = tape.value(total).data()[0];
            loss_sum += loss;
            observer.on_step(&StepRecord {
                epoch,
                step,
                domain_losses: parts,
                loss,
            });
        }

        let train_mace = task_maces(&model, &train_sets)?;
        let valid_mace = task_maces(&model, &valid_sets)?;
        let mean_valid_mace = if valid_mace.is_empty() {
            train_mace.values().sum::<f64>() / train_mace.len().max(1) as f64
        } else {
            valid_mace.values().sum::<f64>() / valid_mace.len() as f64
        };
        let record = EpochRecord {
            epoch,
            steps: steps_per_epoch,
            mean_step_loss: loss_sum / steps_per_epoch.max(1) as f64,
            train_mace,
            valid_mace,
            mean_valid_mace,
        };
        observer.on_epoch(&record);
        trace.push(record);
        let decision = stopper.observe(epoch, mean_valid_mace);
        if decision.improved {
            best_params = model.params.clone();
        }
        if decision.stop {
            break;
        }
    }

    let best_epoch = stopper.best().map_or(0, |(e, _)| e);
    Ok(TrainedModel {
        format_version: FORMAT_VERSION,
        strategy: mc.strategy,
        dims: mc.dims,
        seed: config.seed,
        config: config.clone(),
        tasks: mc.tasks.clone(),
        vocabulary: vocab,
        params: named_arrays(&best_params),
        trace,
        best_epoch,
    })
}

/// Prediction records per task over the encoded threads that carry labels
/// for it.
pub fn task_records(model: &Model, threads: &[EncodedThread]) -> Result<Vec<Vec<ThreadRecord>>, TrainError> {
    let mut out = vec![Vec::new(); model.n_tasks()];
    for t in threads {
        for (k, labels) in t.labels.iter().enumerate() {
            if let Some(labels) = labels {
                out[k].push(ThreadRecord {
                    probs: model.predict(&t.tokens, k)?,
                    truth: labels.clone(),
                });
            }
        }
    }
    Ok(out)
}

fn task_maces(model: &Model, sets: &[Vec<EncodedThread>]) -> Result<BTreeMap<String, f64>, TrainError> {
    let all: Vec<EncodedThread> = sets.iter().flatten().cloned().collect();
    let records = task_records(model, &all)?;
    let mut out = BTreeMap::new();
    for (k, recs) in records.iter().enumerate() {
        if !recs.is_empty() {
            out.insert(model.config.tasks[k].task_id.clone(), mace(recs)?.value);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub mace: f64,
    pub accuracy: f64,
    pub n_threads: usize,
    pub n_messages: usize,
    pub clamped: usize,
}

/// MACE and accuracy for every task with at least one labelled thread.
pub fn evaluate<'a>(trained: &TrainedModel, threads: impl IntoIterator<Item = &'a Thread>) -> Result<BTreeMap<String, TaskEval>, TrainError> {
    let model = trained.model().map_err(|e| match e {
        ArtifactError::Model(m) => TrainError::Model(m),
        other => TrainError::Model(ModelError::Config(other.to_string())),
    })?;
    evaluate_model(&model, &trained.vocabulary, threads)
}

pub fn evaluate_model<'a>(model: &Model, vocab: &Vocabulary, threads: impl IntoIterator<Item = &'a Thread>) -> Result<BTreeMap<String, TaskEval>, TrainError> {
    let encoded = encode_threads(threads, vocab, &model.config)?;
    let records = task_records(model, &encoded)?;
    let mut out = BTreeMap::new();
    for (k, recs) in records.iter().enumerate() {
        if recs.is_empty() {
            continue;
        }
        let m = mace(recs)?;
        out.insert(
            model.config.tasks[k].task_id.clone(),
            TaskEval {
                mace: m.value,
                accuracy: accuracy(recs)?,
                n_threads: recs.len(),
                n_messages: recs.iter().map(|r| r.truth.len()).sum(),
                clamped: m.clamped,
            },
        );
    }
    Ok(out)
}

/// Human-readable table of per-task MACE and accuracy.
pub fn format_eval_table(strategy: Strategy, report: &BTreeMap<String, TaskEval>) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<10}", "strategy"));
    for task in report.keys() {
        out.push_str(&format!(" | {:>8} {:>6}", format!("{task} MACE"), "Acc"));
    }
    out.push_str(" | avg MACE\n");
    out.push_str(&format!("{:<10}", strategy.name()));
    for e in report.values() {
        out.push_str(&format!(" | {:>8.4} {:>6.2}", e.mace, e.accuracy));
    }
    let avg = report.values().map(|e| e.mace).sum::<f64>() / report.len().max(1) as f64;
    out.push_str(&format!(" | {avg:.4}\n"));
    out
}

/// Micro model for gradient checking: two domains (`E` with two binary
/// tasks, `I` with one), random parameters in ±0.3 and one random thread
/// per domain. The loss is the summed multitask loss over both threads.
pub fn micro_setup(strategy: Strategy, vocab_size: usize, dim: usize, task_dim: usize, seed: u64) -> Result<(Model, Vec<EncodedThread>), TrainError> {
    use rand::Rng;
    let config = ModelConfig {
        strategy,
        dims: Dims::uniform(dim, task_dim),
        use_attention: true,
        use_recurrence: true,
        vocab_size,
        domains: vec!["E".into(), "I".into()],
        tasks: vec![TaskSpec::binary("E-T", "E"), TaskSpec::binary("E-A", "E"), TaskSpec::binary("I-T", "I")],
    };
    let mut model = Model::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.value_mut(id).data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let mut threads = Vec::new();
    for (domain, tasks) in [(0usize, [Some(()), Some(()), None]), (1, [None, None, Some(())])] {
        let n_msgs = 3;
        let tokens: Vec<Vec<usize>> = (0..n_msgs)
            .map(|_| (0..rng.random_range(2..5)).map(|_| rng.random_range(0..vocab_size)).collect())
            .collect();
        let labels = tasks
            .iter()
            .map(|t| t.map(|_| (0..n_msgs).map(|_| rng.random_range(0..2)).collect()))
            .collect();
        threads.push(EncodedThread {
            thread_id: format!("micro-{domain}"),
            domain,
            tokens,
            labels,
        });
    }
    Ok((model, threads))
}

/// Summed multitask loss over `threads` and its parameter gradients.
pub fn loss_and_gradients(model: &Model, threads: &[EncodedThread]) -> Result<(f64, Gradients), TrainError> {
    let mut tape = Tape::new();
    let mut total: Option<Var> = None;
    for t in threads {
        let tasks: Vec<usize> = (0..model.n_tasks()).filter(|&k| t.labels[k].is_some()).collect();
        let l = multitask_loss(&mut tape, model, t, &tasks)?;
        total = Some(match total {
            Some(x) => tape.add(x, l)?,
            None => l,
        });
    }
    let total = total.ok_or(TrainError::NoTasks)?;
    tape.backward(total)?;
    let mut grads = Gradients::for_store(&model.params);
    tape.param_grads(&mut grads);
    Ok((tape.value(total).data()[0], grads))
}

/// Central-difference check of every parameter group of a micro model.
pub fn micro_grad_check(strategy: Strategy, vocab_size: usize, dim: usize, task_dim: usize, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport, TrainError> {
    let (model, threads) = micro_setup(strategy, vocab_size, dim, task_dim, seed)?;
    let config = model.config.clone();
    let loss = |store: &ParamStore| -> Result<(f64, Gradients), DiffError> {
        let m = Model::from_params(config.clone(), store.clone()).map_err(|e| match e {
            ModelError::Diff(d) => d,
            _ => DiffError::Empty("micro model"),
        })?;
        loss_and_gradients(&m, &threads).map_err(|e| match e {
            TrainError::Diff(d) | TrainError::Model(ModelError::Diff(d)) => d,
            _ => DiffError::Empty("micro loss"),
        })
    };
    Ok(grad_check(loss, &model.params, h, tol)?)
}
