//! One function per subcommand. Each writes only inside its `out` directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use threadweave_core::corpus::{assign_splits, cohens_kappa, ActionLabel, CorpusSplits, Split, TaskRegistry};
use threadweave_core::diff::GradCheckReport;
use threadweave_core::downstream::{
    aggregate, check_inputs, embed_corpus, embedding_task, format_report, run_outer_split, CvData, EmbeddedExample, FeatureSet,
    NestedCvConfig, NestedCvReport, SplitResult, System,
};
use threadweave_core::reparam::Strategy;
use threadweave_core::synthgen::{generate, label_distribution};
use threadweave_core::trainer::{
    evaluate, format_eval_table, micro_grad_check, train as train_model, EpochRecord, TaskEval, TrainConfig, TrainObserver, TrainedModel,
};

use crate::config::{Echo, RunConfig};
use crate::error::{Error, Result};
use crate::io;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const EVAL_TABLE_FILE: &str = "eval.txt";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const FEATURES_FILE: &str = "features.jsonl";
pub const DOWNSTREAM_FILE: &str = "downstream.json";
pub const DOWNSTREAM_TABLE_FILE: &str = "downstream.txt";
pub const AGREEMENT_FILE: &str = "agreement.json";

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn registry_or_standard(tasks: Option<&Path>) -> Result<TaskRegistry> {
    match tasks {
        Some(p) => io::read_registry(p),
        None => Ok(TaskRegistry::standard()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub echo: Echo<RunConfig>,
    pub n_threads: BTreeMap<String, usize>,
    pub label_distribution: BTreeMap<String, BTreeMap<String, usize>>,
    pub forced_termination: Vec<String>,
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<SynthManifest> {
    prepare_out(out)?;
    let corpus = generate(&cfg.synth)?;
    let mut n_threads = BTreeMap::new();
    for t in &corpus.threads {
        *n_threads.entry(t.domain.clone()).or_insert(0) += 1;
    }
    let manifest = SynthManifest {
        echo: Echo {
            command: "synth".into(),
            seed: cfg.synth.seed,
            config: cfg.clone(),
        },
        n_threads,
        label_distribution: label_distribution(&corpus.threads),
        forced_termination: corpus.forced_termination,
    };
    io::write_jsonl(&out.join(CORPUS_FILE), &corpus.threads)?;
    io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    log::info!("wrote {} threads to {}", corpus.threads.len(), out.display());
    Ok(manifest)
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLogLine {
    #[serde(flatten)]
    pub record: EpochRecord,
    pub wall_ms: u64,
}

struct EpochLogger {
    start: Instant,
    lines: Vec<EpochLogLine>,
}

impl TrainObserver for EpochLogger {
    fn on_epoch(&mut self, epoch: &EpochRecord) {
        log::info!("epoch {} mean valid MACE {:.4}", epoch.epoch, epoch.mean_valid_mace);
        self.lines.push(EpochLogLine {
            record: epoch.clone(),
            wall_ms: self.start.elapsed().as_millis() as u64,
        });
    }
}

pub fn train_on(corpus: &CorpusSplits, registry: &TaskRegistry, config: &TrainConfig, out: &Path) -> Result<TrainedModel> {
    prepare_out(out)?;
    let mut logger = EpochLogger {
        start: Instant::now(),
        lines: Vec::new(),
    };
    let model = train_model(corpus, registry, config, &mut logger)?;
    io::write_jsonl(&out.join(EPOCH_LOG_FILE), &logger.lines)?;
    io::save_model(&out.join(MODEL_FILE), &model)?;
    log::info!("best epoch {} of {}", model.best_epoch, model.trace.len());
    Ok(model)
}

pub fn train(cfg: &RunConfig, corpus: &Path, tasks: Option<&Path>, out: &Path) -> Result<TrainedModel> {
    let registry = registry_or_standard(tasks)?;
    let splits = io::load_corpus(corpus, &registry, cfg.train.seed)?;
    train_on(&splits, &registry, &cfg.train, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub echo: Echo<TrainConfig>,
    pub split: Split,
    pub tasks: BTreeMap<String, TaskEval>,
}

/// Scores a model on one split of its own domains. Splits are drawn with
/// the model's seed so they coincide with training.
pub fn eval(model_path: &Path, corpus: &Path, tasks: Option<&Path>, split: Split, out: &Path) -> Result<EvalReport> {
    prepare_out(out)?;
    let model = io::load_model(model_path)?;
    let registry = match tasks {
        Some(p) => io::read_registry(p)?,
        None => TaskRegistry::new(model.tasks.clone()).map_err(|source| Error::Corpus {
            path: model_path.into(),
            source,
        })?,
    };
    let threads = io::read_threads_where(corpus, &registry, |d| model.config.domains.iter().any(|m| m == d))?;
    let splits = assign_splits(threads, model.seed);
    let threads = model
        .config
        .domains
        .iter()
        .filter_map(|d| splits.domain(d))
        .flat_map(|s| s.get(split).iter());
    let tasks = evaluate(&model, threads)?;
    let report = EvalReport {
        echo: Echo {
            command: "eval".into(),
            seed: model.seed,
            config: model.config.clone(),
        },
        split,
        tasks,
    };
    io::write_json(&out.join(EVAL_FILE), &report)?;
    io::write_text(&out.join(EVAL_TABLE_FILE), &format_eval_table(model.strategy, &report.tasks))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub vocab: usize,
    pub dim: usize,
    pub task_dim: usize,
    pub h: f64,
    pub tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            vocab: 20,
            dim: 4,
            task_dim: 2,
            h: 1e-5,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub echo: Echo<GradCheckOptions>,
    pub passed: bool,
    pub strategies: BTreeMap<Strategy, GradCheckReport>,
}

/// Writes the report, then fails with a numerical error if any strategy
/// exceeds the tolerance.
pub fn gradcheck(strategies: &[Strategy], opts: &GradCheckOptions, seed: u64, out: &Path) -> Result<GradCheckSummary> {
    prepare_out(out)?;
    let mut reports = BTreeMap::new();
    for &s in strategies {
        let r = micro_grad_check(s, opts.vocab, opts.dim, opts.task_dim, seed, opts.h, opts.tol)?;
        log::info!("{s}: max rel err {:.3e}", r.max_rel_err);
        reports.insert(s, r);
    }
    let summary = GradCheckSummary {
        echo: Echo {
            command: "gradcheck".into(),
            seed,
            config: opts.clone(),
        },
        passed: reports.values().all(|r| r.passed),
        strategies: reports,
    };
    io::write_json(&out.join(GRADCHECK_FILE), &summary)?;
    if !summary.passed {
        let failed: Vec<String> = summary
            .strategies
            .iter()
            .filter(|(_, r)| !r.passed)
            .map(|(s, r)| format!("{s} ({:.3e})", r.max_rel_err))
            .collect();
        return Err(Error::Numerical(format!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(summary)
}

/// Features from one frozen model for every labelled message of `domain`.
pub fn embed(model_path: &Path, corpus: &Path, tasks: Option<&Path>, domain: &str, label_key: &str, out: &Path) -> Result<usize> {
    prepare_out(out)?;
    let trained = io::load_model(model_path)?;
    let registry = match tasks {
        Some(p) => io::read_registry(p)?,
        None => TaskRegistry::new(trained.tasks.clone()).map_err(|source| Error::Corpus {
            path: model_path.into(),
            source,
        })?,
    };
    let threads = io::read_threads_where(corpus, &registry, |d| d == domain)?;
    let model = trained.model()?;
    let task = embedding_task(&model, domain)?;
    let examples = embed_corpus(&model, &trained.vocabulary, &threads, task, label_key)?;
    if examples.is_empty() {
        return Err(Error::Data(format!("no {domain} messages carry a {label_key:?} label")));
    }
    let header = io::FeatureHeader {
        system: trained.strategy.name().into(),
        setting: trained.config.domains.join("+"),
        domain: domain.into(),
        label_key: label_key.into(),
        dim: examples[0].features.len(),
        n_examples: examples.len(),
        config: serde_json::to_value(Echo {
            command: "embed".to_string(),
            seed: trained.seed,
            config: trained.config.clone(),
        })
        .map_err(|e| Error::Data(e.to_string()))?,
    };
    io::write_features(&out.join(FEATURES_FILE), &header, &examples)?;
    Ok(examples.len())
}

/// Groups feature files into systems (by name) and candidate settings.
/// Every file must list the same examples in the same order.
pub fn assemble_systems(files: &[(io::FeatureHeader, Vec<EmbeddedExample>)]) -> Result<(CvData, Vec<System>)> {
    let (_, first) = files.first().ok_or_else(|| Error::Usage("no feature files given".into()))?;
    let key = |e: &EmbeddedExample| (e.thread_id.clone(), e.index, e.label.clone());
    let reference: Vec<_> = first.iter().map(key).collect();
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<Vec<f64>>>> = BTreeMap::new();
    for (header, examples) in files {
        if examples.len() != reference.len() || examples.iter().map(key).ne(reference.iter().cloned()) {
            return Err(Error::Data(format!(
                "features for {} {} cover different examples",
                header.system, header.setting
            )));
        }
        let slot = grouped.entry(header.system.clone()).or_default();
        if slot.contains_key(&header.setting) {
            return Err(Error::Data(format!("duplicate features for {} {}", header.system, header.setting)));
        }
        slot.insert(header.setting.clone(), examples.iter().map(|e| e.features.clone()).collect());
    }
    let systems = grouped
        .into_iter()
        .map(|(name, settings)| System {
            name,
            candidates: settings
                .into_iter()
                .map(|(setting, features)| FeatureSet { setting, features })
                .collect(),
        })
        .collect();
    Ok((CvData::from_examples(first), systems))
}

/// Nested CV with outer splits spread over `jobs` worker threads.
pub fn nested_cv_parallel(data: &CvData, systems: &[System], cfg: &NestedCvConfig, jobs: usize) -> Result<NestedCvReport> {
    check_inputs(data, systems, cfg)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<SplitResult>> = Mutex::new(Vec::with_capacity(cfg.n_outer));
    let failure = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cfg.n_outer) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cfg.n_outer || failure.lock().unwrap().is_some() {
                    break;
                }
                match run_outer_split(data, systems, cfg, i) {
                    Ok(r) => {
                        log::debug!("outer split {i} done");
                        results.lock().unwrap().push(r);
                    }
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e.into());
    }
    Ok(aggregate(systems, cfg, results.into_inner().unwrap())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub echo: Echo<NestedCvConfig>,
    pub label_names: Vec<String>,
    pub n_examples: usize,
    pub n_threads: usize,
    pub report: NestedCvReport,
}

pub fn downstream(cfg: &RunConfig, features: &[PathBuf], jobs: usize, out: &Path) -> Result<DownstreamReport> {
    prepare_out(out)?;
    let files = features.iter().map(|p| io::read_features(p)).collect::<Result<Vec<_>>>()?;
    let (data, systems) = assemble_systems(&files)?;
    let report = nested_cv_parallel(&data, &systems, &cfg.cv, jobs)?;
    let n_threads = data.thread_ids.iter().collect::<std::collections::BTreeSet<_>>().len();
    let full = DownstreamReport {
        echo: Echo {
            command: "downstream".into(),
            seed: cfg.cv.seed,
            config: cfg.cv.clone(),
        },
        label_names: data.label_names.clone(),
        n_examples: data.labels.len(),
        n_threads,
        report,
    };
    io::write_json(&out.join(DOWNSTREAM_FILE), &full)?;
    io::write_text(&out.join(DOWNSTREAM_TABLE_FILE), &format_report(&full.report))?;
    Ok(full)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub command: String,
    pub n_items: usize,
    pub observed_agreement: f64,
    pub kappa: f64,
}

fn read_actions(path: &Path) -> Result<Vec<ActionLabel>> {
    io::read_label_lines(path)?
        .into_iter()
        .map(|(line, l)| {
            l.parse().map_err(|e: threadweave_core::corpus::CorpusError| Error::Parse {
                path: path.into(),
                line,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Cohen's kappa between two files of recipient-action labels, one per line.
pub fn agreement(a: &Path, b: &Path, out: &Path) -> Result<AgreementReport> {
    prepare_out(out)?;
    let la = read_actions(a)?;
    let lb = read_actions(b)?;
    let kappa = cohens_kappa(&la, &lb).map_err(|source| Error::Corpus { path: b.into(), source })?;
    let agree = la.iter().zip(&lb).filter(|(x, y)| x == y).count();
    let report = AgreementReport {
        command: "agreement".into(),
        n_items: la.len(),
        observed_agreement: agree as f64 / la.len() as f64,
        kappa,
    };
    io::write_json(&out.join(AGREEMENT_FILE), &report)?;
    Ok(report)
}
