//! File formats: thread JSONL, task registries, model artifacts, feature
//! files and JSON reports.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use threadweave_core::corpus::{
    assign_splits, derive_metadata_labels, preprocess_thread, validate_thread, CorpusSplits, DomainKind, TaskRegistry, TaskSpec, Thread,
};
use threadweave_core::downstream::EmbeddedExample;
use threadweave_core::trainer::TrainedModel;

use crate::error::{Error, Result};

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_line<W: Write, T: Serialize + ?Sized>(w: &mut W, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::Data(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        write_line(&mut w, path, r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        reason: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_registry(path: &Path) -> Result<TaskRegistry> {
    let tasks: Vec<TaskSpec> = read_json(path)?;
    TaskRegistry::new(tasks).map_err(|source| Error::Corpus { path: path.into(), source })
}

/// Reads threads and applies preprocessing. Metadata-derived labels are
/// filled in for known domain kinds when a registered task of the domain is
/// missing from some message. Every thread is validated against `registry`.
pub fn read_threads(path: &Path, registry: &TaskRegistry) -> Result<Vec<Thread>> {
    read_threads_where(path, registry, |_| true)
}

/// As [`read_threads`], keeping only threads whose domain passes `keep`;
/// the others are parsed but neither preprocessed nor validated.
pub fn read_threads_where(path: &Path, registry: &TaskRegistry, keep: impl Fn(&str) -> bool) -> Result<Vec<Thread>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            reason,
        };
        let thread: Thread = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if !keep(&thread.domain) {
            continue;
        }
        let mut thread = preprocess_thread(thread).map_err(|e| malformed(e.to_string()))?;
        let needs_labels = DomainKind::of(&thread.domain).is_some()
            && registry
                .tasks_for(&thread.domain)
                .any(|t| thread.messages.iter().any(|m| !m.labels.contains_key(&t.task_id)));
        if needs_labels {
            thread = derive_metadata_labels(thread).map_err(|e| malformed(e.to_string()))?;
        }
        validate_thread(&thread, registry).map_err(|e| malformed(e.to_string()))?;
        out.push(thread);
    }
    Ok(out)
}

/// Reads, preprocesses and splits a corpus.
pub fn load_corpus(path: &Path, registry: &TaskRegistry, seed: u64) -> Result<CorpusSplits> {
    Ok(assign_splits(read_threads(path, registry)?, seed))
}

pub fn save_model(path: &Path, model: &TrainedModel) -> Result<()> {
    write_json(path, model)
}

/// Loads an artifact and checks its version and array shapes.
pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let model: TrainedModel = read_json(path)?;
    model.validate()?;
    Ok(model)
}

/// First line of a feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub system: String,
    pub setting: String,
    pub domain: String,
    pub label_key: String,
    pub dim: usize,
    pub n_examples: usize,
    pub config: serde_json::Value,
}

pub fn write_features(path: &Path, header: &FeatureHeader, examples: &[EmbeddedExample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_line(&mut w, path, header)?;
    for e in examples {
        write_line(&mut w, path, e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<(FeatureHeader, Vec<EmbeddedExample>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
        path: path.into(),
        line,
        reason: e.to_string(),
    };
    let (i, first) = lines.next().ok_or_else(|| Error::Parse {
        path: path.into(),
        line: 1,
        reason: "missing header".into(),
    })?;
    let header: FeatureHeader = serde_json::from_str(first).map_err(|e| parse_err(i + 1, e))?;
    let examples = lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(i + 1, e)))
        .collect::<Result<Vec<EmbeddedExample>>>()?;
    if examples.len() != header.n_examples {
        return Err(Error::Data(format!(
            "{}: header announces {} examples, found {}",
            path.display(),
            header.n_examples,
            examples.len()
        )));
    }
    Ok((header, examples))
}


/// Reads one label per non-empty line.
pub fn read_label_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .collect())
}
