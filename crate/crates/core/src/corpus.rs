//! Thread/message data model, preprocessing, split assignment, metadata
//! labels, vocabulary and inter-annotator agreement.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Longest message after wrapping with `<bos>`/`<eos>`.
pub const MAX_MESSAGE_TOKENS: usize = 256;
pub const MAX_THREAD_MESSAGES: usize = 32;

pub const TASK_EMAIL_END: &str = "E-T";
pub const TASK_EMAIL_ATTACHMENT: &str = "E-A";
pub const TASK_IRC_TURN: &str = "I-T";
pub const TASK_REDDIT_END: &str = "R-T";

pub const DEFAULT_MIN_COUNT: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("unknown domain {0}")]
    UnknownDomain(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task {task} belongs to domain {task_domain}, thread {thread} is in {thread_domain}")]
    TaskDomainMismatch {
        task: String,
        task_domain: String,
        thread: String,
        thread_domain: String,
    },
    #[error("label {label:?} is not in the label set of task {task}")]
    UnknownLabel { task: String, label: String },
    #[error("thread {thread} message {message} is missing {field}")]
    MissingMetadata {
        thread: String,
        message: usize,
        field: &'static str,
    },
    #[error("thread {0} has no messages")]
    EmptyThread(String),
    #[error("thread {thread} message {message} has no tokens")]
    EmptyMessage { thread: String, message: usize },
    #[error("invalid task spec {task}: {reason}")]
    InvalidTask { task: String, reason: String },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("min_count must be at least 1")]
    InvalidMinCount,
    #[error("label sequences differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no annotations to compare")]
    EmptyAnnotations,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub has_attachment: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_thread_final: Option<bool>,
    /// Per-message action annotation used by the downstream classifier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub meta: MessageMeta,
}

impl Message {
    /// Label under `key`: a task label, or the `act` annotation for `"act"`.
    pub fn label_for(&self, key: &str) -> Option<&str> {
        match self.labels.get(key) {
            Some(l) => Some(l.as_str()),
            None if key == "act" => self.meta.act.as_deref(),
            None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thread {
    pub thread_id: String,
    pub domain: String,
    pub messages: Vec<Message>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub domain: String,
    pub labels: Vec<String>,
}

impl TaskSpec {
    pub fn new(task_id: &str, domain: &str, labels: &[&str]) -> Self {
        Self {
            task_id: task_id.to_string(),
            domain: domain.to_string(),
            labels: labels.iter().map(|l| l.to_string()).collect(),
        }
    }

    pub fn binary(task_id: &str, domain: &str) -> Self {
        Self::new(task_id, domain, &["0", "1"])
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Validated task list; task order is the canonical head order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TaskSpec>", into = "Vec<TaskSpec>")]
pub struct TaskRegistry {
    tasks: Vec<TaskSpec>,
}

impl TryFrom<Vec<TaskSpec>> for TaskRegistry {
    type Error = CorpusError;

    fn try_from(tasks: Vec<TaskSpec>) -> Result<Self, Self::Error> {
        Self::new(tasks)
    }
}

impl From<TaskRegistry> for Vec<TaskSpec> {
    fn from(r: TaskRegistry) -> Self {
        r.tasks
    }
}

impl TaskRegistry {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for t in &tasks {
            if !seen.insert(t.task_id.as_str()) {
                return Err(CorpusError::InvalidTask {
                    task: t.task_id.clone(),
                    reason: "duplicate task id".into(),
                });
            }
            if t.labels.len() < 2 {
                return Err(CorpusError::InvalidTask {
                    task: t.task_id.clone(),
                    reason: "needs at least two labels".into(),
                });
            }
            let unique: BTreeSet<_> = t.labels.iter().collect();
            if unique.len() != t.labels.len() {
                return Err(CorpusError::InvalidTask {
                    task: t.task_id.clone(),
                    reason: "labels must be unique".into(),
                });
            }
        }
        Ok(Self { tasks })
    }

    /// The four metadata-derived binary tasks over domains `E`, `I`, `R`.
    pub fn standard() -> Self {
        Self::new(alloc::vec![
            TaskSpec::binary(TASK_EMAIL_END, "E"),
            TaskSpec::binary(TASK_EMAIL_ATTACHMENT, "E"),
            TaskSpec::binary(TASK_IRC_TURN, "I"),
            TaskSpec::binary(TASK_REDDIT_END, "R"),
        ])
        .expect("standard registry is valid")
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn position(&self, task_id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.task_id == task_id)
    }

    pub fn domains(&self) -> Vec<String> {
        let set: BTreeSet<_> = self.tasks.iter().map(|t| t.domain.clone()).collect();
        set.into_iter().collect()
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.tasks.iter().any(|t| t.domain == domain)
    }

    pub fn tasks_for<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a TaskSpec> + 'a {
        self.tasks.iter().filter(move |t| t.domain == domain)
    }

    /// Keeps only the tasks of the given domains.
    pub fn restrict(&self, domains: &[String]) -> Self {
        Self {
            tasks: self.tasks.iter().filter(|t| domains.contains(&t.domain)).cloned().collect(),
        }
    }
}

/// Which metadata rules apply to a domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainKind {
    Email,
    Irc,
    Reddit,
}

impl DomainKind {
    pub fn of(domain: &str) -> Option<Self> {
        match domain {
            "E" | "email" => Some(Self::Email),
            "I" | "irc" => Some(Self::Irc),
            "R" | "reddit" => Some(Self::Reddit),
            _ => None,
        }
    }
}

/// Recipient actions for email messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionLabel {
    #[serde(rename = "Reply-Yesno")]
    ReplyYesno,
    #[serde(rename = "Reply-Ack")]
    ReplyAck,
    #[serde(rename = "Reply-Other")]
    ReplyOther,
    Investigate,
    #[serde(rename = "Send-New-Email")]
    SendNewEmail,
    #[serde(rename = "Setup-Appointment")]
    SetupAppointment,
    #[serde(rename = "Approve-Request")]
    ApproveRequest,
    #[serde(rename = "Share-Content")]
    ShareContent,
    Other,
}

impl ActionLabel {
    pub const ALL: [ActionLabel; 9] = [
        Self::ReplyYesno,
        Self::ReplyAck,
        Self::ReplyOther,
        Self::Investigate,
        Self::SendNewEmail,
        Self::SetupAppointment,
        Self::ApproveRequest,
        Self::ShareContent,
        Self::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ReplyYesno => "Reply-Yesno",
            Self::ReplyAck => "Reply-Ack",
            Self::ReplyOther => "Reply-Other",
            Self::Investigate => "Investigate",
            Self::SendNewEmail => "Send-New-Email",
            Self::SetupAppointment => "Setup-Appointment",
            Self::ApproveRequest => "Approve-Request",
            Self::ShareContent => "Share-Content",
            Self::Other => "Other",
        }
    }
}

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionLabel {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| CorpusError::UnknownLabel {
                task: "action".into(),
                label: s.into(),
            })
    }
}

/// Applies the length limits: content is wrapped in `<bos>`/`<eos>` and cut
/// to its first 254 tokens; only the first 32 messages are kept. Already
/// wrapped messages are unwrapped first, so the operation is idempotent.
pub fn preprocess_thread(mut thread: Thread) -> Result<Thread, CorpusError> {
    if thread.messages.is_empty() {
        return Err(CorpusError::EmptyThread(thread.thread_id));
    }
    thread.messages.truncate(MAX_THREAD_MESSAGES);
    for (i, m) in thread.messages.iter_mut().enumerate() {
        let mut content: &[String] = &m.tokens;
        if content.first().map(String::as_str) == Some(BOS) {
            content = &content[1..];
        }
        if content.last().map(String::as_str) == Some(EOS) {
            content = &content[..content.len() - 1];
        }
        if content.is_empty() {
            return Err(CorpusError::EmptyMessage {
                thread: thread.thread_id.clone(),
                message: i,
            });
        }
        let keep = content.len().min(MAX_MESSAGE_TOKENS - 2);
        let mut tokens = Vec::with_capacity(keep + 2);
        tokens.push(BOS.to_string());
        tokens.extend_from_slice(&content[..keep]);
        tokens.push(EOS.to_string());
        m.tokens = tokens;
    }
    Ok(thread)
}

/// Checks that the thread's domain and every label refer to registered
/// tasks of that domain.
pub fn validate_thread(thread: &Thread, registry: &TaskRegistry) -> Result<(), CorpusError> {
    if !registry.has_domain(&thread.domain) {
        return Err(CorpusError::UnknownDomain(thread.domain.clone()));
    }
    for m in &thread.messages {
        for (task_id, label) in &m.labels {
            let task = registry.get(task_id).ok_or_else(|| CorpusError::UnknownTask(task_id.clone()))?;
            if task.domain != thread.domain {
                return Err(CorpusError::TaskDomainMismatch {
                    task: task_id.clone(),
                    task_domain: task.domain.clone(),
                    thread: thread.thread_id.clone(),
                    thread_domain: thread.domain.clone(),
                });
            }
            if task.label_index(label).is_none() {
                return Err(CorpusError::UnknownLabel {
                    task: task_id.clone(),
                    label: label.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Writes the metadata-derived binary labels for the thread's domain kind.
///
/// End-of-thread labels honour an explicit `is_thread_final` flag and
/// otherwise mark the last message. Turn-taking marks a speaker change from
/// the previous message; the first message is always 0.
pub fn derive_metadata_labels(mut thread: Thread) -> Result<Thread, CorpusError> {
    let kind = DomainKind::of(&thread.domain).ok_or_else(|| CorpusError::UnknownDomain(thread.domain.clone()))?;
    let n = thread.messages.len();
    let bit = |b: bool| if b { "1" } else { "0" }.to_string();
    let mut prev_speaker: Option<String> = None;
    for i in 0..n {
        let m = &thread.messages[i];
        let last = m.meta.is_thread_final.unwrap_or(i + 1 == n);
        let mut new_labels = Vec::new();
        match kind {
            DomainKind::Email => {
                let attached = m.meta.has_attachment.ok_or_else(|| CorpusError::MissingMetadata {
                    thread: thread.thread_id.clone(),
                    message: i,
                    field: "has_attachment",
                })?;
                new_labels.push((TASK_EMAIL_END, bit(last)));
                new_labels.push((TASK_EMAIL_ATTACHMENT, bit(attached)));
            }
            DomainKind::Irc => {
                let speaker = m.meta.speaker_id.clone().ok_or_else(|| CorpusError::MissingMetadata {
                    thread: thread.thread_id.clone(),
                    message: i,
                    field: "speaker_id",
                })?;
                let changed = prev_speaker.as_ref().is_some_and(|p| *p != speaker);
                new_labels.push((TASK_IRC_TURN, bit(changed)));
                prev_speaker = Some(speaker);
            }
            DomainKind::Reddit => new_labels.push((TASK_REDDIT_END, bit(last))),
        }
        let m = &mut thread.messages[i];
        for (task, label) in new_labels {
            m.labels.insert(task.to_string(), label);
        }
    }
    Ok(thread)
}

/// Seeded 64-bit hash of a string: FNV-1a followed by a splitmix finalizer.
pub fn seeded_hash(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(key.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSplits {
    pub train: Vec<Thread>,
    pub valid: Vec<Thread>,
    pub test: Vec<Thread>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl DomainSplits {
    pub fn get(&self, split: Split) -> &[Thread] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Per-domain train/valid/test partitions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub domains: BTreeMap<String, DomainSplits>,
}

impl CorpusSplits {
    pub fn domain(&self, d: &str) -> Option<&DomainSplits> {
        self.domains.get(d)
    }

    /// Training thread counts per domain.
    pub fn train_counts(&self) -> BTreeMap<String, usize> {
        self.domains.iter().map(|(d, s)| (d.clone(), s.train.len())).collect()
    }

    pub fn threads(&self, split: Split) -> impl Iterator<Item = &Thread> {
        self.domains.values().flat_map(move |s| s.get(split).iter())
    }
}

/// Sizes of the three partitions for `k` threads: ⌈k/2⌉, then half of the
/// remainder (rounded up) for validation, the rest for test.
pub fn split_sizes(k: usize) -> (usize, usize, usize) {
    let train = k.div_ceil(2);
    let valid = (k - train).div_ceil(2);
    (train, valid, k - train - valid)
}

/// Orders each domain's threads by `seeded_hash(seed, thread_id)` and cuts
/// the order into 1/2, 1/4, 1/4. Independent of input order.
pub fn assign_splits(threads: Vec<Thread>, seed: u64) -> CorpusSplits {
    let mut by_domain: BTreeMap<String, Vec<(u64, Thread)>> = BTreeMap::new();
    for t in threads {
        let h = seeded_hash(seed, &t.thread_id);
        by_domain.entry(t.domain.clone()).or_default().push((h, t));
    }
    let mut out = CorpusSplits::default();
    for (domain, mut items) in by_domain {
        items.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.thread_id.cmp(&b.1.thread_id)));
        let (n_train, n_valid, _) = split_sizes(items.len());
        let mut splits = DomainSplits::default();
        for (i, (_, t)) in items.into_iter().enumerate() {
            if i < n_train {
                splits.train.push(t);
            } else if i < n_train + n_valid {
                splits.valid.push(t);
            } else {
                splits.test.push(t);
            }
        }
        out.domains.insert(domain, splits);
    }
    out
}

/// Token inventory: `<unk>`, `<bos>`, `<eos>` first, then tokens by
/// descending frequency with lexicographic tie-break.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub const UNK_ID: usize = 0;

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, token: &str) -> usize {
        self.id(token).unwrap_or(Self::UNK_ID)
    }

    pub fn encode_message(&self, m: &Message) -> Vec<usize> {
        m.tokens.iter().map(|t| self.encode(t)).collect()
    }
}

pub fn build_vocabulary<'a, I>(train_threads: I, min_count: usize) -> Result<Vocabulary, CorpusError>
where
    I: IntoIterator<Item = &'a Thread>,
{
    if min_count == 0 {
        return Err(CorpusError::InvalidMinCount);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut any = false;
    for t in train_threads {
        any = true;
        for m in &t.messages {
            for tok in &m.tokens {
                if tok != BOS && tok != EOS && tok != UNK {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
    }
    if !any {
        return Err(CorpusError::EmptyTrainingSet);
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = alloc::vec![UNK.to_string(), BOS.to_string(), EOS.to_string()];
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Ok(Vocabulary::from(tokens))
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)` between two annotators.
pub fn cohens_kappa<L: Ord>(labels_a: &[L], labels_b: &[L]) -> Result<f64, CorpusError> {
    if labels_a.len() != labels_b.len() {
        return Err(CorpusError::LengthMismatch(labels_a.len(), labels_b.len()));
    }
    if labels_a.is_empty() {
        return Err(CorpusError::EmptyAnnotations);
    }
    let n = labels_a.len() as f64;
    let agree = labels_a.iter().zip(labels_b).filter(|(a, b)| a == b).count();
    let p_o = agree as f64 / n;
    let mut marg_a: BTreeMap<&L, usize> = BTreeMap::new();
    let mut marg_b: BTreeMap<&L, usize> = BTreeMap::new();
    for (a, b) in labels_a.iter().zip(labels_b) {
        *marg_a.entry(a).or_default() += 1;
        *marg_b.entry(b).or_default() += 1;
    }
    let p_e: f64 = marg_a
        .iter()
        .map(|(k, &ca)| ca as f64 * *marg_b.get(k).unwrap_or(&0) as f64)
        .sum::<f64>()
        / (n * n);
    if p_e >= 1.0 {
        return Ok(1.0);
    }
    Ok(((p_o - p_e) / (1.0 - p_e)).clamp(-1.0, 1.0))
}
