//! Seeded synthetic multidomain threads.
//!
//! Each thread is a Markov chain over five latent acts that ends when the
//! absorbing `close` act is emitted. Message tokens mix act cue words (a
//! configurable fraction of which are shared across domains) with
//! domain-specific filler, and metadata is filled so that the standard
//! end-of-thread, attachment and turn-taking labels can be derived.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_metadata_labels, CorpusError, DomainKind, Message, MessageMeta, Thread, BOS, EOS, MAX_MESSAGE_TOKENS, MAX_THREAD_MESSAGES};

pub const N_ACTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    Request,
    Inform,
    Ack,
    Close,
    Chat,
}

impl Act {
    pub const ALL: [Act; N_ACTS] = [Act::Request, Act::Inform, Act::Ack, Act::Close, Act::Chat];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Act::Request => "request",
            Act::Inform => "inform",
            Act::Ack => "ack",
            Act::Close => "close",
            Act::Chat => "chat",
        }
    }

    /// Whether a message with act `self` answers one with act `prev`; the
    /// answering message always comes from another speaker.
    fn answers(self, prev: Act) -> bool {
        matches!(
            (prev, self),
            (Act::Request, Act::Inform) | (Act::Request, Act::Ack) | (Act::Inform, Act::Ack)
        )
    }
}

pub type TransitionMatrix = [[f64; N_ACTS]; N_ACTS];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSynth {
    pub id: String,
    pub n_threads: usize,
    pub n_domain_words: usize,
    /// Domain-specific dynamics; the shared matrix is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act_transition: Option<TransitionMatrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub domains: Vec<DomainSynth>,
    /// Cue words per act.
    pub n_shared_words: usize,
    pub act_transition: TransitionMatrix,
    pub initial_act: [f64; N_ACTS],
    pub mean_message_len: f64,
    pub cross_domain_overlap: f64,
    /// Probability that a content token is an act cue rather than filler.
    pub cue_rate: f64,
    pub attachment_prob: f64,
    pub speaker_switch_prob: f64,
}

pub const DEFAULT_TRANSITION: TransitionMatrix = [
    // request inform ack   close chat
    [0.05, 0.60, 0.10, 0.10, 0.15],
    [0.15, 0.20, 0.35, 0.20, 0.10],
    [0.20, 0.20, 0.00, 0.45, 0.15],
    [0.00, 0.00, 0.00, 1.00, 0.00],
    [0.30, 0.25, 0.00, 0.15, 0.30],
];

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            domains: ["E", "I", "R"]
                .iter()
                .map(|d| DomainSynth {
                    id: d.to_string(),
                    n_threads: 200,
                    n_domain_words: 60,
                    act_transition: None,
                })
                .collect(),
            n_shared_words: 6,
            act_transition: DEFAULT_TRANSITION,
            initial_act: [0.6, 0.2, 0.0, 0.0, 0.2],
            mean_message_len: 8.0,
            cross_domain_overlap: 0.7,
            cue_rate: 0.35,
            attachment_prob: 0.15,
            speaker_switch_prob: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn check_row(row: &[f64; N_ACTS], what: &str) -> Result<(), SynthError> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::InvalidConfig(format!("{what} is not a probability row (sum {sum})")));
    }
    Ok(())
}

fn check_matrix(m: &TransitionMatrix, what: &str) -> Result<(), SynthError> {
    for (i, row) in m.iter().enumerate() {
        check_row(row, &format!("{what} row {i}"))?;
    }
    let close = Act::Close.index();
    if m[close][close] != 1.0 {
        return Err(SynthError::InvalidConfig(format!("{what}: close must be absorbing")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        check_matrix(&self.act_transition, "act_transition")?;
        check_row(&self.initial_act, "initial_act")?;
        if self.domains.is_empty() {
            return Err(SynthError::InvalidConfig("no domains".into()));
        }
        for d in &self.domains {
            if d.n_threads == 0 || d.n_domain_words == 0 {
                return Err(SynthError::InvalidConfig(format!("domain {} needs positive counts", d.id)));
            }
            if let Some(m) = &d.act_transition {
                check_matrix(m, &d.id)?;
            }
        }
        if self.n_shared_words == 0 {
            return Err(SynthError::InvalidConfig("n_shared_words must be positive".into()));
        }
        if self.mean_message_len.is_nan() || self.mean_message_len <= 0.0 {
            return Err(SynthError::InvalidConfig("mean_message_len must be positive".into()));
        }
        for (name, p) in [
            ("cross_domain_overlap", self.cross_domain_overlap),
            ("cue_rate", self.cue_rate),
            ("attachment_prob", self.attachment_prob),
            ("speaker_switch_prob", self.speaker_switch_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn transition_for<'a>(&'a self, domain: &'a DomainSynth) -> &'a TransitionMatrix {
        domain.act_transition.as_ref().unwrap_or(&self.act_transition)
    }

    /// Number of cue words per act that are shared by every domain.
    pub fn n_shared_cues(&self) -> usize {
        libm::round(self.cross_domain_overlap * self.n_shared_words as f64) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub threads: Vec<Thread>,
    /// Threads cut at the message limit before reaching `close`.
    pub forced_termination: Vec<String>,
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last index with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Geometric length on {1, 2, ...} with the given mean.
fn sample_length<R: Rng>(rng: &mut R, mean: f64) -> usize {
    let q = (1.0 / mean).min(1.0);
    let mut k = 1;
    while k < MAX_MESSAGE_TOKENS && rng.random::<f64>() >= q {
        k += 1;
    }
    k
}

fn cue_word(config: &SynthConfig, domain: &str, act: Act, j: usize) -> String {
    if j < config.n_shared_cues() {
        format!("cue.{}.{}", act.name(), j)
    } else {
        format!("{}.cue.{}.{}", domain, act.name(), j)
    }
}

/// Samples the corpus. Deterministic in `config`.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut threads = Vec::new();
    let mut forced = Vec::new();
    for domain in &config.domains {
        let transition = config.transition_for(domain);
        let kind = DomainKind::of(&domain.id);
        for i in 0..domain.n_threads {
            let thread_id = format!("{}-{:05}", domain.id, i);
            let n_speakers = 2 + rng.random_range(0..2usize);
            let mut speaker = 0usize;
            let mut act = Act::ALL[sample_index(&mut rng, &config.initial_act)];
            let mut prev: Option<Act> = None;
            let mut messages = Vec::new();
            loop {
                if let Some(p) = prev {
                    let switch = act.answers(p) || rng.random::<f64>() < config.speaker_switch_prob;
                    if switch {
                        speaker = (speaker + 1 + rng.random_range(0..n_speakers - 1)) % n_speakers;
                    }
                }
                let len = sample_length(&mut rng, config.mean_message_len).clamp(3, MAX_MESSAGE_TOKENS - 2);
                let mut tokens = Vec::with_capacity(len + 2);
                tokens.push(BOS.to_string());
                for _ in 0..len {
                    if rng.random::<f64>() < config.cue_rate {
                        let j = rng.random_range(0..config.n_shared_words);
                        tokens.push(cue_word(config, &domain.id, act, j));
                    } else {
                        let j = rng.random_range(0..domain.n_domain_words);
                        tokens.push(format!("{}.w{}", domain.id, j));
                    }
                }
                tokens.push(EOS.to_string());
                let attached = act == Act::Inform && rng.random::<f64>() < config.attachment_prob;
                messages.push(Message {
                    tokens,
                    labels: BTreeMap::new(),
                    meta: MessageMeta {
                        speaker_id: Some(format!("u{speaker}")),
                        has_attachment: matches!(kind, Some(DomainKind::Email)).then_some(attached),
                        is_thread_final: None,
                        act: Some(act.name().to_string()),
                    },
                });
                if act == Act::Close {
                    break;
                }
                if messages.len() == MAX_THREAD_MESSAGES {
                    forced.push(thread_id.clone());
                    break;
                }
                prev = Some(act);
                act = Act::ALL[sample_index(&mut rng, &transition[act.index()])];
            }
            let thread = Thread {
                thread_id,
                domain: domain.id.clone(),
                messages,
            };
            threads.push(if kind.is_some() { derive_metadata_labels(thread)? } else { thread });
        }
    }
    Ok(SynthCorpus {
        threads,
        forced_termination: forced,
    })
}

/// Counts of each label per task key (task labels plus `act`).
pub fn label_distribution(threads: &[Thread]) -> BTreeMap<String, BTreeMap<String, usize>> {
    let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for t in threads {
        for m in &t.messages {
            for (task, label) in &m.labels {
                *out.entry(task.clone()).or_default().entry(label.clone()).or_default() += 1;
            }
            if let Some(a) = &m.meta.act {
                *out.entry("act".to_string()).or_default().entry(a.clone()).or_default() += 1;
            }
        }
    }
    out
}
