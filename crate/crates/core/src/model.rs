//! Parameter layout and forward pass of the full hierarchical model for each
//! sharing strategy.
//!
//! Parameter names are stable and form the serialized layout:
//!
//! | name                          | shape                | present for            |
//! |-------------------------------|----------------------|------------------------|
//! | `emb`                         | `[vocab, word]`      | all                    |
//! | `malopa/{task}`               | `[task]`             | malopa                 |
//! | `msg/{score_w,score_b,proj_w,proj_b}` | see below    | all but disjoint       |
//! | `msg/{task}/...`              |                      | disjoint               |
//! | `feda/{task}/msg/...`         |                      | feda (private encoder) |
//! | `feda/{task}/{mix_w,mix_b}`   | `[h, 2h]`, `[h]`     | feda                   |
//! | `rnn/shared`                  | recurrent layout     | all but disjoint       |
//! | `rnn/{task}`                  | recurrent layout     | disjoint               |
//! | `rnn/add/{d}`, `u/{d}`        |                      | add, addmul            |
//! | `rnn/mul/{d}`, `v/{d}`        |                      | addmul                 |
//! | `rnn/emb/{d}`, `rnn/affine`   | `[task]`, `[len, task]` | affine              |
//! | `flat/{w,b}`, `flat/{task}/..`| `[hidden, h]`        | recurrence disabled    |
//! | `head/{task}/{w1,b1,w2,b2}`   |                      | all                    |

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TaskSpec;
use crate::diff::{DiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoders::{encode_message, encode_thread, encode_thread_flat, head_distribution, unpack_recurrent, Dims, HeadVars, MessageEncoderVars, RecurrentLayout};
use crate::reparam::{compose, feda_mix, malopa_rows, Composition, ReparamError, Strategy};

pub const INIT_RANGE: f64 = 0.1;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub strategy: Strategy,
    pub dims: Dims,
    pub use_attention: bool,
    pub use_recurrence: bool,
    pub vocab_size: usize,
    pub domains: Vec<String>,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing parameter {0}")]
    Missing(String),
    #[error("unexpected parameter {0}")]
    Unexpected(String),
    #[error("task index {0} out of range")]
    UnknownTask(usize),
    #[error("thread has no messages")]
    EmptyThread,
    #[error(transparent)]
    Reparam(#[from] ReparamError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Uniform,
    Zeros,
    Recurrent,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn message_encoder_specs(prefix: &str, input: usize, h: usize, out: &mut Vec<ParamSpec>) {
    out.push(spec(format!("{prefix}/score_w"), &[input], Init::Uniform));
    out.push(spec(format!("{prefix}/score_b"), &[1], Init::Zeros));
    out.push(spec(format!("{prefix}/proj_w"), &[h, input], Init::Uniform));
    out.push(spec(format!("{prefix}/proj_b"), &[h], Init::Zeros));
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.dims;
        if d.word == 0 || d.message == 0 || d.hidden == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if matches!(self.strategy, Strategy::Affine | Strategy::Malopa) && d.task == 0 {
            return Err(ModelError::Config("task embedding dimension must be positive".into()));
        }
        if self.vocab_size == 0 {
            return Err(ModelError::Config("empty vocabulary".into()));
        }
        if self.tasks.is_empty() {
            return Err(ModelError::Config("no tasks".into()));
        }
        for t in &self.tasks {
            if !self.domains.contains(&t.domain) {
                return Err(ModelError::Config(format!("task {} is outside the active domains", t.task_id)));
            }
        }
        if self.strategy.is_composed() && !self.use_recurrence {
            return Err(ModelError::Config(format!(
                "strategy {} composes recurrent parameters and needs the recurrent encoder",
                self.strategy
            )));
        }
        Ok(())
    }

    pub fn recurrent_layout(&self) -> RecurrentLayout {
        RecurrentLayout::new(self.dims.message, self.dims.hidden)
    }

    fn message_input(&self) -> usize {
        match self.strategy {
            Strategy::Malopa => self.dims.word + self.dims.task,
            _ => self.dims.word,
        }
    }

    pub fn task_domain(&self, task: usize) -> Option<usize> {
        let t = self.tasks.get(task)?;
        self.domains.iter().position(|d| *d == t.domain)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let Dims { word, message: h, hidden, task: p } = self.dims;
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.task_id.as_str()).collect();
        let rec = self.recurrent_layout().len();
        let input = self.message_input();
        let mut out = vec![spec("emb", &[self.vocab_size, word], Init::Uniform)];
        if self.strategy == Strategy::Malopa {
            for t in &tasks {
                out.push(spec(format!("malopa/{t}"), &[p], Init::Uniform));
            }
        }
        if self.strategy == Strategy::Disjoint {
            for t in &tasks {
                message_encoder_specs(&format!("msg/{t}"), input, h, &mut out);
            }
        } else {
            message_encoder_specs("msg", input, h, &mut out);
        }
        if self.strategy == Strategy::Feda {
            for t in &tasks {
                message_encoder_specs(&format!("feda/{t}/msg"), input, h, &mut out);
                out.push(spec(format!("feda/{t}/mix_w"), &[h, 2 * h], Init::Uniform));
                out.push(spec(format!("feda/{t}/mix_b"), &[h], Init::Zeros));
            }
        }
        if self.use_recurrence {
            if self.strategy == Strategy::Disjoint {
                for t in &tasks {
                    out.push(spec(format!("rnn/{t}"), &[rec], Init::Recurrent));
                }
            } else {
                out.push(spec("rnn/shared", &[rec], Init::Recurrent));
            }
            for d in &self.domains {
                match self.strategy {
                    Strategy::Add => {
                        out.push(spec(format!("rnn/add/{d}"), &[rec], Init::Zeros));
                        out.push(spec(format!("u/{d}"), &[1], Init::Zeros));
                    }
                    Strategy::AddMul => {
                        out.push(spec(format!("rnn/add/{d}"), &[rec], Init::Zeros));
                        out.push(spec(format!("rnn/mul/{d}"), &[rec], Init::Zeros));
                        out.push(spec(format!("u/{d}"), &[1], Init::Zeros));
                        out.push(spec(format!("v/{d}"), &[1], Init::Zeros));
                    }
                    Strategy::Affine => out.push(spec(format!("rnn/emb/{d}"), &[p], Init::Uniform)),
                    _ => {}
                }
            }
            if self.strategy == Strategy::Affine {
                out.push(spec("rnn/affine", &[rec, p], Init::Zeros));
            }
        } else if self.strategy == Strategy::Disjoint {
            for t in &tasks {
                out.push(spec(format!("flat/{t}/w"), &[hidden, h], Init::Uniform));
                out.push(spec(format!("flat/{t}/b"), &[hidden], Init::Zeros));
            }
        } else {
            out.push(spec("flat/w", &[hidden, h], Init::Uniform));
            out.push(spec("flat/b", &[hidden], Init::Zeros));
        }
        for (t, task) in tasks.iter().zip(&self.tasks) {
            out.push(spec(format!("head/{t}/w1"), &[hidden, hidden], Init::Uniform));
            out.push(spec(format!("head/{t}/b1"), &[hidden], Init::Zeros));
            out.push(spec(format!("head/{t}/w2"), &[task.labels.len(), hidden], Init::Uniform));
            out.push(spec(format!("head/{t}/b2"), &[task.labels.len()], Init::Zeros));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MessageEncoderIds {
    pub score_w: ParamId,
    pub score_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl MessageEncoderIds {
    fn resolve(store: &ParamStore, prefix: &str) -> Result<Self, ModelError> {
        Ok(Self {
            score_w: lookup(store, &format!("{prefix}/score_w"))?,
            score_b: lookup(store, &format!("{prefix}/score_b"))?,
            proj_w: lookup(store, &format!("{prefix}/proj_w"))?,
            proj_b: lookup(store, &format!("{prefix}/proj_b"))?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<MessageEncoderVars, DiffError> {
        Ok(MessageEncoderVars {
            score_w: tape.param(store, self.score_w)?,
            score_b: tape.param(store, self.score_b)?,
            proj_w: tape.param(store, self.proj_w)?,
            proj_b: tape.param(store, self.proj_b)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FedaIds {
    pub private: MessageEncoderIds,
    pub mix_w: ParamId,
    pub mix_b: ParamId,
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId, ModelError> {
    store.id(name).ok_or_else(|| ModelError::Missing(name.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub embedding: ParamId,
    /// One shared encoder, or one per task for disjoint stacks.
    pub message: Vec<MessageEncoderIds>,
    pub malopa: Vec<ParamId>,
    pub feda: Vec<FedaIds>,
    pub recurrent: Option<Composition>,
    pub flat: Vec<(ParamId, ParamId)>,
    pub heads: Vec<HeadIds>,
}

impl Layout {
    fn resolve(config: &ModelConfig, store: &ParamStore) -> Result<Self, ModelError> {
        let tasks: Vec<&str> = config.tasks.iter().map(|t| t.task_id.as_str()).collect();
        let per_task = config.strategy == Strategy::Disjoint;
        let message = if per_task {
            tasks
                .iter()
                .map(|t| MessageEncoderIds::resolve(store, &format!("msg/{t}")))
                .collect::<Result<_, _>>()?
        } else {
            vec![MessageEncoderIds::resolve(store, "msg")?]
        };
        let malopa = if config.strategy == Strategy::Malopa {
            tasks.iter().map(|t| lookup(store, &format!("malopa/{t}"))).collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        let feda = if config.strategy == Strategy::Feda {
            tasks
                .iter()
                .map(|t| {
                    Ok(FedaIds {
                        private: MessageEncoderIds::resolve(store, &format!("feda/{t}/msg"))?,
                        mix_w: lookup(store, &format!("feda/{t}/mix_w"))?,
                        mix_b: lookup(store, &format!("feda/{t}/mix_b"))?,
                    })
                })
                .collect::<Result<_, ModelError>>()?
        } else {
            Vec::new()
        };
        let per_domain = |prefix: &str| -> Result<Vec<ParamId>, ModelError> {
            config.domains.iter().map(|d| lookup(store, &format!("{prefix}/{d}"))).collect()
        };
        let recurrent = if config.use_recurrence {
            Some(match config.strategy {
                Strategy::Disjoint => Composition::Disjoint {
                    per_task: tasks.iter().map(|t| lookup(store, &format!("rnn/{t}"))).collect::<Result<_, _>>()?,
                },
                Strategy::Add => Composition::Add {
                    shared: lookup(store, "rnn/shared")?,
                    domain: per_domain("rnn/add")?,
                    u: per_domain("u")?,
                },
                Strategy::AddMul => Composition::AddMul {
                    shared: lookup(store, "rnn/shared")?,
                    add: per_domain("rnn/add")?,
                    mul: per_domain("rnn/mul")?,
                    u: per_domain("u")?,
                    v: per_domain("v")?,
                },
                Strategy::Affine => Composition::Affine {
                    shared: lookup(store, "rnn/shared")?,
                    embedding: per_domain("rnn/emb")?,
                    w: lookup(store, "rnn/affine")?,
                },
                Strategy::Tied | Strategy::Malopa | Strategy::Feda => Composition::Tied {
                    shared: lookup(store, "rnn/shared")?,
                },
            })
        } else {
            None
        };
        let flat = if config.use_recurrence {
            Vec::new()
        } else if per_task {
            tasks
                .iter()
                .map(|t| Ok((lookup(store, &format!("flat/{t}/w"))?, lookup(store, &format!("flat/{t}/b"))?)))
                .collect::<Result<_, ModelError>>()?
        } else {
            vec![(lookup(store, "flat/w")?, lookup(store, "flat/b")?)]
        };
        let heads = tasks
            .iter()
            .map(|t| {
                Ok(HeadIds {
                    w1: lookup(store, &format!("head/{t}/w1"))?,
                    b1: lookup(store, &format!("head/{t}/b1"))?,
                    w2: lookup(store, &format!("head/{t}/w2"))?,
                    b2: lookup(store, &format!("head/{t}/b2"))?,
                })
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self {
            embedding: lookup(store, "emb")?,
            message,
            malopa,
            feda,
            recurrent,
            flat,
            heads,
        })
    }
}

/// Which encoder computation a task uses. Tasks with equal keys share their
/// thread embeddings within a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StackKey {
    Domain(usize),
    Task(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Fresh model: weights uniform in ±0.1, biases zero, forget-gate biases
    /// +1, domain-specific recurrent components zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = config.recurrent_layout();
        for s in config.param_specs() {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Uniform => (0..n).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect(),
                Init::Recurrent => layout.init(|| rng.random_range(-INIT_RANGE..INIT_RANGE), FORGET_BIAS),
            };
            let value = Tensor::new(s.shape.clone(), data).expect("spec shape");
            store.insert(s.name, value)?;
        }
        let layout = Layout::resolve(&config, &store)?;
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    /// Rebuilds a model from stored parameters, checking that names and
    /// shapes match the strategy's layout exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = config.param_specs();
        let expected: BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        for (_, p) in params.iter() {
            if !expected.contains(p.name.as_str()) {
                return Err(ModelError::Unexpected(p.name.clone()));
            }
        }
        for s in &specs {
            let t = params.by_name(&s.name).ok_or_else(|| ModelError::Missing(s.name.clone()))?;
            if t.shape() != s.shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self { config, params, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_tasks(&self) -> usize {
        self.config.tasks.len()
    }

    pub fn stack_key(&self, task: usize) -> Result<StackKey, ModelError> {
        let domain = self.config.task_domain(task).ok_or(ModelError::UnknownTask(task))?;
        Ok(if self.config.strategy.per_task_stack() {
            StackKey::Task(task)
        } else {
            StackKey::Domain(domain)
        })
    }

    /// Message embeddings for the thread as seen by `task`'s stack.
    pub fn message_embeddings(&self, tape: &mut Tape, thread: &[Vec<usize>], task: usize) -> Result<Vec<Var>, ModelError> {
        if task >= self.n_tasks() {
            return Err(ModelError::UnknownTask(task));
        }
        let store = &self.params;
        let emb = tape.param(store, self.layout.embedding)?;
        let enc_ix = if self.layout.message.len() > 1 { task } else { 0 };
        let enc = self.layout.message[enc_ix].bind(tape, store)?;
        let task_emb = match self.layout.malopa.get(task) {
            Some(&id) => Some(tape.param(store, id)?),
            None => None,
        };
        let feda = match self.layout.feda.get(task) {
            Some(f) => Some((f.private.bind(tape, store)?, tape.param(store, f.mix_w)?, tape.param(store, f.mix_b)?)),
            None => None,
        };
        let attn = self.config.use_attention;
        let mut out = Vec::with_capacity(thread.len());
        for ids in thread {
            let mut rows = tape.gather_rows(emb, ids)?;
            if let Some(k) = task_emb {
                rows = malopa_rows(tape, rows, k)?;
            }
            let shared = encode_message(tape, &enc, rows, attn)?.output;
            let m = match &feda {
                Some((private, mix_w, mix_b)) => {
                    let p = encode_message(tape, private, rows, attn)?.output;
                    feda_mix(tape, shared, p, *mix_w, *mix_b)?
                }
                None => shared,
            };
            out.push(m);
        }
        Ok(out)
    }

    /// Thread embeddings `e_1..e_n` for `task`'s stack.
    pub fn thread_embeddings(&self, tape: &mut Tape, thread: &[Vec<usize>], task: usize) -> Result<Vec<Var>, ModelError> {
        if thread.is_empty() {
            return Err(ModelError::EmptyThread);
        }
        let messages = self.message_embeddings(tape, thread, task)?;
        let domain = self.config.task_domain(task).ok_or(ModelError::UnknownTask(task))?;
        match &self.layout.recurrent {
            Some(comp) => {
                let theta = compose(tape, &self.params, comp, domain, task)?;
                let lstm = unpack_recurrent(tape, theta, self.config.recurrent_layout())?;
                Ok(encode_thread(tape, &messages, &lstm)?)
            }
            None => {
                let (w, b) = self.layout.flat[if self.layout.flat.len() > 1 { task } else { 0 }];
                let w = tape.param(&self.params, w)?;
                let b = tape.param(&self.params, b)?;
                Ok(encode_thread_flat(tape, &messages, w, b)?)
            }
        }
    }

    pub fn head(&self, tape: &mut Tape, task: usize) -> Result<HeadVars, ModelError> {
        let h = self.layout.heads.get(task).ok_or(ModelError::UnknownTask(task))?;
        let s = &self.params;
        Ok(HeadVars {
            w1: tape.param(s, h.w1)?,
            b1: tape.param(s, h.b1)?,
            w2: tape.param(s, h.w2)?,
            b2: tape.param(s, h.b2)?,
        })
    }

    /// Per-message label distributions for `task`.
    pub fn predict(&self, thread: &[Vec<usize>], task: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let es = self.thread_embeddings(&mut tape, thread, task)?;
        let head = self.head(&mut tape, task)?;
        es.into_iter()
            .map(|e| {
                let p = head_distribution(&mut tape, &head, e)?;
                Ok(tape.value(p).data().to_vec())
            })
            .collect()
    }

    /// Frozen thread embeddings as plain vectors.
    pub fn embed(&self, thread: &[Vec<usize>], task: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let es = self.thread_embeddings(&mut tape, thread, task)?;
        Ok(es.into_iter().map(|e| tape.value(e).data().to_vec()).collect())
    }
}
