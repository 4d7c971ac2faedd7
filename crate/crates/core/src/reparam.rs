//! Effective recurrent parameters from shared and domain-specific components,
//! and the two feature-level baselines (task-embedding concatenation and
//! shared/private message encoders).

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, ParamId, ParamStore, Tape, Var};
use crate::encoders::{encode_message, MessageEncoderVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Tied,
    Disjoint,
    Add,
    AddMul,
    Affine,
    Malopa,
    Feda,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Tied,
        Strategy::Disjoint,
        Strategy::Add,
        Strategy::AddMul,
        Strategy::Affine,
        Strategy::Malopa,
        Strategy::Feda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Tied => "tied",
            Strategy::Disjoint => "disjoint",
            Strategy::Add => "add",
            Strategy::AddMul => "addmul",
            Strategy::Affine => "affine",
            Strategy::Malopa => "malopa",
            Strategy::Feda => "feda",
        }
    }

    /// Whether the recurrent vector is built from shared plus per-domain parts.
    pub fn is_composed(self) -> bool {
        matches!(self, Strategy::Add | Strategy::AddMul | Strategy::Affine)
    }

    /// Whether each task runs its own encoder stack.
    pub fn per_task_stack(self) -> bool {
        matches!(self, Strategy::Disjoint | Strategy::Malopa | Strategy::Feda)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown strategy {0:?}; expected one of tied, disjoint, add, addmul, affine, malopa, feda")]
pub struct UnknownStrategy(pub String);

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == lower)
            .ok_or_else(|| UnknownStrategy(s.into()))
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ReparamError {
    #[error("unknown domain index {0}")]
    UnknownDomain(usize),
    #[error("unknown task index {0}")]
    UnknownTask(usize),
    #[error("strategy {strategy} is missing parameter {name}")]
    MissingField { strategy: Strategy, name: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Parameter handles for the recurrent vector of each strategy.
#[derive(Clone, Debug, PartialEq)]
pub enum Composition {
    /// One vector for everything (also used by the feature-level baselines).
    Tied { shared: ParamId },
    /// A full vector per task.
    Disjoint { per_task: Vec<ParamId> },
    /// `shared + exp(u_d) * domain_d`.
    Add {
        shared: ParamId,
        domain: Vec<ParamId>,
        u: Vec<ParamId>,
    },
    /// `shared + exp(u_d) * add_d + exp(v_d) * (mul_d ⊗ shared)`.
    AddMul {
        shared: ParamId,
        add: Vec<ParamId>,
        mul: Vec<ParamId>,
        u: Vec<ParamId>,
        v: Vec<ParamId>,
    },
    /// `shared + W * embedding_d`.
    Affine {
        shared: ParamId,
        embedding: Vec<ParamId>,
        w: ParamId,
    },
}

fn pick(ids: &[ParamId], i: usize, err: ReparamError) -> Result<ParamId, ReparamError> {
    ids.get(i).copied().ok_or(err)
}

/// Builds the effective recurrent vector for `domain` (or `task`, for
/// per-task stacks) on the tape. Gradients reach every component used.
pub fn compose(tape: &mut Tape, store: &ParamStore, comp: &Composition, domain: usize, task: usize) -> Result<Var, ReparamError> {
    let dom = |ids: &[ParamId]| pick(ids, domain, ReparamError::UnknownDomain(domain));
    match comp {
        Composition::Tied { shared } => Ok(tape.param(store, *shared)?),
        Composition::Disjoint { per_task } => {
            let id = pick(per_task, task, ReparamError::UnknownTask(task))?;
            Ok(tape.param(store, id)?)
        }
        Composition::Add { shared, domain: d, u } => {
            let (d_id, u_id) = (dom(d)?, dom(u)?);
            let s = tape.param(store, *shared)?;
            let dv = tape.param(store, d_id)?;
            let uv = tape.param(store, u_id)?;
            let scale = tape.exp(uv)?;
            let scaled = tape.scale_by(scale, dv)?;
            Ok(tape.add(s, scaled)?)
        }
        Composition::AddMul { shared, add, mul, u, v } => {
            let (a_id, m_id, u_id, v_id) = (dom(add)?, dom(mul)?, dom(u)?, dom(v)?);
            let s = tape.param(store, *shared)?;
            let a = tape.param(store, a_id)?;
            let m = tape.param(store, m_id)?;
            let uv = tape.param(store, u_id)?;
            let vv = tape.param(store, v_id)?;
            let eu = tape.exp(uv)?;
            let ev = tape.exp(vv)?;
            let add_term = tape.scale_by(eu, a)?;
            let prod = tape.mul(m, s)?;
            let mul_term = tape.scale_by(ev, prod)?;
            let partial = tape.add(s, add_term)?;
            Ok(tape.add(partial, mul_term)?)
        }
        Composition::Affine { shared, embedding, w } => {
            let e_id = dom(embedding)?;
            let s = tape.param(store, *shared)?;
            let e = tape.param(store, e_id)?;
            let wv = tape.param(store, *w)?;
            let proj = tape.matmul(wv, e)?;
            Ok(tape.add(s, proj)?)
        }
    }
}

/// Word embedding followed by the task embedding.
pub fn malopa_embed(word_embedding: &[f64], task_embedding: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(word_embedding.len() + task_embedding.len());
    out.extend_from_slice(word_embedding);
    out.extend_from_slice(task_embedding);
    out
}

/// Tape form of [`malopa_embed`] over every token row of a message.
pub fn malopa_rows(tape: &mut Tape, rows: Var, task_embedding: Var) -> Result<Var, DiffError> {
    tape.append_cols(rows, task_embedding)
}

/// Shared/private message encoding: both encoders run on the same token
/// rows, their outputs are concatenated and mapped by `mix_w [h, 2h]` and
/// `mix_b [h]`.
pub fn feda_encode(
    tape: &mut Tape,
    rows: Var,
    shared: &MessageEncoderVars,
    private: &MessageEncoderVars,
    mix_w: Var,
    mix_b: Var,
    use_attention: bool,
) -> Result<Var, DiffError> {
    let s = encode_message(tape, shared, rows, use_attention)?.output;
    let p = encode_message(tape, private, rows, use_attention)?.output;
    feda_mix(tape, s, p, mix_w, mix_b)
}

pub fn feda_mix(tape: &mut Tape, shared: Var, private: Var, mix_w: Var, mix_b: Var) -> Result<Var, DiffError> {
    let both = tape.concat(&[shared, private])?;
    let out = tape.matmul(mix_w, both)?;
    tape.add(out, mix_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use alloc::vec;

    fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone()).unwrap();
        }
        s
    }

    fn eval(store: &ParamStore, comp: &Composition) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = compose(&mut tape, store, comp, 0, 0).unwrap();
        tape.value(v).data().to_vec()
    }

    #[test]
    fn add_example() {
        let s = store_with(&[
            ("s", Tensor::vector(vec![1.0, 2.0])),
            ("d", Tensor::vector(vec![0.5, -1.0])),
            ("u", Tensor::scalar(0.0)),
        ]);
        let comp = Composition::Add {
            shared: s.id("s").unwrap(),
            domain: vec![s.id("d").unwrap()],
            u: vec![s.id("u").unwrap()],
        };
        assert_eq!(eval(&s, &comp), vec![1.5, 1.0]);
    }

    #[test]
    fn add_with_zero_domain_is_shared() {
        let s = store_with(&[
            ("s", Tensor::vector(vec![1.0, 2.0])),
            ("d", Tensor::vector(vec![0.0, 0.0])),
            ("u", Tensor::scalar(3.7)),
        ]);
        let comp = Composition::Add {
            shared: s.id("s").unwrap(),
            domain: vec![s.id("d").unwrap()],
            u: vec![s.id("u").unwrap()],
        };
        assert_eq!(eval(&s, &comp), vec![1.0, 2.0]);
    }

    #[test]
    fn addmul_example() {
        let s = store_with(&[
            ("s", Tensor::vector(vec![1.0, 2.0])),
            ("a", Tensor::vector(vec![1.0, 1.0])),
            ("m", Tensor::vector(vec![0.5, 0.5])),
            ("u", Tensor::scalar(0.0)),
            ("v", Tensor::scalar(0.0)),
        ]);
        let comp = Composition::AddMul {
            shared: s.id("s").unwrap(),
            add: vec![s.id("a").unwrap()],
            mul: vec![s.id("m").unwrap()],
            u: vec![s.id("u").unwrap()],
            v: vec![s.id("v").unwrap()],
        };
        assert_eq!(eval(&s, &comp), vec![2.5, 4.0]);
    }

    #[test]
    fn unknown_domain_is_reported() {
        let s = store_with(&[("s", Tensor::vector(vec![1.0])), ("d", Tensor::vector(vec![1.0])), ("u", Tensor::scalar(0.0))]);
        let comp = Composition::Add {
            shared: s.id("s").unwrap(),
            domain: vec![s.id("d").unwrap()],
            u: vec![s.id("u").unwrap()],
        };
        let mut tape = Tape::new();
        assert_eq!(compose(&mut tape, &s, &comp, 3, 0), Err(ReparamError::UnknownDomain(3)));
    }

    #[test]
    fn malopa_concatenation() {
        assert_eq!(malopa_embed(&[0.3, -0.2], &[0.9]), vec![0.3, -0.2, 0.9]);
        assert_eq!(malopa_embed(&[0.3, -0.2], &[0.0, 0.0]), vec![0.3, -0.2, 0.0, 0.0]);
        let a = malopa_embed(&[0.3, -0.2], &[0.1, 0.2]);
        let b = malopa_embed(&[0.3, -0.2], &[0.4, 0.5]);
        assert_eq!(a[..2], b[..2]);
        assert!(a[2..].iter().zip(&b[2..]).all(|(x, y)| x != y));
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("ADDMUL".parse::<Strategy>().unwrap(), Strategy::AddMul);
        assert!("hyper".parse::<Strategy>().is_err());
    }
}
