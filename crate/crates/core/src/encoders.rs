//! Message encoder, thread encoder and predictor heads, expressed as tape
//! operations over already-bound parameter variables.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Tape, Tensor, Var};

/// Model widths: word embeddings (`word`), message embeddings (`message`),
/// thread hidden state (`hidden`) and task embeddings (`task`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub word: usize,
    pub message: usize,
    pub hidden: usize,
    pub task: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            word: 64,
            message: 64,
            hidden: 64,
            task: 8,
        }
    }
}

impl Dims {
    pub fn uniform(d: usize, task: usize) -> Self {
        Self {
            word: d,
            message: d,
            hidden: d,
            task,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input,
    Output,
    Forget,
    Cell,
}

impl Gate {
    pub const ORDER: [Gate; 4] = [Gate::Input, Gate::Output, Gate::Forget, Gate::Cell];
}

/// Layout of the flat recurrent parameter vector.
///
/// Gates appear in the order input, output, forget, cell. Each gate block is
/// a row-major `hidden x (input + hidden)` weight matrix acting on
/// `[x_t; h_{t-1}]`, immediately followed by its `hidden` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecurrentLayout {
    pub input: usize,
    pub hidden: usize,
}

impl RecurrentLayout {
    pub fn new(input: usize, hidden: usize) -> Self {
        Self { input, hidden }
    }

    pub fn block_len(&self) -> usize {
        self.hidden * (self.input + self.hidden) + self.hidden
    }

    pub fn len(&self) -> usize {
        4 * self.block_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weight_offset(&self, gate: Gate) -> usize {
        let g = Gate::ORDER.iter().position(|&x| x == gate).expect("gate");
        g * self.block_len()
    }

    pub fn bias_offset(&self, gate: Gate) -> usize {
        self.weight_offset(gate) + self.hidden * (self.input + self.hidden)
    }

    /// Initial vector: weights from `sample`, zero biases except the forget
    /// gate, which starts at `forget_bias`.
    pub fn init(&self, mut sample: impl FnMut() -> f64, forget_bias: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for gate in Gate::ORDER {
            let w = self.weight_offset(gate);
            for x in &mut out[w..w + self.hidden * (self.input + self.hidden)] {
                *x = sample();
            }
            if gate == Gate::Forget {
                let b = self.bias_offset(gate);
                out[b..b + self.hidden].iter_mut().for_each(|x| *x = forget_bias);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MessageEncoderVars {
    /// Attention scorer weights, `[in]`.
    pub score_w: Var,
    /// Attention scorer bias, `[1]`.
    pub score_b: Var,
    /// Projection `[h, in]`.
    pub proj_w: Var,
    pub proj_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MessageEncoding {
    pub output: Var,
    /// Attention weights over tokens; `None` under mean pooling.
    pub weights: Option<Var>,
}

/// Attentive bag-of-words pooling followed by `tanh(W x + b)`.
///
/// `rows` holds one input vector per token, `[tokens, in]`. Without
/// attention the pooled vector is the unweighted mean of the rows.
pub fn encode_message(tape: &mut Tape, enc: &MessageEncoderVars, rows: Var, use_attention: bool) -> Result<MessageEncoding, DiffError> {
    let k = tape.value(rows).rows();
    if k == 0 {
        return Err(DiffError::Empty("encode_message"));
    }
    let (pooled_weights, weights) = if use_attention {
        let scores = tape.matmul(rows, enc.score_w)?;
        let scores = tape.add_scalar(scores, enc.score_b)?;
        let w = tape.softmax(scores)?;
        (w, Some(w))
    } else {
        (tape.constant(Tensor::vector(vec![1.0 / k as f64; k]))?, None)
    };
    let rows_t = tape.transpose(rows)?;
    let pooled = tape.matmul(rows_t, pooled_weights)?;
    let proj = tape.matmul(enc.proj_w, pooled)?;
    let proj = tape.add(proj, enc.proj_b)?;
    let output = tape.tanh(proj)?;
    Ok(MessageEncoding { output, weights })
}

/// Gate weights `[hidden, input + hidden]` and biases `[hidden]`, in
/// [`Gate::ORDER`].
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub gates: [(Var, Var); 4],
    pub layout: RecurrentLayout,
}

/// Views a flat recurrent vector as per-gate matrices and biases.
pub fn unpack_recurrent(tape: &mut Tape, theta: Var, layout: RecurrentLayout) -> Result<LstmVars, DiffError> {
    let len = tape.value(theta).len();
    if len != layout.len() {
        return Err(DiffError::ShapeMismatch {
            op: "unpack_recurrent",
            left: vec![len],
            right: vec![layout.len()],
        });
    }
    let cols = layout.input + layout.hidden;
    let mut gates = [(theta, theta); 4];
    for (slot, gate) in gates.iter_mut().zip(Gate::ORDER) {
        let w = tape.slice(theta, layout.weight_offset(gate), layout.hidden * cols)?;
        let w = tape.reshape(w, &[layout.hidden, cols])?;
        let b = tape.slice(theta, layout.bias_offset(gate), layout.hidden)?;
        *slot = (w, b);
    }
    Ok(LstmVars { gates, layout })
}

/// Unidirectional LSTM over message embeddings from a zero state; returns
/// the hidden state after each message.
pub fn encode_thread(tape: &mut Tape, inputs: &[Var], lstm: &LstmVars) -> Result<Vec<Var>, DiffError> {
    if inputs.is_empty() {
        return Err(DiffError::Empty("encode_thread"));
    }
    let hidden = lstm.layout.hidden;
    let mut h = tape.constant(Tensor::zeros(&[hidden]))?;
    let mut c = h;
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let xin = tape.value(x).len();
        if xin != lstm.layout.input {
            return Err(DiffError::ShapeMismatch {
                op: "encode_thread",
                left: vec![xin],
                right: vec![lstm.layout.input],
            });
        }
        let z = tape.concat(&[x, h])?;
        let mut acts = [z; 4];
        for (a, (w, b)) in acts.iter_mut().zip(lstm.gates.iter()) {
            let pre = tape.matmul(*w, z)?;
            *a = tape.add(pre, *b)?;
        }
        let [pi, po, pf, pc] = acts;
        let i = tape.sigmoid(pi)?;
        let o = tape.sigmoid(po)?;
        let f = tape.sigmoid(pf)?;
        let g = tape.tanh(pc)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        h = tape.mul(o, tc)?;
        out.push(h);
    }
    Ok(out)
}

/// Thread encoder with the recurrence removed: each message embedding goes
/// through its own `tanh(W x + b)` of width `hidden`.
pub fn encode_thread_flat(tape: &mut Tape, inputs: &[Var], w: Var, b: Var) -> Result<Vec<Var>, DiffError> {
    if inputs.is_empty() {
        return Err(DiffError::Empty("encode_thread"));
    }
    inputs
        .iter()
        .map(|&x| {
            let pre = tape.matmul(w, x)?;
            let pre = tape.add(pre, b)?;
            tape.tanh(pre)
        })
        .collect()
}

/// Two-layer predictor: `W2 tanh(W1 e + b1) + b2`, producing logits over a
/// task's labels.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn head_logits(tape: &mut Tape, head: &HeadVars, e: Var) -> Result<Var, DiffError> {
    let a = tape.matmul(head.w1, e)?;
    let a = tape.add(a, head.b1)?;
    let a = tape.tanh(a)?;
    let z = tape.matmul(head.w2, a)?;
    tape.add(z, head.b2)
}

pub fn head_distribution(tape: &mut Tape, head: &HeadVars, e: Var) -> Result<Var, DiffError> {
    let z = head_logits(tape, head, e)?;
    tape.softmax(z)
}

/// Length-normalized negative log-likelihood of the true labels,
/// `(1/|x|) sum_i -log p(y_i | e_i)`.
pub fn thread_loss(tape: &mut Tape, embeddings: &[Var], labels: &[usize], head: &HeadVars) -> Result<Var, DiffError> {
    if embeddings.len() != labels.len() {
        return Err(DiffError::ShapeMismatch {
            op: "thread_loss",
            left: vec![embeddings.len()],
            right: vec![labels.len()],
        });
    }
    if embeddings.is_empty() {
        return Err(DiffError::Empty("thread_loss"));
    }
    let mut picks = Vec::with_capacity(labels.len());
    for (&e, &y) in embeddings.iter().zip(labels) {
        let z = head_logits(tape, head, e)?;
        let lp = tape.log_softmax(z)?;
        picks.push(tape.pick(lp, y)?);
    }
    let all = tape.concat(&picks)?;
    let mean = tape.mean(all)?;
    tape.scale(mean, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_length() {
        let l = RecurrentLayout::new(3, 2);
        assert_eq!(l.len(), 4 * (2 * 5 + 2));
        assert_eq!(l.bias_offset(Gate::Input), 10);
        assert_eq!(l.weight_offset(Gate::Output), 12);
        let v = l.init(|| 0.5, 1.0);
        assert_eq!(&v[l.bias_offset(Gate::Forget)..l.bias_offset(Gate::Forget) + 2], &[1.0, 1.0]);
        assert_eq!(&v[l.bias_offset(Gate::Cell)..l.bias_offset(Gate::Cell) + 2], &[0.0, 0.0]);
    }

    #[test]
    fn wrong_theta_length_is_rejected() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::vector(vec![0.0; 5])).unwrap();
        assert!(unpack_recurrent(&mut tape, theta, RecurrentLayout::new(1, 1)).is_err());
    }
}
