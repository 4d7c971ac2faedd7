use alloc::vec;
use alloc::vec::Vec;

use super::{DiffError, Gradients, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Pick(Var, usize),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    AppendCols(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, which
/// is a topological order of the computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    bindings: Vec<(ParamId, Var)>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn log_softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(x.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    x.iter().map(|v| v - lse).collect()
}

fn add_into(acc: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = acc.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, DiffError> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(DiffError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> DiffError {
        DiffError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Records a leaf whose gradient is simply never read.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.leaf(value)
    }

    /// Binds a stored parameter as a leaf. Binding the same id twice returns
    /// the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, DiffError> {
        if let Some(Some(v)) = self.bound.get(id.0) {
            return Ok(*v);
        }
        let v = self.leaf(store.value(id).clone())?;
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
        self.bindings.push((id, v));
        Ok(v)
    }

    /// Adds the gradients of all bound parameters into `grads`.
    pub fn param_grads(&self, grads: &mut Gradients) {
        for &(id, v) in &self.bindings {
            if let Some(g) = self.grad(v) {
                grads.accumulate(id, g);
            }
        }
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        self.push(out, op, name)
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a one-element tensor `s` to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        if !self.value(s).is_scalar() {
            return Err(self.shape_err("add_scalar", a, s));
        }
        let k = self.value(s).data()[0];
        self.unary(a, "add_scalar", |x| x + k, Op::AddScalar(a, s))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        self.unary(a, "scale", |x| x * k, Op::Scale(a, k))
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Result<Var, DiffError> {
        if !self.value(s).is_scalar() {
            return Err(self.shape_err("scale_by", s, a));
        }
        let k = self.value(s).data()[0];
        self.unary(a, "scale_by", |x| x * k, Op::ScaleBy(s, a))
    }

    /// `[m,k] x [k]` or `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (j, &aij) in row.iter().enumerate() {
                if aij == 0.0 {
                    continue;
                }
                let brow = &bd[j * n..(j + 1) * n];
                for (o, &b) in dst.iter_mut().zip(brow) {
                    *o += aij * b;
                }
            }
        }
        let shape = if tb.is_vector() { vec![m] } else { vec![m, n] };
        let out = Tensor::new(shape, out).expect("matmul shape");
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(self.shape_err("transpose", a, a));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let d = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let out = Tensor::matrix(c, r, out).expect("transpose shape");
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, "tanh", libm::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, "exp", libm::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, "log", libm::log, Op::Log(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if !ta.is_vector() {
            return Err(self.shape_err("softmax", a, a));
        }
        let data = log_softmax_values(ta.data()).into_iter().map(libm::exp).collect();
        self.push(Tensor::vector(data), Op::Softmax(a), "softmax")
    }

    /// Fused, overflow-safe `log(softmax(a))`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if !ta.is_vector() {
            return Err(self.shape_err("log_softmax", a, a));
        }
        let data = log_softmax_values(ta.data());
        self.push(Tensor::vector(data), Op::LogSoftmax(a), "log_softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Selects one entry of a vector as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if index >= ta.len() {
            return Err(DiffError::IndexOutOfRange { index, len: ta.len() });
        }
        let v = ta.data()[index];
        self.push(Tensor::scalar(v), Op::Pick(a, index), "pick")
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if !t.is_vector() {
                return Err(self.shape_err("concat", p, p));
            }
            data.extend_from_slice(t.data());
        }
        if parts.is_empty() {
            return Err(DiffError::Empty("concat"));
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), "concat")
    }

    /// Contiguous sub-vector `[start, start + len)` of the flattened value.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if start + len > ta.len() || len == 0 {
            return Err(DiffError::IndexOutOfRange {
                index: start + len,
                len: ta.len(),
            });
        }
        let data = ta.data()[start..start + len].to_vec();
        self.push(Tensor::vector(data), Op::Slice(a, start), "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let out = Tensor::new(shape.to_vec(), ta.data().to_vec()).ok_or_else(|| DiffError::ShapeMismatch {
            op: "reshape",
            left: ta.shape().to_vec(),
            right: shape.to_vec(),
        })?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Row lookup into a `[rows, cols]` table; the result is `[ids.len(), cols]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(self.shape_err("gather_rows", table, table));
        }
        if ids.is_empty() {
            return Err(DiffError::Empty("gather_rows"));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(DiffError::IndexOutOfRange { index: id, len: rows });
            }
            data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let out = Tensor::matrix(ids.len(), cols, data).expect("gather shape");
        self.push(out, Op::GatherRows(table, ids.to_vec()), "gather_rows")
    }

    /// Appends the same vector `v` to every row of matrix `m`.
    pub fn append_cols(&mut self, m: Var, v: Var) -> Result<Var, DiffError> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.shape().len() != 2 || !tv.is_vector() {
            return Err(self.shape_err("append_cols", m, v));
        }
        let (rows, cols, p) = (tm.rows(), tm.cols(), tv.len());
        let mut data = Vec::with_capacity(rows * (cols + p));
        for r in 0..rows {
            data.extend_from_slice(&tm.data()[r * cols..(r + 1) * cols]);
            data.extend_from_slice(tv.data());
        }
        let out = Tensor::matrix(rows, cols + p, data).expect("append shape");
        self.push(out, Op::AppendCols(m, v), "append_cols")
    }

    /// Reverse pass from a scalar. Gradients of every ancestor are added to
    /// their accumulators, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if !self.value(loss).is_scalar() {
            return Err(DiffError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut tmp: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        tmp[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                slot @ None => *slot = Some(g.clone()),
            }
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut tmp);
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&self, node: &Node, g: &[f64], tmp: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(&mut tmp[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                add_into(&mut tmp[b.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                add_into(&mut tmp[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                add_into(&mut tmp[b.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                add_into(&mut tmp[a.0], g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                add_into(&mut tmp[b.0], g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddScalar(a, s) => {
                add_into(&mut tmp[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let total: f64 = g.iter().sum();
                add_into(&mut tmp[s.0], 1, |d| d[0] += total);
            }
            Op::Scale(a, k) => {
                add_into(&mut tmp[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * k));
            }
            Op::ScaleBy(s, a) => {
                let k = self.val(*s)[0];
                let va = self.val(*a);
                let ds: f64 = g.iter().zip(va).map(|(g, x)| g * x).sum();
                add_into(&mut tmp[s.0], 1, |d| d[0] += ds);
                add_into(&mut tmp[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * k));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let (ad, bd) = (ta.data(), tb.data());
                add_into(&mut tmp[a.0], m * k, |da| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for j in 0..k {
                            let brow = &bd[j * n..(j + 1) * n];
                            da[i * k + j] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                add_into(&mut tmp[b.0], k * n, |db| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for j in 0..k {
                            let aij = ad[i * k + j];
                            if aij == 0.0 {
                                continue;
                            }
                            for (d, x) in db[j * n..(j + 1) * n].iter_mut().zip(gi) {
                                *d += aij * x;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let ta = &self.nodes[a.0].value;
                let (r, c) = (ta.rows(), ta.cols());
                add_into(&mut tmp[a.0], r * c, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Tanh(a) => add_into(&mut tmp[a.0], g.len(), |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::Sigmoid(a) => add_into(&mut tmp[a.0], g.len(), |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Exp(a) => add_into(&mut tmp[a.0], g.len(), |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * out[k];
                }
            }),
            Op::Log(a) => {
                let va = self.val(*a);
                add_into(&mut tmp[a.0], g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / va[k];
                    }
                })
            }
            Op::Softmax(a) => {
                let dot: f64 = g.iter().zip(out).map(|(g, y)| g * y).sum();
                add_into(&mut tmp[a.0], g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += out[k] * (g[k] - dot);
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let total: f64 = g.iter().sum();
                add_into(&mut tmp[a.0], g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] - libm::exp(out[k]) * total;
                    }
                })
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                add_into(&mut tmp[a.0], n, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                let share = g[0] / n as f64;
                add_into(&mut tmp[a.0], n, |d| d.iter_mut().for_each(|d| *d += share));
            }
            Op::Pick(a, idx) => {
                let n = self.nodes[a.0].value.len();
                add_into(&mut tmp[a.0], n, |d| d[*idx] += g[0]);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    let gs = &g[offset..offset + n];
                    add_into(&mut tmp[p.0], n, |d| d.iter_mut().zip(gs).for_each(|(d, g)| *d += g));
                    offset += n;
                }
            }
            Op::Slice(a, start) => {
                let n = self.nodes[a.0].value.len();
                add_into(&mut tmp[a.0], n, |d| {
                    d[*start..*start + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += g)
                });
            }
            Op::Reshape(a) => {
                add_into(&mut tmp[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::GatherRows(t, ids) => {
                let tt = &self.nodes[t.0].value;
                let cols = tt.cols();
                add_into(&mut tmp[t.0], tt.len(), |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            d[id * cols + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::AppendCols(m, v) => {
                let tm = &self.nodes[m.0].value;
                let (rows, cols) = (tm.rows(), tm.cols());
                let p = self.nodes[v.0].value.len();
                let width = cols + p;
                add_into(&mut tmp[m.0], rows * cols, |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] += g[r * width + c];
                        }
                    }
                });
                add_into(&mut tmp[v.0], p, |d| {
                    for r in 0..rows {
                        for c in 0..p {
                            d[c] += g[r * width + cols + c];
                        }
                    }
                });
            }
        }
    }
}
