//! Tape-based reverse-mode differentiation over [`Tensor`]s.

use rand::Rng;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Sum(Var),
    Blend {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
    AttnScores {
        mem: Var,
        query: Var,
    },
    AttnContext {
        weights: Var,
        mem: Var,
    },
    LstmCell {
        gates: Var,
        c_prev: Var,
        acts: Vec<T>,
        tanh_c: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. A primitive keeps its backward bookkeeping only when one of its inputs
/// requires a gradient; otherwise it is stored as a plain value.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    training: bool,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zero when `v` does not influence the loss.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient matches shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape in training mode applies dropout; an inference tape does not.
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            false,
            bv.data(),
            false,
            T::zero(),
            &mut out,
        );
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = if av.len() == bv.len() && av.cols() == bv.cols() {
            false
        } else if bv.rows() == 1 && bv.cols() == av.cols() {
            true
        } else {
            return Err(mismatch("add", av, bv));
        };
        let mut out = av.clone();
        let cols = av.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += if broadcast { bv.data()[i % cols] } else { bv.data()[i] };
        }
        self.push("add", out, Op::Add { a, b, broadcast }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.cols() != bv.cols() {
            return Err(mismatch("sub", av, bv));
        }
        let mut out = av.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o -= y;
        }
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.cols() != bv.cols() {
            return Err(mismatch("mul", av, bv));
        }
        let mut out = av.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= y;
        }
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(mismatch("concat", self.value(*first), pv));
            }
            total += pv.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `[start, start + len)` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if len == 0 || start + len > av.cols() {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("columns {start}..{} of {:?}", start + len, av.shape()),
            });
        }
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(rows, len, out)?;
        self.push("slice", value, Op::SliceCols { a, start }, &[a])
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding_gather",
                msg: "no indices".into(),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_gather",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::matrix(ids.len(), cols, out)?;
        self.push(
            "embedding_gather",
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Row-wise softmax. With `valid`, row `r` only spans its first
    /// `valid[r]` columns and the rest are exactly zero.
    pub fn softmax(&mut self, a: Var, valid: Option<&[usize]>) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        if let Some(v) = valid {
            if v.len() != rows || v.iter().any(|&n| n == 0 || n > cols) {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: format!("bad valid lengths for {} x {}", rows, cols),
                });
            }
        }
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let n = valid.map_or(cols, |v| v[r]);
            let x = &av.row(r)[..n];
            let max = x.iter().copied().fold(T::neg_infinity(), T::max);
            let o = &mut out[r * cols..r * cols + n];
            let mut total = T::zero();
            for (oi, &xi) in o.iter_mut().zip(x) {
                *oi = (xi - max).exp();
                total += *oi;
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.clone();
        let cols = av.cols();
        for row in out.data_mut().chunks_mut(cols) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
    /// Identity on an inference tape or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = self.value(a).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push("dropout", out, Op::Dropout { a, mask }, &[a])
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!(
                    "{} targets / {} weights for {} rows",
                    targets.len(),
                    weights.len(),
                    rows
                ),
            });
        }
        let mut probs = vec![T::zero(); rows * cols];
        let mut loss = T::zero();
        for r in 0..rows {
            let t = targets[r];
            if t >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: cols,
                });
            }
            let x = lv.row(r);
            let lse = log_sum_exp(x);
            for (p, &xi) in probs[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *p = (xi - lse).exp();
            }
            loss += weights[r] * (lse - x[t]);
        }
        let value = Tensor::scalar(loss);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: T = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Row `r` is taken from `a` when `take_a[r]`, otherwise from `b`.
    pub fn blend(&mut self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || take_a.len() != av.rows() {
            return Err(mismatch("blend", av, bv));
        }
        let cols = av.cols();
        let mut out = bv.clone();
        for (r, &t) in take_a.iter().enumerate() {
            if t {
                out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(av.row(r));
            }
        }
        self.push(
            "blend",
            out,
            Op::Blend {
                a,
                b,
                take_a: take_a.to_vec(),
            },
            &[a, b],
        )
    }

    /// Dot-product scores of each query row against every memory slot.
    ///
    /// `mem` is `[Bm, T * D]` (slot `t` occupies columns `t*D..(t+1)*D`),
    /// `query` is `[B, D]` with `Bm == B` or `Bm == 1` (shared memory).
    /// Output is `[B, T]`.
    pub fn attention_scores(&mut self, mem: Var, query: Var) -> Result<Var> {
        let (mv, qv) = (self.value(mem), self.value(query));
        let (b, d) = (qv.rows(), qv.cols());
        let bm = mv.rows();
        if (bm != b && bm != 1) || mv.cols() % d != 0 {
            return Err(mismatch("attention_scores", mv, qv));
        }
        let t = mv.cols() / d;
        let mut out = vec![T::zero(); b * t];
        if bm == 1 {
            T::gemm(
                b,
                d,
                t,
                T::one(),
                qv.data(),
                false,
                mv.data(),
                true,
                T::zero(),
                &mut out,
            );
        } else {
            for r in 0..b {
                T::gemm(
                    1,
                    d,
                    t,
                    T::one(),
                    qv.row(r),
                    false,
                    mv.row(r),
                    true,
                    T::zero(),
                    &mut out[r * t..(r + 1) * t],
                );
            }
        }
        let value = Tensor::matrix(b, t, out)?;
        self.push("attention_scores", value, Op::AttnScores { mem, query }, &[mem, query])
    }

    /// Weighted sum of memory slots: `[B, T] x [Bm, T * D] -> [B, D]`.
    pub fn attention_context(&mut self, weights: Var, mem: Var) -> Result<Var> {
        let (wv, mv) = (self.value(weights), self.value(mem));
        let (b, t) = (wv.rows(), wv.cols());
        let bm = mv.rows();
        if (bm != b && bm != 1) || mv.cols() % t != 0 {
            return Err(mismatch("attention_context", wv, mv));
        }
        let d = mv.cols() / t;
        let mut out = vec![T::zero(); b * d];
        if bm == 1 {
            T::gemm(
                b,
                t,
                d,
                T::one(),
                wv.data(),
                false,
                mv.data(),
                false,
                T::zero(),
                &mut out,
            );
        } else {
            for r in 0..b {
                T::gemm(
                    1,
                    t,
                    d,
                    T::one(),
                    wv.row(r),
                    false,
                    mv.row(r),
                    false,
                    T::zero(),
                    &mut out[r * d..(r + 1) * d],
                );
            }
        }
        let value = Tensor::matrix(b, d, out)?;
        self.push(
            "attention_context",
            value,
            Op::AttnContext { weights, mem },
            &[weights, mem],
        )
    }

    /// Fused LSTM cell update.
    ///
    /// `gates` is `[B, 4H]` of pre-activations ordered input, forget,
    /// candidate, output; `c_prev` is `[B, H]`. Returns `[B, 2H]` holding the
    /// new hidden state followed by the new cell state.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (gv, cv) = (self.value(gates), self.value(c_prev));
        let (b, h) = (cv.rows(), cv.cols());
        if gv.rows() != b || gv.cols() != 4 * h {
            return Err(mismatch("lstm_cell", gv, cv));
        }
        let mut acts = gv.data().to_vec();
        let mut tanh_c = vec![T::zero(); b * h];
        let mut out = vec![T::zero(); b * 2 * h];
        for r in 0..b {
            let a = &mut acts[r * 4 * h..(r + 1) * 4 * h];
            for (j, v) in a.iter_mut().enumerate() {
                *v = if (2 * h..3 * h).contains(&j) {
                    v.tanh()
                } else {
                    sigmoid(*v)
                };
            }
            let cp = cv.row(r);
            let o = &mut out[r * 2 * h..(r + 1) * 2 * h];
            for j in 0..h {
                let c = a[h + j] * cp[j] + a[j] * a[2 * h + j];
                let tc = c.tanh();
                tanh_c[r * h + j] = tc;
                o[j] = a[3 * h + j] * tc;
                o[h + j] = c;
            }
        }
        let value = Tensor::matrix(b, 2 * h, out)?;
        self.push(
            "lstm_cell",
            value,
            Op::LstmCell {
                gates,
                c_prev,
                acts,
                tanh_c,
            },
            &[gates, c_prev],
        )
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// that requires one; leaves off every path to `loss` get zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.grad_buf(grads, *a) {
                    T::gemm(m, n, k, T::one(), g, false, bv.data(), true, T::one(), ga);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    T::gemm(k, m, n, T::one(), av.data(), true, g, false, T::one(), gb);
                }
            }
            Op::Add { a, b, broadcast } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    if *broadcast {
                        let cols = gb.len();
                        for row in g.chunks(cols) {
                            gb.iter_mut().zip(row).for_each(|(x, &d)| *x += d);
                        }
                    } else {
                        gb.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * *s);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if let Some(gp) = self.grad_buf(grads, p) {
                        for (r, row) in gp.chunks_mut(cols).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + cols];
                            row.iter_mut().zip(src).for_each(|(x, &d)| *x += d);
                        }
                    }
                    offset += cols;
                }
            }
            Op::SliceCols { a, start } => {
                let len = node.value.cols();
                let cols = self.value(*a).cols();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (r, src) in g.chunks(len).enumerate() {
                        let dst = &mut ga[r * cols + start..r * cols + start + len];
                        dst.iter_mut().zip(src).for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let cols = node.value.cols();
                if let Some(gt) = self.grad_buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * cols..(id + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = node.value.cols();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for r in 0..node.value.rows() {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.cols();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for r in 0..node.value.rows() {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let total: T = gr.iter().copied().sum();
                        for j in 0..cols {
                            ga[r * cols + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * mask[i];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let cols = self.value(*logits).cols();
                let d = g[0];
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let scale = d * w;
                        for j in 0..cols {
                            gl[r * cols + j] += scale * probs[r * cols + j];
                        }
                        gl[r * cols + t] -= scale;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Blend { a, b, take_a } => {
                let cols = node.value.cols();
                for (v, want) in [(*a, true), (*b, false)] {
                    if let Some(gv) = self.grad_buf(grads, v) {
                        for (r, &t) in take_a.iter().enumerate() {
                            if t == want {
                                let dst = &mut gv[r * cols..(r + 1) * cols];
                                dst.iter_mut()
                                    .zip(&g[r * cols..(r + 1) * cols])
                                    .for_each(|(x, &d)| *x += d);
                            }
                        }
                    }
                }
            }
            Op::AttnScores { mem, query } => {
                let (mv, qv) = (self.value(*mem), self.value(*query));
                let (b, d) = (qv.rows(), qv.cols());
                let t = node.value.cols();
                let shared = mv.rows() == 1;
                if let Some(gq) = self.grad_buf(grads, *query) {
                    if shared {
                        T::gemm(b, t, d, T::one(), g, false, mv.data(), false, T::one(), gq);
                    } else {
                        for r in 0..b {
                            T::gemm(
                                1,
                                t,
                                d,
                                T::one(),
                                &g[r * t..(r + 1) * t],
                                false,
                                mv.row(r),
                                false,
                                T::one(),
                                &mut gq[r * d..(r + 1) * d],
                            );
                        }
                    }
                }
                if let Some(gm) = self.grad_buf(grads, *mem) {
                    if shared {
                        T::gemm(t, b, d, T::one(), g, true, qv.data(), false, T::one(), gm);
                    } else {
                        for r in 0..b {
                            T::gemm(
                                t,
                                1,
                                d,
                                T::one(),
                                &g[r * t..(r + 1) * t],
                                true,
                                qv.row(r),
                                false,
                                T::one(),
                                &mut gm[r * t * d..(r + 1) * t * d],
                            );
                        }
                    }
                }
            }
            Op::AttnContext { weights, mem } => {
                let (wv, mv) = (self.value(*weights), self.value(*mem));
                let (b, t) = (wv.rows(), wv.cols());
                let d = node.value.cols();
                let shared = mv.rows() == 1;
                if let Some(gw) = self.grad_buf(grads, *weights) {
                    if shared {
                        T::gemm(b, d, t, T::one(), g, false, mv.data(), true, T::one(), gw);
                    } else {
                        for r in 0..b {
                            T::gemm(
                                1,
                                d,
                                t,
                                T::one(),
                                &g[r * d..(r + 1) * d],
                                false,
                                mv.row(r),
                                true,
                                T::one(),
                                &mut gw[r * t..(r + 1) * t],
                            );
                        }
                    }
                }
                if let Some(gm) = self.grad_buf(grads, *mem) {
                    if shared {
                        T::gemm(t, b, d, T::one(), wv.data(), true, g, false, T::one(), gm);
                    } else {
                        for r in 0..b {
                            T::gemm(
                                t,
                                1,
                                d,
                                T::one(),
                                wv.row(r),
                                true,
                                &g[r * d..(r + 1) * d],
                                false,
                                T::one(),
                                &mut gm[r * t * d..(r + 1) * t * d],
                            );
                        }
                    }
                }
            }
            Op::LstmCell {
                gates,
                c_prev,
                acts,
                tanh_c,
            } => {
                let cp = self.value(*c_prev);
                let (b, h) = (cp.rows(), cp.cols());
                let one = T::one();
                let mut dgates = vec![T::zero(); b * 4 * h];
                let mut dcp = vec![T::zero(); b * h];
                for r in 0..b {
                    let a = &acts[r * 4 * h..(r + 1) * 4 * h];
                    let gr = &g[r * 2 * h..(r + 1) * 2 * h];
                    let cpr = cp.row(r);
                    for j in 0..h {
                        let (i, f, c_hat, o) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                        let tc = tanh_c[r * h + j];
                        let dh = gr[j];
                        let dc = gr[h + j] + dh * o * (one - tc * tc);
                        let dg = &mut dgates[r * 4 * h..(r + 1) * 4 * h];
                        dg[j] = dc * c_hat * i * (one - i);
                        dg[h + j] = dc * cpr[j] * f * (one - f);
                        dg[2 * h + j] = dc * i * (one - c_hat * c_hat);
                        dg[3 * h + j] = dh * tc * o * (one - o);
                        dcp[r * h + j] = dc * f;
                    }
                }
                if let Some(gg) = self.grad_buf(grads, *gates) {
                    gg.iter_mut().zip(&dgates).for_each(|(x, &d)| *x += d);
                }
                if let Some(gc) = self.grad_buf(grads, *c_prev) {
                    gc.iter_mut().zip(&dcp).for_each(|(x, &d)| *x += d);
                }
            }
        }
    }
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let total: T = x.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}
