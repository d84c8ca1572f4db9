//! Define-by-run reverse-mode differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation as a node. Values are row-major
//! `rows x cols` buffers of `f64`; row vectors (`1 x n`) are the common case.
//! Parameters are not copied into the tape: a parameter node borrows its
//! value from the [`ParameterStore`] the tape was opened on.

mod cells;
pub mod check;
mod params;

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::math;

pub use cells::{Cell, CellKind, CellState, Linear, LstmCell, RhnCell};
pub use params::{adam_step, AdamConfig, Gradients, Init, ParamId, ParameterStore, RngStream};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("backward root must be a scalar, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("gradient buffers do not match the parameter store")]
    MissingGradient,
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(alloc::string::String),
}

pub type Result<T> = core::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Concat(Var, Var),
    Embed(Var, usize),
    Slice(Var, usize),
    Sum(Var),
    SoftmaxCe(Var, usize),
}

impl Op {
    /// Short tag naming the producing operation.
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Concat(..) => "concat",
            Op::Embed(..) => "embed",
            Op::Slice(..) => "slice",
            Op::Sum(_) => "sum",
            Op::SoftmaxCe(..) => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    /// Empty for parameter nodes.
    value: Vec<f64>,
    /// Softmax probabilities for cross-entropy nodes.
    aux: Vec<f64>,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        match n.op {
            Op::Param(id) => self.store.value(id),
            _ => &n.value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            aux: Vec::new(),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant or input leaf. Leaves still receive gradients.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf value has wrong length");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn row(&mut self, value: &[f64]) -> Var {
        self.leaf(1, value.len(), value.to_vec())
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(rows, cols, vec![0.0; rows * cols])
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let (rows, cols) = self.store.shape(id);
        let v = self.push(rows, cols, Vec::new(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (rows, cols) = self.shape(a);
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(rows, cols, value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: (r, k),
                rhs: (k2, c),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for kk in 0..k {
                let x = av[i * k + kk];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[kk * c..(kk + 1) * c];
                for (o, &w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        Ok(self.push(r, c, out, Op::MatMul(a, b)))
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb || !(ra == rb || rb == 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: (ra, ca),
                rhs: (rb, cb),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let out = av
            .iter()
            .enumerate()
            .map(|(i, &x)| x + if rb == 1 { bv[i % cb] } else { bv[i] })
            .collect();
        Ok(self.push(ra, ca, out, Op::Add(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(r, c, out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(r, c, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), math::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), math::sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), math::exp)
    }

    /// Concatenate along the column axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: (ra, ca),
                rhs: (rb, cb),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(ra, ca + cb, out, Op::Concat(a, b)))
    }

    /// Row `index` of an embedding table, as a `1 x dim` row.
    pub fn embed(&mut self, table: Var, index: usize) -> Result<Var> {
        let (rows, cols) = self.shape(table);
        if index >= rows {
            return Err(AutodiffError::IndexOutOfRange { index, size: rows });
        }
        let out = self.value(table)[index * cols..(index + 1) * cols].to_vec();
        Ok(self.push(1, cols, out, Op::Embed(table, index)))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c || len == 0 {
            return Err(AutodiffError::IndexOutOfRange {
                index: start + len,
                size: c,
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        Ok(self.push(r, len, out, Op::Slice(a, start)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    /// `logsumexp(logits) - logits[target]` for a single row of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if r != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: (r, c),
                rhs: (1, c),
            });
        }
        if target >= c {
            return Err(AutodiffError::IndexOutOfRange { index: target, size: c });
        }
        let (loss, probs) = softmax_ce_value(self.value(logits), target);
        let v = self.push(1, 1, vec![loss], Op::SoftmaxCe(logits, target));
        self.nodes[v.0].aux = probs;
        Ok(v)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<NodeGrads> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (r, k) = self.shape(a);
                    let c = node.cols;
                    let av = self.value(a);
                    let bv = self.value(b);
                    let ga = grad_buf(&mut grads, self, a);
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        for kk in 0..k {
                            let brow = &bv[kk * c..(kk + 1) * c];
                            ga[i * k + kk] += dot(grow, brow);
                        }
                    }
                    let gb = grad_buf(&mut grads, self, b);
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        for kk in 0..k {
                            let x = av[i * k + kk];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &d) in gb[kk * c..(kk + 1) * c].iter_mut().zip(grow) {
                                *o += x * d;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(grad_buf(&mut grads, self, a), &g, 1.0);
                    let (rb, cb) = self.shape(b);
                    let gb = grad_buf(&mut grads, self, b);
                    if rb == 1 && node.rows > 1 {
                        for (i, &d) in g.iter().enumerate() {
                            gb[i % cb] += d;
                        }
                    } else {
                        accumulate(gb, &g, 1.0);
                    }
                }
                Op::Sub(a, b) => {
                    accumulate(grad_buf(&mut grads, self, a), &g, 1.0);
                    accumulate(grad_buf(&mut grads, self, b), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = self.value(a);
                    let bv = self.value(b);
                    for ((o, &d), &y) in grad_buf(&mut grads, self, a).iter_mut().zip(&g).zip(bv) {
                        *o += d * y;
                    }
                    for ((o, &d), &x) in grad_buf(&mut grads, self, b).iter_mut().zip(&g).zip(av) {
                        *o += d * x;
                    }
                }
                Op::Scale(a, s) => accumulate(grad_buf(&mut grads, self, a), &g, s),
                Op::AddScalar(a) => accumulate(grad_buf(&mut grads, self, a), &g, 1.0),
                Op::Tanh(a) => {
                    for ((o, &d), &y) in grad_buf(&mut grads, self, a).iter_mut().zip(&g).zip(&node.value) {
                        *o += d * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    for ((o, &d), &y) in grad_buf(&mut grads, self, a).iter_mut().zip(&g).zip(&node.value) {
                        *o += d * y * (1.0 - y);
                    }
                }
                Op::Exp(a) => {
                    for ((o, &d), &y) in grad_buf(&mut grads, self, a).iter_mut().zip(&g).zip(&node.value) {
                        *o += d * y;
                    }
                }
                Op::Concat(a, b) => {
                    let ca = self.shape(a).1;
                    let cb = self.shape(b).1;
                    let rows = node.rows;
                    let ga = grad_buf(&mut grads, self, a);
                    for i in 0..rows {
                        accumulate(&mut ga[i * ca..(i + 1) * ca], &g[i * (ca + cb)..i * (ca + cb) + ca], 1.0);
                    }
                    let gb = grad_buf(&mut grads, self, b);
                    for i in 0..rows {
                        accumulate(&mut gb[i * cb..(i + 1) * cb], &g[i * (ca + cb) + ca..(i + 1) * (ca + cb)], 1.0);
                    }
                }
                Op::Embed(table, index) => {
                    let cols = node.cols;
                    let gt = grad_buf(&mut grads, self, table);
                    accumulate(&mut gt[index * cols..(index + 1) * cols], &g, 1.0);
                }
                Op::Slice(a, start) => {
                    let c = self.shape(a).1;
                    let len = node.cols;
                    let ga = grad_buf(&mut grads, self, a);
                    for i in 0..node.rows {
                        accumulate(&mut ga[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len], 1.0);
                    }
                }
                Op::Sum(a) => {
                    let d = g[0];
                    for o in grad_buf(&mut grads, self, a).iter_mut() {
                        *o += d;
                    }
                }
                Op::SoftmaxCe(logits, target) => {
                    let d = g[0];
                    let gl = grad_buf(&mut grads, self, logits);
                    for (j, (o, &p)) in gl.iter_mut().zip(&node.aux).enumerate() {
                        let onehot = if j == target { 1.0 } else { 0.0 };
                        *o += d * (p - onehot);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(NodeGrads { grads })
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Vec<f64>>], tape: &Tape<'_>, v: Var) -> &'g mut Vec<f64> {
    let (r, c) = tape.shape(v);
    grads[v.0].get_or_insert_with(|| vec![0.0; r * c])
}

#[inline]
fn accumulate(dst: &mut [f64], src: &[f64], s: f64) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += s * x;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss and softmax probabilities, using max-subtraction.
pub fn softmax_ce_value(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mut argmax = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[argmax] {
            argmax = i;
        }
    }
    let max = logits[argmax];
    let mut probs: Vec<f64> = logits.iter().map(|&x| math::exp(x - max)).collect();
    // log1p over the non-max terms keeps saturated losses accurate.
    let rest: f64 = probs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != argmax)
        .map(|(_, p)| p)
        .sum();
    let z = 1.0 + rest;
    for p in probs.iter_mut() {
        *p /= z;
    }
    let loss = libm::log1p(rest) + (max - logits[target]);
    (loss, probs)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_ce_value(logits, 0).1
}

/// Gradients of one backward sweep, indexed by node.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Add the gradients of every parameter node into `out`.
    pub fn accumulate_params(&self, tape: &Tape<'_>, out: &mut Gradients) {
        for (id, var) in tape.param_vars.iter().enumerate() {
            if let Some(g) = var.and_then(|v| self.get(v)) {
                accumulate(&mut out.grads[id], g, 1.0);
            }
        }
    }
}
