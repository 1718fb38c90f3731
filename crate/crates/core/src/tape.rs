//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only list of nodes. Each node stores its forward
//! value and the primitive that produced it; parents always precede children,
//! so a single reverse sweep propagates adjoints from any output back to the
//! leaves.
//!
//! ```
//! use attnlipkit::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::scalar(3.0));
//! let y = tape.square(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(&tape, x)[(0, 0)], 6.0);
//! ```
//!
//! Besides dense primitives the tape carries the segment operations used for
//! sparse message passing: `gather_rows` (edge-wise lookup of node rows) and
//! `segment_sum` / `segment_softmax` / `segment_max` over contiguous row
//! ranges (edges grouped by receiving node).

use std::sync::Arc;

use crate::error::{contract, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Exp,
    Ln,
    Sigmoid,
    Relu,
    Tanh,
    LeakyRelu(f64),
    Sqrt,
    Square,
    Neg,
    Abs,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Tanh => x.tanh(),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Neg => -x,
            Unary::Abs => x.abs(),
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            // sqrt'(0) is infinite; the zero subgradient keeps norms of zero rows finite
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Neg => -1.0,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Contiguous row ranges: segment `s` covers rows `offsets[s]..offsets[s + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_offsets(offsets: Vec<usize>) -> Result<Self> {
        if offsets.is_empty() || offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(contract("segment offsets must start at 0 and be non-decreasing"));
        }
        Ok(Self { offsets })
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    DivOrZero(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    MaxAll(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    SegmentSum(Var, Arc<Segments>),
    SegmentSoftmax(Var, Arc<Segments>),
    SegmentMax(Var, Arc<Segments>),
    WeightedAggregate(Var, Var, Arc<Vec<usize>>, Arc<Segments>),
    SoftmaxCrossEntropy(Var, Arc<Vec<(usize, usize)>>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, or zeros when `v` does not influence the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(contract(format!(
            "{what}: cannot broadcast {}x{} with {}x{}",
            a.0, a.1, b.0, b.1
        ))),
    }
}

#[inline]
fn bget(m: &Matrix, i: usize, j: usize) -> f64 {
    let r = if m.rows() == 1 { 0 } else { i };
    let c = if m.cols() == 1 { 0 } else { j };
    m[(r, c)]
}

/// Sums `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let r = if shape.0 == 1 { 0 } else { i };
            let c = if shape.1 == 1 { 0 } else { j };
            out[(r, c)] += g[(i, j)];
        }
    }
    out
}

fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let mut renorm = 0.0;
    for x in row.iter_mut() {
        *x /= sum;
        if *x < 1e-300 {
            *x = 0.0;
        }
        renorm += *x;
    }
    if renorm != 1.0 {
        for x in row.iter_mut() {
            *x /= renorm;
        }
    }
}

/// Row-wise softmax with max subtraction; weights below `1e-300` flush to zero.
pub(crate) fn softmax_rows_value(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_slice(out.row_mut(i));
    }
    out
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape(va.shape(), vb.shape(), what)?;
        if va.shape() == vb.shape() {
            let data = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
            return Matrix::new(r, c, data);
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let ra = va.row(if va.rows() == 1 { 0 } else { i });
            let rb = vb.row(if vb.rows() == 1 { 0 } else { i });
            match (ra.len() == 1, rb.len() == 1) {
                (false, false) => data.extend(ra.iter().zip(rb).map(|(&x, &y)| f(x, y))),
                (true, false) => data.extend(rb.iter().map(|&y| f(ra[0], y))),
                (false, true) => data.extend(ra.iter().map(|&x| f(x, rb[0]))),
                (true, true) => data.extend(std::iter::repeat_n(f(ra[0], rb[0]), c)),
            }
        }
        Matrix::new(r, c, data)
    }

    /// Elementwise sum with scalar/row/column broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), v))
    }

    /// Like [`Tape::div`] but `x / 0 := 0`, with zero gradient at such entries.
    pub fn div_or_zero(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div_or_zero", |x, y| if y == 0.0 { 0.0 } else { x / y })?;
        Ok(self.push(Op::DivOrZero(a, b), v))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "maximum", f64::max)?;
        Ok(self.push(Op::Maximum(a, b), v))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), v)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let v = self.value(a).map(|x| f.apply(x));
        self.push(Op::Unary(a, f), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows_value(self.value(a));
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&vals)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&vals)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(Op::SliceCols(a, start), v))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    /// Per-row sums, `n x c -> n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().sum());
        self.push(Op::SumRows(a), v)
    }

    /// Per-column sums, `n x c -> 1 x c`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(1, m.cols());
        for i in 0..m.rows() {
            for (o, x) in out.as_mut_slice().iter_mut().zip(m.row(i)) {
                *o += x;
            }
        }
        self.push(Op::SumCols(a), out)
    }

    /// Largest entry as a `1 x 1` node; the gradient flows to the first argmax.
    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.is_empty() {
            return Err(contract("max_all of an empty matrix"));
        }
        let v = Matrix::scalar(m.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        Ok(self.push(Op::MaxAll(a), v))
    }

    /// Row lookup: output row `e` is input row `index[e]`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let m = self.value(a);
        if index.iter().any(|&i| i >= m.rows()) {
            return Err(contract("gather_rows index out of range"));
        }
        let cols = m.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            data.extend_from_slice(m.row(i));
        }
        let v = Matrix::new(index.len(), cols, data)?;
        Ok(self.push(Op::GatherRows(a, index), v))
    }

    fn check_segments(&self, a: Var, seg: &Segments, what: &str) -> Result<()> {
        if self.value(a).rows() != seg.total_rows() {
            return Err(contract(format!(
                "{what}: {} rows but segments cover {}",
                self.value(a).rows(),
                seg.total_rows()
            )));
        }
        Ok(())
    }

    /// Sums the rows of each segment: `E x c -> S x c` (empty segments give zeros).
    pub fn segment_sum(&mut self, a: Var, seg: Arc<Segments>) -> Result<Var> {
        self.check_segments(a, &seg, "segment_sum")?;
        let m = self.value(a);
        let mut out = Matrix::zeros(seg.count(), m.cols());
        for s in 0..seg.count() {
            for e in seg.range(s) {
                for (o, x) in out.row_mut(s).iter_mut().zip(m.row(e)) {
                    *o += x;
                }
            }
        }
        Ok(self.push(Op::SegmentSum(a, seg), out))
    }

    /// `out[s] = sum_{e in segment s} weights[e] * values[index[e]]`, with
    /// `weights` a column (`E x 1`). Same as gather, scale and segment sum,
    /// without the `E x d` intermediates.
    pub fn weighted_aggregate(
        &mut self,
        values: Var,
        weights: Var,
        index: Arc<Vec<usize>>,
        seg: Arc<Segments>,
    ) -> Result<Var> {
        let (v, w) = (self.value(values), self.value(weights));
        if w.shape() != (index.len(), 1) || seg.total_rows() != index.len() {
            return Err(contract("weighted_aggregate: weights, index and segments disagree"));
        }
        if index.iter().any(|&i| i >= v.rows()) {
            return Err(contract("weighted_aggregate: index out of range"));
        }
        let mut out = Matrix::zeros(seg.count(), v.cols());
        for s in 0..seg.count() {
            let o = out.row_mut(s);
            for e in seg.range(s) {
                let we = w.as_slice()[e];
                for (o, x) in o.iter_mut().zip(v.row(index[e])) {
                    *o += we * x;
                }
            }
        }
        Ok(self.push(Op::WeightedAggregate(values, weights, index, seg), out))
    }

    /// Softmax within each segment, independently per column.
    pub fn segment_softmax(&mut self, a: Var, seg: Arc<Segments>) -> Result<Var> {
        self.check_segments(a, &seg, "segment_softmax")?;
        let m = self.value(a);
        let mut out = m.clone();
        let mut buf = Vec::new();
        for s in 0..seg.count() {
            let r = seg.range(s);
            if r.is_empty() {
                continue;
            }
            for j in 0..m.cols() {
                buf.clear();
                buf.extend(r.clone().map(|e| m[(e, j)]));
                softmax_slice(&mut buf);
                for (k, e) in r.clone().enumerate() {
                    out[(e, j)] = buf[k];
                }
            }
        }
        Ok(self.push(Op::SegmentSoftmax(a, seg), out))
    }

    /// Column-wise maximum within each segment: `E x c -> S x c` (empty segments give zeros).
    pub fn segment_max(&mut self, a: Var, seg: Arc<Segments>) -> Result<Var> {
        self.check_segments(a, &seg, "segment_max")?;
        let m = self.value(a);
        let mut out = Matrix::zeros(seg.count(), m.cols());
        for s in 0..seg.count() {
            let r = seg.range(s);
            if r.is_empty() {
                continue;
            }
            for j in 0..m.cols() {
                out[(s, j)] = r.clone().map(|e| m[(e, j)]).fold(f64::NEG_INFINITY, f64::max);
            }
        }
        Ok(self.push(Op::SegmentMax(a, seg), out))
    }

    /// Mean cross-entropy of row-softmax(logits) over `(row, label)` targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let m = self.value(logits);
        if targets.is_empty() {
            return Err(contract("cross-entropy needs at least one target"));
        }
        if targets.iter().any(|&(r, l)| r >= m.rows() || l >= m.cols()) {
            return Err(contract("cross-entropy target out of range"));
        }
        let mut loss = 0.0;
        for &(r, l) in targets.iter() {
            let row = m.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let v = Matrix::scalar(loss / targets.len() as f64);
        Ok(self.push(Op::SoftmaxCrossEntropy(logits, targets), v))
    }

    /// Reverse sweep from a scalar node; see [`Tape::backward_with_seed`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        self.backward_with_seed(loss, Matrix::scalar(1.0))
    }

    /// Vector-Jacobian product: propagates the adjoint `seed` placed on `out`.
    /// Only gradients of leaves are kept.
    pub fn backward_with_seed(&self, out: Var, seed: Matrix) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(contract("seed shape does not match output"));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    /// Dense Jacobian of `output` with respect to `input`, one reverse sweep per
    /// output entry. Rows index output entries, columns input entries (row-major).
    pub fn jacobian(&self, output: Var, input: Var) -> Result<Matrix> {
        let (r, c) = self.value(output).shape();
        let n_in = self.value(input).len();
        let mut jac = Matrix::zeros(r * c, n_in);
        for k in 0..r * c {
            let mut seed = Matrix::zeros(r, c);
            seed.as_mut_slice()[k] = 1.0;
            let g = self.backward_with_seed(output, seed)?;
            if let Some(gi) = g.get(input) {
                jac.row_mut(k).copy_from_slice(gi.as_slice());
            }
        }
        Ok(jac)
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, contrib: Matrix| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.as_mut_slice().iter_mut().zip(contrib.as_slice()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul_nt(vb));
                acc(*b, va.matmul_tn(g));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, self.value(*a).shape()));
                acc(*b, reduce_to(g, self.value(*b).shape()));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, self.value(*a).shape()));
                acc(*b, reduce_to(&g.scale(-1.0), self.value(*b).shape()));
            }
            Op::Mul(a, b) if self.value(*a).shape() == self.value(*b).shape() => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (r, c) = va.shape();
                let ga = g.as_slice().iter().zip(vb.as_slice()).map(|(g, b)| g * b).collect();
                let gb = g.as_slice().iter().zip(va.as_slice()).map(|(g, a)| g * a).collect();
                acc(*a, Matrix::new(r, c, ga).expect("same shape"));
                acc(*b, Matrix::new(r, c, gb).expect("same shape"));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * bget(vb, i, j));
                let gb = Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * bget(va, i, j));
                acc(*a, reduce_to(&ga, va.shape()));
                acc(*b, reduce_to(&gb, vb.shape()));
            }
            Op::Div(a, b) | Op::DivOrZero(a, b) => {
                let safe = matches!(node.op, Op::DivOrZero(..));
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    let d = bget(vb, i, j);
                    if safe && d == 0.0 {
                        0.0
                    } else {
                        g[(i, j)] / d
                    }
                });
                let gb = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    let d = bget(vb, i, j);
                    if safe && d == 0.0 {
                        0.0
                    } else {
                        -g[(i, j)] * bget(va, i, j) / (d * d)
                    }
                });
                acc(*a, reduce_to(&ga, va.shape()));
                acc(*b, reduce_to(&gb, vb.shape()));
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let pick_a = |i, j| bget(va, i, j) >= bget(vb, i, j);
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| if pick_a(i, j) { g[(i, j)] } else { 0.0 });
                let gb = Matrix::from_fn(g.rows(), g.cols(), |i, j| if pick_a(i, j) { 0.0 } else { g[(i, j)] });
                acc(*a, reduce_to(&ga, va.shape()));
                acc(*b, reduce_to(&gb, vb.shape()));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Unary(a, f) => {
                let x = self.value(*a);
                let mut out = g.clone();
                for ((o, &xi), &yi) in out.as_mut_slice().iter_mut().zip(x.as_slice()).zip(y.as_slice()) {
                    *o *= f.derivative(xi, yi);
                }
                acc(*a, out);
            }
            Op::SoftmaxRows(a) => {
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (s, gr) = (y.row(i), g.row(i));
                    let inner: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (si, gi)) in out.row_mut(i).iter_mut().zip(s.iter().zip(gr)) {
                        *o = si * (gi - inner);
                    }
                }
                acc(*a, out);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, g.slice_cols(start, w).expect("concat slice"));
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    acc(p, g.slice_rows(start, h).expect("concat slice"));
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let mut out = Matrix::zeros(va.rows(), va.cols());
                for i in 0..g.rows() {
                    out.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, out);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::from_fn(r, c, |_, j| g[(0, j)]));
            }
            Op::MaxAll(a) => {
                let va = self.value(*a);
                let target = y[(0, 0)];
                let pos = va.as_slice().iter().position(|&x| x == target).unwrap_or(0);
                let mut out = Matrix::zeros(va.rows(), va.cols());
                out.as_mut_slice()[pos] = g[(0, 0)];
                acc(*a, out);
            }
            Op::GatherRows(a, index) => {
                let va = self.value(*a);
                let mut out = Matrix::zeros(va.rows(), va.cols());
                for (e, &i) in index.iter().enumerate() {
                    for (o, x) in out.row_mut(i).iter_mut().zip(g.row(e)) {
                        *o += x;
                    }
                }
                acc(*a, out);
            }
            Op::SegmentSum(a, seg) => {
                let va = self.value(*a);
                let mut out = Matrix::zeros(va.rows(), va.cols());
                for s in 0..seg.count() {
                    for e in seg.range(s) {
                        out.row_mut(e).copy_from_slice(g.row(s));
                    }
                }
                acc(*a, out);
            }
            Op::SegmentSoftmax(a, seg) => {
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for s in 0..seg.count() {
                    let r = seg.range(s);
                    for j in 0..y.cols() {
                        let inner: f64 = r.clone().map(|e| y[(e, j)] * g[(e, j)]).sum();
                        for e in r.clone() {
                            out[(e, j)] = y[(e, j)] * (g[(e, j)] - inner);
                        }
                    }
                }
                acc(*a, out);
            }
            Op::SegmentMax(a, seg) => {
                let va = self.value(*a);
                let mut out = Matrix::zeros(va.rows(), va.cols());
                for s in 0..seg.count() {
                    let r = seg.range(s);
                    for j in 0..va.cols() {
                        if let Some(e) = r.clone().find(|&e| va[(e, j)] == y[(s, j)]) {
                            out[(e, j)] += g[(s, j)];
                        }
                    }
                }
                acc(*a, out);
            }
            Op::WeightedAggregate(values, weights, index, seg) => {
                let (v, w) = (self.value(*values), self.value(*weights));
                let mut gv = Matrix::zeros(v.rows(), v.cols());
                let mut gw = Matrix::zeros(w.rows(), 1);
                for s in 0..seg.count() {
                    let gs = g.row(s);
                    for e in seg.range(s) {
                        let we = w.as_slice()[e];
                        gw.as_mut_slice()[e] = crate::matrix::dot(v.row(index[e]), gs);
                        for (o, x) in gv.row_mut(index[e]).iter_mut().zip(gs) {
                            *o += we * x;
                        }
                    }
                }
                acc(*values, gv);
                acc(*weights, gw);
            }
            Op::SoftmaxCrossEntropy(a, targets) => {
                let va = self.value(*a);
                let mut out = Matrix::zeros(va.rows(), va.cols());
                let w = g[(0, 0)] / targets.len() as f64;
                for &(r, l) in targets.iter() {
                    let mut p = va.row(r).to_vec();
                    softmax_slice(&mut p);
                    for (o, pi) in out.row_mut(r).iter_mut().zip(&p) {
                        *o += w * pi;
                    }
                    out[(r, l)] -= w;
                }
                acc(*a, out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, x)[(0, 0)], 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(2, 2, 1.5));
        let c = t.leaf(Matrix::scalar(4.0));
        let loss = t.sum_all(c);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(&t, x), Matrix::zeros(2, 2));
    }

    #[test]
    fn weighted_aggregate_matches_composition() {
        let vals = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 1.5);
        let w = Matrix::col_vector(&[0.5, -1.0, 2.0, 0.25]);
        let index = Arc::new(vec![2, 0, 1, 2]);
        let seg = Arc::new(Segments::from_offsets(vec![0, 1, 1, 4]).unwrap());
        let run = |fused: bool| {
            let mut t = Tape::new();
            let (v, wv) = (t.leaf(vals.clone()), t.leaf(w.clone()));
            let out = if fused {
                t.weighted_aggregate(v, wv, index.clone(), seg.clone()).unwrap()
            } else {
                let g = t.gather_rows(v, index.clone()).unwrap();
                let m = t.mul(g, wv).unwrap();
                t.segment_sum(m, seg.clone()).unwrap()
            };
            let sq = t.square(out);
            let loss = t.sum_all(sq);
            let g = t.backward(loss).unwrap();
            (t.value(out).clone(), g.wrt(&t, v), g.wrt(&t, wv))
        };
        let (a, b) = (run(true), run(false));
        assert!(a.0.max_abs_diff(&b.0) < 1e-14);
        assert!(a.1.max_abs_diff(&b.1) < 1e-14);
        assert!(a.2.max_abs_diff(&b.2) < 1e-14);
        assert_eq!(a.0.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn broadcasting_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::filled(3, 2, 1.0));
        let col = t.leaf(Matrix::col_vector(&[1.0, 2.0, 3.0]));
        let row = t.leaf(Matrix::row_vector(&[10.0, 20.0]));
        let s = t.mul(a, col).unwrap();
        let s = t.add(s, row).unwrap();
        assert_eq!(t.value(s).row(2), &[13.0, 23.0]);
        let loss = t.sum_all(s);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(&t, col).as_slice(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(&t, row).as_slice(), &[3.0, 3.0]);
        let bad = t.leaf(Matrix::zeros(2, 2));
        assert!(t.add(a, bad).is_err());
    }

    #[test]
    fn div_or_zero_is_finite() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::col_vector(&[1.0, 2.0]));
        let b = t.leaf(Matrix::col_vector(&[0.0, 4.0]));
        let q = t.div_or_zero(a, b).unwrap();
        assert_eq!(t.value(q).as_slice(), &[0.0, 0.5]);
        let l = t.sum_all(q);
        let g = t.backward(l).unwrap();
        assert!(g.wrt(&t, b).is_finite());
    }

    #[test]
    fn segment_ops_with_empty_segment() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col_vector(&[1.0, 3.0, 2.0]));
        let seg = Arc::new(Segments::from_offsets(vec![0, 2, 2, 3]).unwrap());
        let s = t.segment_sum(x, seg.clone()).unwrap();
        assert_eq!(t.value(s).as_slice(), &[4.0, 0.0, 2.0]);
        let m = t.segment_max(x, seg.clone()).unwrap();
        assert_eq!(t.value(m).as_slice(), &[3.0, 0.0, 2.0]);
        let p = t.segment_softmax(x, seg).unwrap();
        let v = t.value(p);
        assert!((v[(0, 0)] + v[(1, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(v[(2, 0)], 1.0);
    }
}
