use std::collections::BTreeMap;

use super::tensor::{log_softmax_rows_data, softmax_rows_data, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Input node. Named leaves are parameters and receive gradients;
    /// unnamed leaves are constants and do not.
    Leaf { name: Option<String> },
    Add(Var, Var),
    /// Matrix plus row vector, broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    /// Valid 1-D convolution over a length-L sequence of E-dim vectors.
    Conv1d { input: Var, weight: Var, bias: Var },
    Relu(Var),
    /// Per-channel max over the time axis; ties resolve to the first
    /// maximum so backward routing is deterministic.
    MaxOverTime { input: Var, argmax: Vec<usize> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Log(Var),
    /// All pairwise squared Euclidean distances between rows.
    PairwiseSqDist(Var),
    /// Identity forward; backward multiplies the gradient by -lambda.
    GradReverse(Var, f64),
    /// Same buffer under a new shape; backward passes through.
    Reshape(Var),
    ConcatVec(Vec<Var>),
    StackRows(Vec<Var>),
    SelectRow { table: Var, row: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only op recorder. Operand nodes always precede their results,
/// so reverse id order is a valid backward schedule.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. Gradients for it come back from
    /// [`Tape::backward`] keyed by `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.push(value, Op::Leaf { name: Some(name.to_string()) })
    }

    /// Registers a constant leaf; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { name: None })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_op(shape, data), Op::Add(a, b))
    }

    /// `a` is rank-2, `v` is a vector matching `a`'s column count; `v` is
    /// added to every row.
    pub fn add_row(&mut self, a: Var, v: Var) -> Var {
        let (rows, cols) = self.value(a).dims2();
        assert_eq!(self.value(v).shape(), [cols], "add_row: vector/column mismatch");
        let mut data = self.value(a).data().to_vec();
        let vd = self.value(v).data();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += vd[c];
            }
        }
        self.push(Tensor::from_op(vec![rows, cols], data), Op::AddRow(a, v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_op(shape, data), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_op(shape, data), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_op(shape, data), Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul: inner dimension mismatch ({k} vs {k2})");
        let mut out = vec![0.0; m * n];
        matmul_into(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.push(Tensor::from_op(vec![m, n], out), Op::Matmul(a, b))
    }

    /// Valid 1-D convolution. `input` is L x E (time by embedding),
    /// `weight` is [C, w, E], `bias` is [C]; the result is C x (L - w + 1).
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let (l, e) = self.value(input).dims2();
        let wshape = self.value(weight).shape().to_vec();
        assert_eq!(wshape.len(), 3, "conv1d: weight must be [channels, width, embed]");
        let (c, w, we) = (wshape[0], wshape[1], wshape[2]);
        assert_eq!(we, e, "conv1d: weight embed dim {we} != input embed dim {e}");
        assert!(w <= l, "conv1d: kernel width {w} exceeds sequence length {l}");
        assert_eq!(self.value(bias).shape(), [c], "conv1d: bias/channel mismatch");
        let t = l - w + 1;
        let x = self.value(input).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; c * t];
        for ch in 0..c {
            for pos in 0..t {
                let mut acc = bd[ch];
                for i in 0..w {
                    let xrow = &x[(pos + i) * e..(pos + i + 1) * e];
                    let wrow = &wd[(ch * w + i) * e..(ch * w + i + 1) * e];
                    for j in 0..e {
                        acc += wrow[j] * xrow[j];
                    }
                }
                out[ch * t + pos] = acc;
            }
        }
        self.push(Tensor::from_op(vec![c, t], out), Op::Conv1d { input, weight, bias })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_op(shape, data), Op::Relu(a))
    }

    /// C x T -> [C]: per-row maximum over the time axis.
    pub fn max_over_time(&mut self, a: Var) -> Var {
        let (c, t) = self.value(a).dims2();
        assert!(t > 0, "max_over_time: empty time axis");
        let x = self.value(a).data();
        let mut out = vec![0.0; c];
        let mut argmax = vec![0usize; c];
        for ch in 0..c {
            let row = &x[ch * t..(ch + 1) * t];
            let (mut best, mut best_i) = (row[0], 0);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            out[ch] = best;
            argmax[ch] = best_i;
        }
        self.push(Tensor::from_op(vec![c], out), Op::MaxOverTime { input: a, argmax })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.value(a).dims2();
        let mut out = vec![0.0; rows * cols];
        softmax_rows_data(rows, cols, self.value(a).data(), &mut out);
        self.push(Tensor::from_op(vec![rows, cols], out), Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.value(a).dims2();
        let mut out = vec![0.0; rows * cols];
        log_softmax_rows_data(rows, cols, self.value(a).data(), &mut out);
        self.push(Tensor::from_op(vec![rows, cols], out), Op::LogSoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert!(!ta.is_empty(), "mean: empty tensor");
        let s: f64 = ta.data().iter().sum();
        let n = ta.len() as f64;
        self.push(Tensor::scalar(s / n), Op::Mean(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.ln()).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_op(shape, data), Op::Log(a))
    }

    /// B x F -> B x B matrix of squared Euclidean distances between rows.
    /// Exactly symmetric with an exactly zero diagonal.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Var {
        let (b, f) = self.value(a).dims2();
        let mut out = vec![0.0; b * b];
        super::tensor::pairwise_sq_dist_data(b, f, self.value(a).data(), &mut out);
        self.push(Tensor::from_op(vec![b, b], out), Op::PairwiseSqDist(a))
    }

    /// Identity in the forward pass; scales the backward gradient by
    /// -lambda. `lambda` must be non-negative.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::Contract(format!(
                "grad_reverse requires lambda >= 0, got {lambda}"
            )));
        }
        let value = self.value(a).clone();
        Ok(self.push(value, Op::GradReverse(a, lambda)))
    }

    /// Reinterprets a node's buffer under a new shape with the same
    /// element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let ta = self.value(a);
        assert_eq!(
            shape.iter().product::<usize>(),
            ta.len(),
            "reshape: element count mismatch"
        );
        let data = ta.data().to_vec();
        self.push(Tensor::from_op(shape, data), Op::Reshape(a))
    }

    /// Concatenates rank-1 vectors into one vector.
    pub fn concat_vec(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_vec: no inputs");
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.shape().len(), 1, "concat_vec: rank-1 inputs only");
            data.extend_from_slice(t.data());
        }
        let n = data.len();
        self.push(Tensor::from_op(vec![n], data), Op::ConcatVec(parts.to_vec()))
    }

    /// Stacks equal-length rank-1 vectors into a B x F matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows: no inputs");
        let f = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            let t = self.value(r);
            assert_eq!(t.shape().len(), 1, "stack_rows: rank-1 inputs only");
            assert_eq!(t.len(), f, "stack_rows: ragged rows");
            data.extend_from_slice(t.data());
        }
        let b = rows.len();
        self.push(Tensor::from_op(vec![b, f], data), Op::StackRows(rows.to_vec()))
    }

    /// Extracts row `row` of a rank-2 table as a vector (embedding lookup).
    pub fn select_row(&mut self, table: Var, row: usize) -> Var {
        let (k, d) = self.value(table).dims2();
        assert!(row < k, "select_row: row {row} out of range for {k} rows");
        let data = self.value(table).data()[row * d..(row + 1) * d].to_vec();
        self.push(Tensor::from_op(vec![d], data), Op::SelectRow { table, row })
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns the gradient of
    /// every named leaf reachable from `loss`, keyed by name. Constants
    /// and unreachable parameters are absent. Deterministic: the same
    /// graph yields bit-identical gradients.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if let Some(g) = grads[id].take() {
                    let shape = node.value.shape().to_vec();
                    out.insert(name.clone(), Tensor::from_op(shape, g));
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[id].op {
            Op::Leaf { .. } => unreachable!("leaves are skipped in the backward sweep"),
            Op::Add(a, b) => {
                accumulate(grads, *a, val(*a).len(), |d| {
                    for (x, &gi) in d.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
                accumulate(grads, *b, val(*b).len(), |d| {
                    for (x, &gi) in d.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }
            Op::AddRow(a, v) => {
                let cols = self.nodes[v.0].value.len();
                accumulate(grads, *a, val(*a).len(), |d| {
                    for (x, &gi) in d.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
                accumulate(grads, *v, cols, |d| {
                    for (i, &gi) in g.iter().enumerate() {
                        d[i % cols] += gi;
                    }
                });
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, val(*a).len(), |d| {
                    for (x, &gi) in d.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
                accumulate(grads, *b, val(*b).len(), |d| {
                    for (x, &gi) in d.iter_mut().zip(g) {
                        *x -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(grads, *a, va.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                accumulate(grads, *b, vb.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, val(*a).len(), |d| {
                    for (x, &gi) in d.iter_mut().zip(g) {
                        *x += gi * c;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2();
                let n = self.nodes[b.0].value.dims2().1;
                let (va, vb) = (val(*a), val(*b));
                accumulate(grads, *a, m * k, |d| {
                    // dA[i,p] += sum_j g[i,j] * B[p,j]
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * vb[p * n + j];
                            }
                            d[i * k + p] += acc;
                        }
                    }
                });
                accumulate(grads, *b, k * n, |d| {
                    // dB[p,j] += sum_i A[i,p] * g[i,j]
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += va[i * k + p] * g[i * n + j];
                            }
                            d[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::Conv1d { input, weight, bias } => {
                let (l, e) = self.nodes[input.0].value.dims2();
                let wshape = self.nodes[weight.0].value.shape();
                let (c, w) = (wshape[0], wshape[1]);
                let t = l - w + 1;
                let (vx, vw) = (val(*input), val(*weight));
                accumulate(grads, *bias, c, |d| {
                    for ch in 0..c {
                        for pos in 0..t {
                            d[ch] += g[ch * t + pos];
                        }
                    }
                });
                accumulate(grads, *weight, c * w * e, |d| {
                    for ch in 0..c {
                        for pos in 0..t {
                            let gv = g[ch * t + pos];
                            for i in 0..w {
                                for j in 0..e {
                                    d[(ch * w + i) * e + j] += gv * vx[(pos + i) * e + j];
                                }
                            }
                        }
                    }
                });
                accumulate(grads, *input, l * e, |d| {
                    for ch in 0..c {
                        for pos in 0..t {
                            let gv = g[ch * t + pos];
                            for i in 0..w {
                                for j in 0..e {
                                    d[(pos + i) * e + j] += gv * vw[(ch * w + i) * e + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                accumulate(grads, *a, va.len(), |d| {
                    for i in 0..d.len() {
                        if va[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::MaxOverTime { input, argmax } => {
                let (_, t) = self.nodes[input.0].value.dims2();
                let len = val(*input).len();
                accumulate(grads, *input, len, |d| {
                    for (ch, &pos) in argmax.iter().enumerate() {
                        d[ch * t + pos] += g[ch];
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = self.nodes[a.0].value.dims2();
                let y = &self.nodes[id].value;
                let yd = y.data();
                accumulate(grads, *a, rows * cols, |d| {
                    for r in 0..rows {
                        let base = r * cols;
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += g[base + c] * yd[base + c];
                        }
                        for c in 0..cols {
                            d[base + c] += yd[base + c] * (g[base + c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let (rows, cols) = self.nodes[a.0].value.dims2();
                let yd = self.nodes[id].value.data();
                accumulate(grads, *a, rows * cols, |d| {
                    for r in 0..rows {
                        let base = r * cols;
                        let mut gsum = 0.0;
                        for c in 0..cols {
                            gsum += g[base + c];
                        }
                        for c in 0..cols {
                            d[base + c] += g[base + c] - yd[base + c].exp() * gsum;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                accumulate(grads, *a, val(*a).len(), |d| {
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let gv = g[0] / n as f64;
                accumulate(grads, *a, n, |d| {
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Log(a) => {
                let va = val(*a);
                accumulate(grads, *a, va.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / va[i];
                    }
                });
            }
            Op::PairwiseSqDist(a) => {
                let (b, f) = self.nodes[a.0].value.dims2();
                let x = val(*a);
                accumulate(grads, *a, b * f, |d| {
                    for i in 0..b {
                        for j in 0..b {
                            if i == j {
                                continue;
                            }
                            let gv = g[i * b + j] + g[j * b + i];
                            if gv == 0.0 {
                                continue;
                            }
                            for k in 0..f {
                                d[i * f + k] += 2.0 * gv * (x[i * f + k] - x[j * f + k]);
                            }
                        }
                    }
                });
            }
            Op::GradReverse(a, lambda) => {
                let lambda = *lambda;
                accumulate(grads, *a, val(*a).len(), |d| {
                    for (x, &gi) in d.iter_mut().zip(g) {
                        *x += -lambda * gi;
                    }
                });
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, val(*a).len(), |d| {
                    for (x, &gi) in d.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }
            Op::ConcatVec(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    let seg = &g[offset..offset + len];
                    accumulate(grads, p, len, |d| {
                        for (x, &gi) in d.iter_mut().zip(seg) {
                            *x += gi;
                        }
                    });
                    offset += len;
                }
            }
            Op::StackRows(rows) => {
                let f = val(rows[0]).len();
                for (r, &row) in rows.iter().enumerate() {
                    let seg = &g[r * f..(r + 1) * f];
                    accumulate(grads, row, f, |d| {
                        for (x, &gi) in d.iter_mut().zip(seg) {
                            *x += gi;
                        }
                    });
                }
            }
            Op::SelectRow { table, row } => {
                let d_cols = self.nodes[id].value.len();
                let len = val(*table).len();
                let row = *row;
                accumulate(grads, *table, len, |d| {
                    for c in 0..d_cols {
                        d[row * d_cols + c] += g[c];
                    }
                });
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn matmul_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}
