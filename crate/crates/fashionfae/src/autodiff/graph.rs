use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

use crate::autodiff::params::ParamRef;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044715;

enum Op {
    Leaf,
    Param(ParamRef),
    Add(Value, Value),
    AddRow(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    MatMul(Value, Value),
    Transpose(Value),
    ConcatRows(Vec<Value>),
    ConcatCols(Vec<Value>),
    SelectRows(Value, Vec<usize>),
    SliceCols(Value, usize, usize),
    ReplaceRows(Value, Vec<usize>, Value),
    MeanRows(Value),
    SumAll(Value),
    MeanAll(Value),
    Gelu(Value),
    SoftmaxRows(Value),
    LayerNorm {
        x: Value,
        gain: Value,
        bias: Value,
        eps: f64,
    },
    CrossEntropyRows {
        logits: Value,
        targets: Vec<usize>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    offset: usize,
    op: Op,
}

impl Node {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Tape of eagerly-evaluated operations; `backward` walks it in reverse.
///
/// Node data lives in one bump-allocated pool so a cleared graph can be
/// rebuilt without reallocating. Inserting the same `ParamRef` twice yields
/// the same node, so gradients through shared parameters accumulate.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    pool: Vec<f64>,
    grads: Vec<f64>,
    scratch: Vec<f64>,
    param_nodes: HashMap<usize, Value>,
}

fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes but keeps the allocations for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.pool.clear();
        self.grads.clear();
        self.param_nodes.clear();
    }

    fn node(&self, v: Value) -> &Node {
        &self.nodes[v.0]
    }

    /// Takes the scratch buffer out, cleared. Return it via
    /// `push_scratch` or `put_scratch`.
    fn take_scratch(&mut self) -> Vec<f64> {
        let mut s = std::mem::take(&mut self.scratch);
        s.clear();
        s
    }

    fn push_scratch(&mut self, rows: usize, cols: usize, scratch: Vec<f64>, op: Op) -> Value {
        debug_assert_eq!(scratch.len(), rows * cols);
        let offset = self.pool.len();
        self.pool.extend_from_slice(&scratch);
        self.scratch = scratch;
        self.nodes.push(Node {
            rows,
            cols,
            offset,
            op,
        });
        Value(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.pool[self.node(v).range()]
    }

    /// Gradient slice of a node; empty before `backward` runs.
    pub fn grad(&self, v: Value) -> &[f64] {
        if self.grads.is_empty() {
            &[]
        } else {
            &self.grads[self.node(v).range()]
        }
    }

    pub fn tensor(&self, v: Value) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.rows, n.cols, self.data(v).to_vec()).expect("node shape is consistent")
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, v: Value) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.data(v)[0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Value {
        let (rows, cols) = t.shape();
        let mut s = self.take_scratch();
        s.extend_from_slice(t.data());
        self.push_scratch(rows, cols, s, Op::Leaf)
    }

    /// Insert a trainable parameter. Repeated insertion of the same
    /// parameter returns the existing node.
    pub fn param(&mut self, p: &ParamRef) -> Value {
        let key = Rc::as_ptr(p) as usize;
        if let Some(&v) = self.param_nodes.get(&key) {
            return v;
        }
        let mut s = self.take_scratch();
        let (rows, cols) = {
            let t = p.value();
            s.extend_from_slice(t.data());
            t.shape()
        };
        let v = self.push_scratch(rows, cols, s, Op::Param(p.clone()));
        self.param_nodes.insert(key, v);
        v
    }

    /// Parameters that appear in this graph.
    pub fn touched_params(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Param(p) = &n.op {
                out.push(p.clone());
            }
        }
        out
    }

    /// Gradient of a parameter, if it participates in this graph.
    pub fn param_grad(&self, p: &ParamRef) -> Option<Tensor> {
        let key = Rc::as_ptr(p) as usize;
        self.param_nodes.get(&key).map(|&v| {
            let n = self.node(v);
            let data = if self.grads.is_empty() {
                vec![0.0; n.len()]
            } else {
                self.grads[n.range()].to_vec()
            };
            Tensor::new(n.rows, n.cols, data).expect("grad shape matches node")
        })
    }

    fn check_same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_same_shape("add", a, b)?;
        let (rows, cols) = self.shape(a);
        let mut s = self.take_scratch();
        s.extend(
            self.data(a)
                .iter()
                .zip(self.data(b))
                .map(|(x, y)| x + y),
        );
        Ok(self.push_scratch(rows, cols, s, Op::Add(a, b)))
    }

    /// Broadcast-add a 1xD row onto every row of an NxD matrix.
    pub fn add_row(&mut self, a: Value, row: Value) -> Result<Value> {
        let (rows, cols) = self.shape(a);
        if self.shape(row) != (1, cols) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: (rows, cols),
                right: self.shape(row),
            });
        }
        let mut s = self.take_scratch();
        {
            let a_data = self.data(a);
            let r = self.data(row);
            for chunk in a_data.chunks(cols) {
                s.extend(chunk.iter().zip(r).map(|(x, y)| x + y));
            }
        }
        Ok(self.push_scratch(rows, cols, s, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_same_shape("mul", a, b)?;
        let (rows, cols) = self.shape(a);
        let mut s = self.take_scratch();
        s.extend(
            self.data(a)
                .iter()
                .zip(self.data(b))
                .map(|(x, y)| x * y),
        );
        Ok(self.push_scratch(rows, cols, s, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let (rows, cols) = self.shape(a);
        let mut s = self.take_scratch();
        s.extend(self.data(a).iter().map(|x| x * c));
        self.push_scratch(rows, cols, s, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: (m, k),
                right: (k2, n),
            });
        }
        let mut s = self.take_scratch();
        s.resize(m * n, 0.0);
        matmul_into(&mut s, self.data(a), self.data(b), m, k, n);
        Ok(self.push_scratch(m, n, s, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Value) -> Value {
        let (rows, cols) = self.shape(a);
        let mut s = self.take_scratch();
        s.resize(rows * cols, 0.0);
        {
            let src = self.data(a);
            for r in 0..rows {
                for c in 0..cols {
                    s[c * rows + r] = src[r * cols + c];
                }
            }
        }
        self.push_scratch(cols, rows, s, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of zero parts"));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut s = self.take_scratch();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                self.scratch = s;
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: (r, c),
                });
            }
            rows += r;
            s.extend_from_slice(self.data(p));
        }
        Ok(self.push_scratch(rows, cols, s, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of zero parts"));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: (r, c),
                });
            }
            cols += c;
        }
        let mut s = self.take_scratch();
        s.resize(rows * cols, 0.0);
        {
            let mut offset = 0;
            for &p in parts {
                let (_, c) = self.shape(p);
                let src = self.data(p);
                for r in 0..rows {
                    s[r * cols + offset..r * cols + offset + c]
                        .copy_from_slice(&src[r * c..(r + 1) * c]);
                }
                offset += c;
            }
        }
        Ok(self.push_scratch(rows, cols, s, Op::ConcatCols(parts.to_vec())))
    }

    /// Gather rows by index; indices may repeat. Backward scatter-adds.
    pub fn select_rows(&mut self, a: Value, indices: &[usize]) -> Result<Value> {
        let (rows, cols) = self.shape(a);
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid(format!(
                    "select_rows index {i} out of range for {rows} rows"
                )));
            }
        }
        let mut s = self.take_scratch();
        {
            let src = self.data(a);
            for &i in indices {
                s.extend_from_slice(&src[i * cols..(i + 1) * cols]);
            }
        }
        Ok(self.push_scratch(
            indices.len(),
            cols,
            s,
            Op::SelectRows(a, indices.to_vec()),
        ))
    }

    pub fn slice_cols(&mut self, a: Value, start: usize, end: usize) -> Result<Value> {
        let (rows, cols) = self.shape(a);
        if start >= end || end > cols {
            return Err(Error::invalid(format!(
                "slice_cols range {start}..{end} invalid for {cols} columns"
            )));
        }
        let width = end - start;
        let mut s = self.take_scratch();
        {
            let src = self.data(a);
            for r in 0..rows {
                s.extend_from_slice(&src[r * cols + start..r * cols + end]);
            }
        }
        Ok(self.push_scratch(rows, width, s, Op::SliceCols(a, start, end)))
    }

    /// Copy of `a` with the given rows overwritten by the 1xD `row` value.
    pub fn replace_rows(&mut self, a: Value, positions: &[usize], row: Value) -> Result<Value> {
        let (rows, cols) = self.shape(a);
        if self.shape(row) != (1, cols) {
            return Err(Error::ShapeMismatch {
                op: "replace_rows",
                left: (rows, cols),
                right: self.shape(row),
            });
        }
        for &p in positions {
            if p >= rows {
                return Err(Error::invalid(format!(
                    "replace_rows position {p} out of range for {rows} rows"
                )));
            }
        }
        let mut s = self.take_scratch();
        {
            s.extend_from_slice(self.data(a));
            let r = self.data(row);
            for &p in positions {
                s[p * cols..(p + 1) * cols].copy_from_slice(r);
            }
        }
        Ok(self.push_scratch(
            rows,
            cols,
            s,
            Op::ReplaceRows(a, positions.to_vec(), row),
        ))
    }

    /// Arithmetic mean over rows: NxD -> 1xD.
    pub fn mean_rows(&mut self, a: Value) -> Value {
        let (rows, cols) = self.shape(a);
        let mut s = self.take_scratch();
        s.resize(cols, 0.0);
        {
            let src = self.data(a);
            for r in 0..rows {
                for c in 0..cols {
                    s[c] += src[r * cols + c];
                }
            }
            for v in s.iter_mut() {
                *v /= rows as f64;
            }
        }
        self.push_scratch(1, cols, s, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Value) -> Value {
        let total: f64 = self.data(a).iter().sum();
        let mut s = self.take_scratch();
        s.push(total);
        self.push_scratch(1, 1, s, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Value) -> Value {
        let n = self.node(a).len() as f64;
        let total: f64 = self.data(a).iter().sum();
        let mut s = self.take_scratch();
        s.push(total / n);
        self.push_scratch(1, 1, s, Op::MeanAll(a))
    }

    pub fn gelu(&mut self, a: Value) -> Value {
        let (rows, cols) = self.shape(a);
        let mut s = self.take_scratch();
        s.extend(self.data(a).iter().map(|&x| {
            let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        }));
        self.push_scratch(rows, cols, s, Op::Gelu(a))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: Value) -> Value {
        let (rows, cols) = self.shape(a);
        let mut s = self.take_scratch();
        s.resize(rows * cols, 0.0);
        {
            let src = self.data(a);
            for r in 0..rows {
                let row = &src[r * cols..(r + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (c, &x) in row.iter().enumerate() {
                    let e = (x - m).exp();
                    s[r * cols + c] = e;
                    sum += e;
                }
                for c in 0..cols {
                    s[r * cols + c] /= sum;
                }
            }
        }
        self.push_scratch(rows, cols, s, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine gain/bias (both 1xD).
    ///
    /// Normalizes to zero mean and unit population variance per row before
    /// the affine transform.
    pub fn layer_norm(&mut self, x: Value, gain: Value, bias: Value, eps: f64) -> Result<Value> {
        let (rows, cols) = self.shape(x);
        if self.shape(gain) != (1, cols) || self.shape(bias) != (1, cols) {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: (rows, cols),
                right: self.shape(gain),
            });
        }
        let mut s = self.take_scratch();
        s.resize(rows * cols, 0.0);
        {
            let src = self.data(x);
            let g = self.data(gain);
            let b = self.data(bias);
            for r in 0..rows {
                let row = &src[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for c in 0..cols {
                    let yhat = (row[c] - mean) * inv;
                    s[r * cols + c] = yhat * g[c] + b[c];
                }
            }
        }
        Ok(self.push_scratch(rows, cols, s, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    ///
    /// loss = mean_r ( logsumexp(logits[r]) - logits[r][target_r] )
    pub fn cross_entropy_rows(&mut self, logits: Value, targets: &[usize]) -> Result<Value> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows {
            return Err(Error::invalid(format!(
                "cross_entropy_rows got {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        for &t in targets {
            if t >= cols {
                return Err(Error::invalid(format!(
                    "cross_entropy target {t} out of range for {cols} classes"
                )));
            }
        }
        let mut total = 0.0;
        {
            let src = self.data(logits);
            for (r, &t) in targets.iter().enumerate() {
                let row = &src[r * cols..(r + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
        }
        let loss = total / rows as f64;
        let mut s = self.take_scratch();
        s.push(loss);
        Ok(self.push_scratch(
            1,
            1,
            s,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Cross-entropy of a single logits row against one target index.
    pub fn cross_entropy(&mut self, logits: Value, target: usize) -> Result<Value> {
        let (rows, _) = self.shape(logits);
        if rows != 1 {
            return Err(Error::invalid(format!(
                "cross_entropy expects a single row, got {rows}"
            )));
        }
        self.cross_entropy_rows(logits, &[target])
    }

    /// Reverse pass from a finite scalar loss node.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        {
            let n = self.node(loss);
            if (n.rows, n.cols) != (1, 1) {
                return Err(Error::invalid("backward requires a scalar (1x1) loss"));
            }
            if !self.pool[n.offset].is_finite() {
                return Err(Error::NonFinite("backward loss".into()));
            }
        }
        self.grads.clear();
        self.grads.resize(self.pool.len(), 0.0);
        let loss_offset = self.node(loss).offset;
        self.grads[loss_offset] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            let out_range = node.range();
            if self.grads[out_range.clone()].iter().all(|&g| g == 0.0) {
                continue;
            }
            // input node offsets always precede the output's, so splitting
            // the grad buffer at the output offset separates them
            let (gin, gout_region) = self.grads.split_at_mut(node.offset);
            let gout = &gout_region[..node.len()];
            let pool = &self.pool;
            let nodes = &self.nodes;
            let range_of = |v: Value| -> Range<usize> { nodes[v.0].range() };

            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    for (i, &go) in range_of(*a).zip(gout) {
                        gin[i] += go;
                    }
                    for (i, &go) in range_of(*b).zip(gout) {
                        gin[i] += go;
                    }
                }
                Op::AddRow(a, row) => {
                    for (i, &go) in range_of(*a).zip(gout) {
                        gin[i] += go;
                    }
                    let cols = node.cols;
                    let r0 = range_of(*row).start;
                    for chunk in gout.chunks(cols) {
                        for (c, &go) in chunk.iter().enumerate() {
                            gin[r0 + c] += go;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ar, br) = (range_of(*a), range_of(*b));
                    for i in 0..gout.len() {
                        let go = gout[i];
                        gin[ar.start + i] += go * pool[br.start + i];
                        gin[br.start + i] += go * pool[ar.start + i];
                    }
                }
                Op::Scale(a, c) => {
                    for (i, &go) in range_of(*a).zip(gout) {
                        gin[i] += c * go;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                    let n_cols = node.cols;
                    let (ar, br) = (range_of(*a), range_of(*b));
                    let ad = &pool[ar.clone()];
                    let bd = &pool[br.clone()];
                    // dA += dC @ B^T
                    for i in 0..m {
                        let go_row = &gout[i * n_cols..(i + 1) * n_cols];
                        for kk in 0..k {
                            let b_row = &bd[kk * n_cols..(kk + 1) * n_cols];
                            let mut sum = 0.0;
                            for (go, bv) in go_row.iter().zip(b_row) {
                                sum += go * bv;
                            }
                            gin[ar.start + i * k + kk] += sum;
                        }
                    }
                    // dB += A^T @ dC
                    for i in 0..m {
                        let go_row = &gout[i * n_cols..(i + 1) * n_cols];
                        for kk in 0..k {
                            let av = ad[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            let gb_row =
                                &mut gin[br.start + kk * n_cols..br.start + (kk + 1) * n_cols];
                            for (g, &go) in gb_row.iter_mut().zip(go_row) {
                                *g += av * go;
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let rows = node.rows;
                    let cols = node.cols;
                    let a0 = range_of(*a).start;
                    for r in 0..rows {
                        for c in 0..cols {
                            gin[a0 + c * rows + r] += gout[r * cols + c];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let span = nodes[p.0].len();
                        let p0 = range_of(p).start;
                        for (i, &go) in gout[offset..offset + span].iter().enumerate() {
                            gin[p0 + i] += go;
                        }
                        offset += span;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.rows;
                    let cols = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = nodes[p.0].cols;
                        let p0 = range_of(p).start;
                        for r in 0..rows {
                            for c in 0..pc {
                                gin[p0 + r * pc + c] += gout[r * cols + offset + c];
                            }
                        }
                        offset += pc;
                    }
                }
                Op::SelectRows(a, indices) => {
                    let cols = node.cols;
                    let a0 = range_of(*a).start;
                    for (out_r, &src_r) in indices.iter().enumerate() {
                        for c in 0..cols {
                            gin[a0 + src_r * cols + c] += gout[out_r * cols + c];
                        }
                    }
                }
                Op::SliceCols(a, start, _end) => {
                    let width = node.cols;
                    let acols = nodes[a.0].cols;
                    let a0 = range_of(*a).start;
                    for r in 0..node.rows {
                        for c in 0..width {
                            gin[a0 + r * acols + start + c] += gout[r * width + c];
                        }
                    }
                }
                Op::ReplaceRows(a, positions, row) => {
                    let cols = node.cols;
                    let replaced: std::collections::HashSet<usize> =
                        positions.iter().cloned().collect();
                    let a0 = range_of(*a).start;
                    for r in 0..node.rows {
                        if replaced.contains(&r) {
                            continue;
                        }
                        for c in 0..cols {
                            gin[a0 + r * cols + c] += gout[r * cols + c];
                        }
                    }
                    let r0 = range_of(*row).start;
                    for &p in positions {
                        for c in 0..cols {
                            gin[r0 + c] += gout[p * cols + c];
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let rows = nodes[a.0].rows;
                    let cols = node.cols;
                    let inv = 1.0 / rows as f64;
                    let a0 = range_of(*a).start;
                    for r in 0..rows {
                        for c in 0..cols {
                            gin[a0 + r * cols + c] += gout[c] * inv;
                        }
                    }
                }
                Op::SumAll(a) => {
                    let go = gout[0];
                    for i in range_of(*a) {
                        gin[i] += go;
                    }
                }
                Op::MeanAll(a) => {
                    let go = gout[0] / nodes[a.0].len() as f64;
                    for i in range_of(*a) {
                        gin[i] += go;
                    }
                }
                Op::Gelu(a) => {
                    let ar = range_of(*a);
                    for i in 0..gout.len() {
                        let x = pool[ar.start + i];
                        let inner = GELU_A * (x + GELU_B * x * x * x);
                        let t = inner.tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x);
                        gin[ar.start + i] += gout[i] * d;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let cols = node.cols;
                    let y_all = &pool[out_range.clone()];
                    let a0 = range_of(*a).start;
                    for r in 0..node.rows {
                        let y = &y_all[r * cols..(r + 1) * cols];
                        let go = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(go).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..cols {
                            gin[a0 + r * cols + c] += y[c] * (go[c] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let rows = node.rows;
                    let cols = node.cols;
                    let d = cols as f64;
                    let x0 = range_of(*x).start;
                    let g0 = range_of(*gain).start;
                    let b0 = range_of(*bias).start;
                    for r in 0..rows {
                        let xrow = &pool[x0 + r * cols..x0 + (r + 1) * cols];
                        let mean = xrow.iter().sum::<f64>() / d;
                        let var =
                            xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let inv = 1.0 / (var + eps).sqrt();
                        let go = &gout[r * cols..(r + 1) * cols];
                        let mut mean_dy = 0.0;
                        let mut mean_dy_yhat = 0.0;
                        for c in 0..cols {
                            let yhat = (xrow[c] - mean) * inv;
                            let dy = go[c] * pool[g0 + c];
                            mean_dy += dy;
                            mean_dy_yhat += dy * yhat;
                        }
                        mean_dy /= d;
                        mean_dy_yhat /= d;
                        for c in 0..cols {
                            let yhat = (xrow[c] - mean) * inv;
                            gin[g0 + c] += go[c] * yhat;
                            gin[b0 + c] += go[c];
                            let dy = go[c] * pool[g0 + c];
                            gin[x0 + r * cols + c] +=
                                inv * (dy - mean_dy - yhat * mean_dy_yhat);
                        }
                    }
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let go = gout[0];
                    let rows = targets.len();
                    let cols = nodes[logits.0].cols;
                    let scale = go / rows as f64;
                    let l0 = range_of(*logits).start;
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &pool[l0 + r * cols..l0 + (r + 1) * cols];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        for c in 0..cols {
                            let p = (row[c] - m).exp() / sum;
                            let indicator = if c == t { 1.0 } else { 0.0 };
                            gin[l0 + r * cols + c] += scale * (p - indicator);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
