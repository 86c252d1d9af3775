//! Reverse-mode automatic differentiation over a flat tape of matrix
//! operations.
//!
//! Nodes are appended in topological order with eagerly computed values;
//! [`Tape::backward`] walks the tape once in reverse. The op set is the
//! minimum a transformer-style encoder-decoder and its losses need. All
//! arithmetic is `f64` and every reduction runs in a fixed order, so
//! values and gradients are bitwise deterministic.

use crate::error::{Error, Result};

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(rows * cols, data.len(), "tensor shape mismatch");
        Tensor { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Tensor {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn item(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "item() needs a 1x1 tensor");
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels shared by the tape and the no-grad inference path.

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let av = a.get(i, k);
            if av == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn shape mismatch");
    let mut out = Tensor::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, av) in arow.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = &mut out.data[r * x.cols..(r + 1) * x.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = &mut out.data[r * x.cols..(r + 1) * x.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    assert_eq!(gain.cols, x.cols);
    assert_eq!(bias.cols, x.cols);
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.cols as f64;
        let std = (var + LAYER_NORM_EPS).sqrt();
        for c in 0..x.cols {
            let normed = (row[c] - mean) / std;
            out.set(r, c, normed * gain.get(0, c) + bias.get(0, c));
        }
    }
    out
}

pub fn tanh_map(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = v.tanh());
    out
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Gather { table: NodeId, ids: Vec<usize> },
    MatMul { a: NodeId, b: NodeId },
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRow { a: NodeId, row: NodeId },
    AddConst { a: NodeId, constant: Tensor },
    Scale { a: NodeId, c: f64 },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    Tanh { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    Pick { a: NodeId, row: usize, col: usize },
    DotConst { a: NodeId, weights: Tensor },
    Abs { a: NodeId },
    SumAll { a: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation for one loss evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Leaf carrying a model parameter. Parameter identity is tracked by
    /// the [`GradientTape`] binding list, so on the tape itself a
    /// parameter is an ordinary leaf; `_param_index` documents intent at
    /// call sites.
    pub fn param(&mut self, value: Tensor, _param_index: usize) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let src = self.value(table);
        let cols = src.cols;
        let mut out = Tensor::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            out.data[r * cols..(r + 1) * cols].copy_from_slice(src.row(id));
        }
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul { a, b }, value)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = matmul_nt(self.value(a), self.value(b));
        self.push(Op::MatMulNT { a, b }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(Op::Add { a, b }, value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        debug_assert_eq!(va.shape(), vb.shape());
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(va.rows, va.cols, data);
        self.push(Op::Sub { a, b }, value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        debug_assert_eq!(va.shape(), vb.shape());
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(va.rows, va.cols, data);
        self.push(Op::Mul { a, b }, value)
    }

    /// Adds a `[1, d]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let va = self.value(a);
        let vr = self.value(row);
        debug_assert_eq!(vr.rows, 1);
        debug_assert_eq!(va.cols, vr.cols);
        let mut value = va.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                value.data[r * value.cols + c] += vr.data[c];
            }
        }
        self.push(Op::AddRow { a, row }, value)
    }

    pub fn add_const(&mut self, a: NodeId, constant: Tensor) -> NodeId {
        let va = self.value(a);
        debug_assert_eq!(va.shape(), constant.shape());
        let mut value = va.clone();
        value.add_assign(&constant);
        self.push(Op::AddConst { a, constant }, value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v *= c);
        self.push(Op::Scale { a, c }, value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows { a }, value)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = log_softmax_rows(self.value(a));
        self.push(Op::LogSoftmaxRows { a }, value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = tanh_map(self.value(a));
        self.push(Op::Tanh { a }, value)
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let value = layer_norm_rows(self.value(a), self.value(gain), self.value(bias));
        self.push(Op::LayerNorm { a, gain, bias }, value)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows, len);
        for r in 0..va.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&va.data[r * va.cols + start..r * va.cols + start + len]);
        }
        self.push(Op::SliceCols { a, start, len }, out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for part in parts {
            let vp = self.value(*part);
            debug_assert_eq!(vp.rows, rows);
            for r in 0..rows {
                out.data[r * total + offset..r * total + offset + vp.cols]
                    .copy_from_slice(vp.row(r));
            }
            offset += vp.cols;
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
        )
    }

    /// Selects one entry as a 1x1 tensor.
    pub fn pick(&mut self, a: NodeId, row: usize, col: usize) -> NodeId {
        let value = Tensor::scalar(self.value(a).get(row, col));
        self.push(Op::Pick { a, row, col }, value)
    }

    /// Frobenius inner product with a constant weight matrix, as 1x1.
    pub fn dot_const(&mut self, a: NodeId, weights: Tensor) -> NodeId {
        let va = self.value(a);
        debug_assert_eq!(va.shape(), weights.shape());
        let mut acc = 0.0;
        for (x, w) in va.data.iter().zip(&weights.data) {
            acc += x * w;
        }
        self.push(Op::DotConst { a, weights }, Tensor::scalar(acc))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v = v.abs());
        self.push(Op::Abs { a }, value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let acc: f64 = self.value(a).data.iter().sum();
        self.push(Op::SumAll { a }, Tensor::scalar(acc))
    }

    /// Gradients of the scalar at `root` with respect to every node.
    /// Entries stay `None` where no gradient flows.
    pub fn backward(&self, root: NodeId) -> Vec<Option<Tensor>> {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(go) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    // Keep leaf gradients; intermediate ones are dropped
                    // once propagated.
                    grads[i] = Some(go);
                }
                Op::Gather { table, ids } => {
                    let shape = self.value(*table).shape();
                    let g = Self::slot(&mut grads, table.0, shape);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..go.cols {
                            g.data[id * g.cols + c] += go.get(r, c);
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let ga = matmul_nt(&go, self.value(*b));
                    let gb = matmul_tn(self.value(*a), &go);
                    Self::accumulate(&mut grads, a.0, ga);
                    Self::accumulate(&mut grads, b.0, gb);
                }
                Op::MatMulNT { a, b } => {
                    let ga = matmul(&go, self.value(*b));
                    let gb = matmul_tn(&go, self.value(*a));
                    Self::accumulate(&mut grads, a.0, ga);
                    Self::accumulate(&mut grads, b.0, gb);
                }
                Op::Add { a, b } => {
                    Self::accumulate(&mut grads, a.0, go.clone());
                    Self::accumulate(&mut grads, b.0, go);
                }
                Op::Sub { a, b } => {
                    let mut neg = go.clone();
                    neg.data.iter_mut().for_each(|v| *v = -*v);
                    Self::accumulate(&mut grads, a.0, go);
                    Self::accumulate(&mut grads, b.0, neg);
                }
                Op::Mul { a, b } => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let ga = Tensor::from_vec(
                        go.rows,
                        go.cols,
                        go.data.iter().zip(&vb.data).map(|(g, y)| g * y).collect(),
                    );
                    let gb = Tensor::from_vec(
                        go.rows,
                        go.cols,
                        go.data.iter().zip(&va.data).map(|(g, x)| g * x).collect(),
                    );
                    Self::accumulate(&mut grads, a.0, ga);
                    Self::accumulate(&mut grads, b.0, gb);
                }
                Op::AddRow { a, row } => {
                    let mut grow = Tensor::zeros(1, go.cols);
                    for r in 0..go.rows {
                        for c in 0..go.cols {
                            grow.data[c] += go.get(r, c);
                        }
                    }
                    Self::accumulate(&mut grads, a.0, go);
                    Self::accumulate(&mut grads, row.0, grow);
                }
                Op::AddConst { a, .. } => {
                    Self::accumulate(&mut grads, a.0, go);
                }
                Op::Scale { a, c } => {
                    let mut ga = go;
                    ga.data.iter_mut().for_each(|v| *v *= c);
                    Self::accumulate(&mut grads, a.0, ga);
                }
                Op::SoftmaxRows { a } => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = (0..y.cols).map(|c| go.get(r, c) * y.get(r, c)).sum();
                        for c in 0..y.cols {
                            ga.set(r, c, y.get(r, c) * (go.get(r, c) - dot));
                        }
                    }
                    Self::accumulate(&mut grads, a.0, ga);
                }
                Op::LogSoftmaxRows { a } => {
                    let x = self.value(*a);
                    let soft = softmax_rows(x);
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let total: f64 = (0..x.cols).map(|c| go.get(r, c)).sum();
                        for c in 0..x.cols {
                            ga.set(r, c, go.get(r, c) - soft.get(r, c) * total);
                        }
                    }
                    Self::accumulate(&mut grads, a.0, ga);
                }
                Op::Tanh { a } => {
                    let y = &node.value;
                    let ga = Tensor::from_vec(
                        y.rows,
                        y.cols,
                        go.data
                            .iter()
                            .zip(&y.data)
                            .map(|(g, t)| g * (1.0 - t * t))
                            .collect(),
                    );
                    Self::accumulate(&mut grads, a.0, ga);
                }
                Op::LayerNorm { a, gain, bias } => {
                    let x = self.value(*a);
                    let g = self.value(*gain);
                    let d = x.cols as f64;
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    let mut ggain = Tensor::zeros(1, x.cols);
                    let mut gbias = Tensor::zeros(1, x.cols);
                    for r in 0..x.rows {
                        let row = x.row(r);
                        let mean = row.iter().sum::<f64>() / d;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let std = (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / std).collect();
                        let gxhat: Vec<f64> =
                            (0..x.cols).map(|c| go.get(r, c) * g.get(0, c)).collect();
                        let mean_gxhat = gxhat.iter().sum::<f64>() / d;
                        let mean_gxhat_xhat =
                            gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                        for c in 0..x.cols {
                            ggain.data[c] += go.get(r, c) * xhat[c];
                            gbias.data[c] += go.get(r, c);
                            ga.set(
                                r,
                                c,
                                (gxhat[c] - mean_gxhat - xhat[c] * mean_gxhat_xhat) / std,
                            );
                        }
                    }
                    Self::accumulate(&mut grads, a.0, ga);
                    Self::accumulate(&mut grads, gain.0, ggain);
                    Self::accumulate(&mut grads, bias.0, gbias);
                }
                Op::SliceCols { a, start, len } => {
                    let va = self.value(*a);
                    let mut ga = Tensor::zeros(va.rows, va.cols);
                    for r in 0..go.rows {
                        for c in 0..*len {
                            ga.data[r * va.cols + start + c] += go.get(r, c);
                        }
                    }
                    Self::accumulate(&mut grads, a.0, ga);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for part in parts {
                        let vp = self.value(*part);
                        let mut gp = Tensor::zeros(vp.rows, vp.cols);
                        for r in 0..vp.rows {
                            for c in 0..vp.cols {
                                gp.set(r, c, go.get(r, offset + c));
                            }
                        }
                        offset += vp.cols;
                        Self::accumulate(&mut grads, part.0, gp);
                    }
                }
                Op::Pick { a, row, col } => {
                    let va = self.value(*a);
                    let shape = va.shape();
                    let g = Self::slot(&mut grads, a.0, shape);
                    g.data[row * shape.1 + col] += go.item();
                }
                Op::DotConst { a, weights } => {
                    let s = go.item();
                    let ga = Tensor::from_vec(
                        weights.rows,
                        weights.cols,
                        weights.data.iter().map(|w| w * s).collect(),
                    );
                    Self::accumulate(&mut grads, a.0, ga);
                }
                Op::Abs { a } => {
                    let x = self.value(*a);
                    let ga = Tensor::from_vec(
                        x.rows,
                        x.cols,
                        go.data
                            .iter()
                            .zip(&x.data)
                            .map(|(g, v)| {
                                if *v > 0.0 {
                                    *g
                                } else if *v < 0.0 {
                                    -*g
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                    Self::accumulate(&mut grads, a.0, ga);
                }
                Op::SumAll { a } => {
                    let va = self.value(*a);
                    let s = go.item();
                    let ga = Tensor::from_vec(va.rows, va.cols, vec![s; va.data.len()]);
                    Self::accumulate(&mut grads, a.0, ga);
                }
            }
        }
        grads
    }

    fn slot<'g>(
        grads: &'g mut [Option<Tensor>],
        idx: usize,
        shape: (usize, usize),
    ) -> &'g mut Tensor {
        grads[idx].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
    }

    fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Recomputes every non-leaf value from the recorded ops and returns
    /// the value at `root`; bitwise-identical to the original evaluation.
    pub fn replay(&self, root: NodeId) -> f64 {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Gather { table, ids } => {
                    let src = &values[table.0];
                    let mut out = Tensor::zeros(ids.len(), src.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        out.data[r * src.cols..(r + 1) * src.cols].copy_from_slice(src.row(id));
                    }
                    out
                }
                Op::MatMul { a, b } => matmul(&values[a.0], &values[b.0]),
                Op::MatMulNT { a, b } => matmul_nt(&values[a.0], &values[b.0]),
                Op::Add { a, b } => {
                    let mut v = values[a.0].clone();
                    v.add_assign(&values[b.0]);
                    v
                }
                Op::Sub { a, b } => {
                    let va = &values[a.0];
                    let vb = &values[b.0];
                    Tensor::from_vec(
                        va.rows,
                        va.cols,
                        va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect(),
                    )
                }
                Op::Mul { a, b } => {
                    let va = &values[a.0];
                    let vb = &values[b.0];
                    Tensor::from_vec(
                        va.rows,
                        va.cols,
                        va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
                    )
                }
                Op::AddRow { a, row } => {
                    let mut v = values[a.0].clone();
                    let vr = &values[row.0];
                    for r in 0..v.rows {
                        for c in 0..v.cols {
                            v.data[r * v.cols + c] += vr.data[c];
                        }
                    }
                    v
                }
                Op::AddConst { a, constant } => {
                    let mut v = values[a.0].clone();
                    v.add_assign(constant);
                    v
                }
                Op::Scale { a, c } => {
                    let mut v = values[a.0].clone();
                    v.data.iter_mut().for_each(|x| *x *= c);
                    v
                }
                Op::SoftmaxRows { a } => softmax_rows(&values[a.0]),
                Op::LogSoftmaxRows { a } => log_softmax_rows(&values[a.0]),
                Op::Tanh { a } => tanh_map(&values[a.0]),
                Op::LayerNorm { a, gain, bias } => {
                    layer_norm_rows(&values[a.0], &values[gain.0], &values[bias.0])
                }
                Op::SliceCols { a, start, len } => {
                    let va = &values[a.0];
                    let mut out = Tensor::zeros(va.rows, *len);
                    for r in 0..va.rows {
                        out.data[r * len..(r + 1) * len].copy_from_slice(
                            &va.data[r * va.cols + start..r * va.cols + start + len],
                        );
                    }
                    out
                }
                Op::ConcatCols { parts } => {
                    let rows = values[parts[0].0].rows;
                    let total: usize = parts.iter().map(|p| values[p.0].cols).sum();
                    let mut out = Tensor::zeros(rows, total);
                    let mut offset = 0;
                    for part in parts {
                        let vp = &values[part.0];
                        for r in 0..rows {
                            out.data[r * total + offset..r * total + offset + vp.cols]
                                .copy_from_slice(vp.row(r));
                        }
                        offset += vp.cols;
                    }
                    out
                }
                Op::Pick { a, row, col } => Tensor::scalar(values[a.0].get(*row, *col)),
                Op::DotConst { a, weights } => {
                    let va = &values[a.0];
                    let mut acc = 0.0;
                    for (x, w) in va.data.iter().zip(&weights.data) {
                        acc += x * w;
                    }
                    Tensor::scalar(acc)
                }
                Op::Abs { a } => {
                    let mut v = values[a.0].clone();
                    v.data.iter_mut().for_each(|x| *x = x.abs());
                    v
                }
                Op::SumAll { a } => Tensor::scalar(values[a.0].data.iter().sum()),
            };
            values.push(value);
        }
        values[root.0].item()
    }
}

/// A finished loss evaluation: the tape, its scalar root, and the
/// parameter leaves to read gradients from.
pub struct GradientTape {
    tape: Tape,
    root: NodeId,
    /// `(param index, leaf node)` for every bound model parameter.
    param_nodes: Vec<(usize, NodeId)>,
}

impl GradientTape {
    pub fn new(tape: Tape, root: NodeId, param_nodes: Vec<(usize, NodeId)>) -> GradientTape {
        GradientTape {
            tape,
            root,
            param_nodes,
        }
    }

    pub fn loss(&self) -> f64 {
        self.tape.value(self.root).item()
    }

    pub fn replay(&self) -> f64 {
        self.tape.replay(self.root)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Parameter gradients indexed like the model's parameter list;
    /// parameters the loss never touched get zero gradients.
    pub fn gradients(&self) -> Result<Vec<Tensor>> {
        let grads = self.tape.backward(self.root);
        let n = self
            .param_nodes
            .iter()
            .map(|(idx, _)| idx + 1)
            .max()
            .unwrap_or(0);
        let mut out: Vec<Tensor> = Vec::with_capacity(n);
        for (idx, node) in &self.param_nodes {
            debug_assert_eq!(*idx, out.len(), "param nodes must be bound in order");
            let shape = self.tape.value(*node).shape();
            let g = match &grads[node.0] {
                Some(g) => g.clone(),
                None => Tensor::zeros(shape.0, shape.1),
            };
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {idx}")));
            }
            out.push(g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0), 0);
        let y = tape.mul(x, x);
        let root = tape.sum_all(y);
        let gt = GradientTape::new(tape, root, vec![(0, x)]);
        assert_eq!(gt.loss(), 9.0);
        assert_eq!(gt.gradients().unwrap()[0].item(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::row_vector(vec![1.0, 2.0]), 0);
        let c = tape.constant(Tensor::scalar(5.0));
        let root = tape.sum_all(c);
        let gt = GradientTape::new(tape, root, vec![(0, w)]);
        let grads = gt.gradients().unwrap();
        assert_eq!(grads[0].data, vec![0.0, 0.0]);
    }

    #[test]
    fn squared_l2_norm_gradient_is_exactly_2w() {
        let w_values = vec![0.5, -1.25, 2.0, 0.0];
        let mut tape = Tape::new();
        let w = tape.param(Tensor::row_vector(w_values.clone()), 0);
        let sq = tape.mul(w, w);
        let root = tape.sum_all(sq);
        let gt = GradientTape::new(tape, root, vec![(0, w)]);
        let grads = gt.gradients().unwrap();
        let expected: Vec<f64> = w_values.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads[0].data, expected);
    }

    #[test]
    fn replay_reproduces_loss_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let a = tape.param(random_tensor(&mut rng, 3, 4), 0);
        let b = tape.param(random_tensor(&mut rng, 4, 3), 1);
        let prod = tape.matmul(a, b);
        let soft = tape.softmax_rows(prod);
        let root = tape.sum_all(soft);
        let gt = GradientTape::new(tape, root, vec![(0, a), (1, b)]);
        assert_eq!(gt.loss().to_bits(), gt.replay().to_bits());
    }

    fn random_tensor(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Central finite differences against the analytic gradient for a
    /// function composed of every differentiable op on the tape.
    #[test]
    fn full_op_set_passes_finite_difference_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let params: Vec<Tensor> = vec![
            random_tensor(&mut rng, 5, 6),  // embedding table
            random_tensor(&mut rng, 6, 6),  // projection
            random_tensor(&mut rng, 1, 6),  // gain
            random_tensor(&mut rng, 1, 6),  // bias
            random_tensor(&mut rng, 1, 6),  // row offset
        ];
        let targets = random_tensor(&mut rng, 3, 6);
        let mask = random_tensor(&mut rng, 3, 6);

        let build = |p: &[Tensor]| -> (Tape, NodeId, Vec<(usize, NodeId)>) {
            let mut tape = Tape::new();
            let table = tape.param(p[0].clone(), 0);
            let proj = tape.param(p[1].clone(), 1);
            let gain = tape.param(p[2].clone(), 2);
            let bias = tape.param(p[3].clone(), 3);
            let row = tape.param(p[4].clone(), 4);

            let x = tape.gather(table, &[0, 2, 4]);
            let x = tape.add_const(x, mask.clone());
            let x = tape.matmul(x, proj);
            let x = tape.layer_norm(x, gain, bias);
            let x = tape.add_row(x, row);
            let left = tape.slice_cols(x, 0, 3);
            let right = tape.slice_cols(x, 3, 3);
            let scores = tape.matmul_nt(left, right);
            let attn = tape.softmax_rows(scores);
            let ctx = tape.matmul(attn, x);
            let joined = tape.concat_cols(&[ctx]);
            let th = tape.tanh(joined);
            let logp = tape.log_softmax_rows(th);
            let ce = tape.dot_const(logp, targets.clone());
            let diff = tape.sub(th, x);
            let l1 = tape.abs(diff);
            let l1 = tape.sum_all(l1);
            let l1 = tape.scale(l1, 0.25);
            let one = tape.pick(th, 1, 2);
            let partial = tape.add(ce, l1);
            let root = tape.add(partial, one);
            let nodes = vec![(0, table), (1, proj), (2, gain), (3, bias), (4, row)];
            (tape, root, nodes)
        };

        let (tape, root, nodes) = build(&params);
        let gt = GradientTape::new(tape, root, nodes);
        let analytic = gt.gradients().unwrap();

        let mut checked = 0;
        let h = 1e-6;
        for p_idx in 0..params.len() {
            for _ in 0..6 {
                let flat = rng.random_range(0..params[p_idx].data.len());
                let mut plus = params.clone();
                plus[p_idx].data[flat] += h;
                let mut minus = params.clone();
                minus[p_idx].data[flat] -= h;
                let (tp, rp, _) = build(&plus);
                let (tm, rm, _) = build(&minus);
                let numeric = (tp.value(rp).item() - tm.value(rm).item()) / (2.0 * h);
                let exact = analytic[p_idx].data[flat];
                let denom = exact.abs().max(1e-8);
                let rel = (exact - numeric).abs() / denom;
                assert!(
                    rel < 1e-5,
                    "param {p_idx}[{flat}]: analytic {exact} vs numeric {numeric} (rel {rel})"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 30);
    }
}
