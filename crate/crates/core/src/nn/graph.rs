//! The computation tape.
//!
//! Nodes hold f64 matrices; operations record enough structure to replay
//! gradients in reverse. Values for shared leaves are `Arc` handles into the
//! owning [`super::ParamSet`], so building a graph never copies parameter
//! tensors. `gather` reads rows out of a (usually large) leaf and reports its
//! gradient sparsely instead of materializing a full-size buffer.

use std::sync::Arc;

use ndarray::{concatenate, Array2, Axis};

use super::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the tape; leaves inserted first keep their insertion
    /// index, which callers use to map gradients back to parameter slots.
    pub fn index(&self) -> usize {
        self.0
    }
}

enum Val {
    Owned(Mat),
    Shared(Arc<Mat>),
}

impl Val {
    fn mat(&self) -> &Mat {
        match self {
            Val::Owned(m) => m,
            Val::Shared(m) => m,
        }
    }
}

enum Op {
    Leaf,
    /// Rows gathered from a leaf table; gradient reported via `SparseGrad`.
    Gather {
        table: NodeId,
        rows: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Broadcast add of a 1 x d row onto every row of a n x d matrix.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    /// Row-wise dot product of two equal-shape matrices -> n x 1.
    RowDot(NodeId, NodeId),
    /// Sum over rows of -log softmax(logits)[target]; scalar output.
    CrossEntropySum {
        logits: NodeId,
        targets: Vec<usize>,
    },
    /// -log sigmoid(pos) summed over pos rows, plus the mean over neg rows
    /// of -log(1 - sigmoid(neg)); scalar output.
    LogisticPairLoss {
        pos: NodeId,
        neg: NodeId,
    },
}

struct Node {
    val: Val,
    grad: Option<Mat>,
    op: Op,
}

/// Sparse gradient contribution for a gathered table: `grad` row `i`
/// belongs to table row `rows[i]`.
#[derive(Debug)]
pub struct SparseGrad {
    pub table: NodeId,
    pub rows: Vec<usize>,
    pub grad: Mat,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    sparse_grads: Vec<SparseGrad>,
}

const LN_EPS: f64 = 1e-5;

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        self.nodes[id.0].val.mat()
    }

    /// Dense gradient of a node after `backward`; zeros if untouched.
    pub fn grad(&self, id: NodeId) -> Mat {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Array2::zeros(self.value(id).dim()),
        }
    }

    /// Dense gradient without allocating when the node never received one.
    pub fn grad_ref(&self, id: NodeId) -> Option<&Mat> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_sparse_grads(&mut self) -> Vec<SparseGrad> {
        std::mem::take(&mut self.sparse_grads)
    }

    fn push(&mut self, val: Mat, op: Op) -> NodeId {
        self.nodes.push(Node {
            val: Val::Owned(val),
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input (no gradient of interest).
    pub fn leaf(&mut self, val: Mat) -> NodeId {
        self.push(val, Op::Leaf)
    }

    /// Shared parameter leaf; no copy.
    pub fn shared_leaf(&mut self, val: Arc<Mat>) -> NodeId {
        self.nodes.push(Node {
            val: Val::Shared(val),
            grad: None,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Gathers `rows` of `table` into a new dense node. The table's gradient
    /// is reported through [`Graph::take_sparse_grads`], not densely.
    pub fn gather(&mut self, table: NodeId, rows: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let mut out = Array2::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&t.row(r));
        }
        self.push(out, Op::Gather { table, rows })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "bias must be 1 x d");
        let out = self.value(a) + &r.row(0);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(gelu_scalar);
        self.push(out, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xm = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        assert_eq!(g.nrows(), 1);
        assert_eq!(b.nrows(), 1);
        let mut out = xm.clone();
        for mut row in out.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[(0, j)] + b[(0, j)];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let out = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(out, Op::SliceCols(a, start, len))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let out = self
            .value(a)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(out, Op::SliceRows(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat shapes");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let out = m
            .mean_axis(Axis(0))
            .expect("nonempty")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a))
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.dim(), bm.dim());
        let mut out = Array2::zeros((am.nrows(), 1));
        for i in 0..am.nrows() {
            out[(i, 0)] = am.row(i).dot(&bm.row(i));
        }
        self.push(out, Op::RowDot(a, b))
    }

    /// Sum over rows of the cross-entropy between row softmax and the target
    /// index.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len());
        let mut loss = 0.0;
        for (row, &t) in l.rows().into_iter().zip(&targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            loss += logsum - row[t];
        }
        let out = Array2::from_elem((1, 1), loss);
        self.push(out, Op::CrossEntropySum { logits, targets })
    }

    /// `sum_i softplus(-pos_i) + mean_j softplus(neg_j)`: the logistic loss
    /// of positives scored high and negatives scored low.
    pub fn logistic_pair_loss(&mut self, pos: NodeId, neg: NodeId) -> NodeId {
        let p = self.value(pos);
        let n = self.value(neg);
        assert_eq!(p.ncols(), 1);
        assert_eq!(n.ncols(), 1);
        let pos_term: f64 = p.iter().map(|&x| softplus(-x)).sum();
        let neg_term: f64 = n.iter().map(|&x| softplus(x)).sum::<f64>() / n.nrows() as f64;
        let out = Array2::from_elem((1, 1), pos_term + neg_term);
        self.push(out, Op::LogisticPairLoss { pos, neg })
    }

    fn add_grad(&mut self, id: NodeId, g: Mat) {
        match &mut self.nodes[id.0].grad {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagates `seed` from a scalar root through the tape.
    pub fn backward(&mut self, root: NodeId, seed: f64) {
        assert_eq!(self.value(root).dim(), (1, 1), "root must be scalar");
        self.nodes[root.0].grad = Some(Array2::from_elem((1, 1), seed));
        for idx in (0..=root.0).rev() {
            let Some(grad) = self.nodes[idx].grad.clone() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Gather { table, rows } => {
                    let (table, rows) = (*table, rows.clone());
                    self.sparse_grads.push(SparseGrad {
                        table,
                        rows,
                        grad,
                    });
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = grad.dot(&self.value(b).t());
                    let gb = self.value(a).t().dot(&grad);
                    self.add_grad(a, ga);
                    self.add_grad(b, gb);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.add_grad(a, grad.t().to_owned());
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, grad.clone());
                    self.add_grad(b, grad);
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let gr = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.add_grad(a, grad);
                    self.add_grad(row, gr);
                }
                Op::Scale(a, f) => {
                    let (a, f) = (*a, *f);
                    self.add_grad(a, grad * f);
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let g = self.value(a).mapv(gelu_grad_scalar) * &grad;
                    self.add_grad(a, g);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let y = self.value_owned(idx);
                    let mut gx = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| grad[(i, j)] * y[(i, j)]).sum();
                        for j in 0..y.ncols() {
                            gx[(i, j)] = y[(i, j)] * (grad[(i, j)] - dot);
                        }
                    }
                    self.add_grad(a, gx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let xm = self.value(x).clone();
                    let g = self.value(gain).clone();
                    let d = xm.ncols() as f64;
                    let mut gx = Array2::zeros(xm.dim());
                    let mut ggain = Array2::zeros((1, xm.ncols()));
                    let mut gbias = Array2::zeros((1, xm.ncols()));
                    for i in 0..xm.nrows() {
                        let row = xm.row(i);
                        let mean = row.mean().unwrap();
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        // xhat_j = (x_j - mean) * inv
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let gy: Vec<f64> = (0..xm.ncols()).map(|j| grad[(i, j)]).collect();
                        for j in 0..xm.ncols() {
                            ggain[(0, j)] += gy[j] * xhat[j];
                            gbias[(0, j)] += gy[j];
                        }
                        // d loss / d xhat
                        let gxhat: Vec<f64> =
                            (0..xm.ncols()).map(|j| gy[j] * g[(0, j)]).collect();
                        let sum_gxhat: f64 = gxhat.iter().sum();
                        let sum_gxhat_xhat: f64 =
                            gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for j in 0..xm.ncols() {
                            gx[(i, j)] = inv / d
                                * (d * gxhat[j] - sum_gxhat - xhat[j] * sum_gxhat_xhat);
                        }
                    }
                    self.add_grad(x, gx);
                    self.add_grad(gain, ggain);
                    self.add_grad(bias, gbias);
                }
                Op::SliceCols(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let mut g = Array2::zeros(self.value(a).dim());
                    g.slice_mut(ndarray::s![.., start..start + len])
                        .assign(&grad);
                    self.add_grad(a, g);
                }
                Op::SliceRows(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let mut g = Array2::zeros(self.value(a).dim());
                    g.slice_mut(ndarray::s![start..start + len, ..])
                        .assign(&grad);
                    self.add_grad(a, g);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(p).ncols();
                        let gp = grad.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        offset += w;
                        self.add_grad(p, gp);
                    }
                }
                Op::MeanRows(a) => {
                    let a = *a;
                    let n = self.value(a).nrows() as f64;
                    let g = grad.broadcast(self.value(a).dim()).unwrap().to_owned() / n;
                    self.add_grad(a, g);
                }
                Op::RowDot(a, b) => {
                    let (a, b) = (*a, *b);
                    let am = self.value(a).clone();
                    let bm = self.value(b).clone();
                    let mut ga = Array2::zeros(am.dim());
                    let mut gb = Array2::zeros(bm.dim());
                    for i in 0..am.nrows() {
                        let s = grad[(i, 0)];
                        for j in 0..am.ncols() {
                            ga[(i, j)] = s * bm[(i, j)];
                            gb[(i, j)] = s * am[(i, j)];
                        }
                    }
                    self.add_grad(a, ga);
                    self.add_grad(b, gb);
                }
                Op::CrossEntropySum { logits, targets } => {
                    let (logits, targets) = (*logits, targets.clone());
                    let probs = softmax_rows(self.value(logits));
                    let mut g = probs;
                    for (i, &t) in targets.iter().enumerate() {
                        g[(i, t)] -= 1.0;
                    }
                    self.add_grad(logits, g * grad[(0, 0)]);
                }
                Op::LogisticPairLoss { pos, neg } => {
                    let (pos, neg) = (*pos, *neg);
                    let s = grad[(0, 0)];
                    let gp = self.value(pos).mapv(|x| s * (sigmoid(x) - 1.0));
                    let k = self.value(neg).nrows() as f64;
                    let gn = self.value(neg).mapv(|x| s * sigmoid(x) / k);
                    self.add_grad(pos, gp);
                    self.add_grad(neg, gn);
                }
            }
        }
    }

    fn value_owned(&self, idx: usize) -> Mat {
        self.nodes[idx].val.mat().clone()
    }
}
