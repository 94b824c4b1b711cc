//! Tape-based reverse-mode autodiff over `Array2<f64>`.

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    /// a @ b
    MatMul(NodeId, NodeId),
    /// a @ b^T
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// elementwise product
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// x[N x D] + row[1 x D]
    AddRow(NodeId, NodeId),
    /// x[N x D] * row[1 x D]
    MulRow(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    GatherCols(NodeId, Vec<usize>),
    StackRows(Vec<NodeId>),
    MeanAll(NodeId),
    /// row-wise (x - mean) / sqrt(var + eps); scale/shift are separate ops
    LayerNormRows(NodeId, f64),
    /// mean over weighted frames of (logsumexp(z_t) - z_t[label_t])
    CrossEntropyLogits(NodeId, Vec<usize>, Vec<f64>),
    /// mean binary cross-entropy against a constant target matrix
    BceMean(NodeId, Mat, f64),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Define-by-run computation tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.leaf(Mat::zeros((rows, cols)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// a @ b^T without materialising the transpose on the tape.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(x) + &self.value(row).row(0);
        self.push(v, Op::AddRow(x, row))
    }

    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(x) * &self.value(row).row(0);
        self.push(v, Op::MulRow(x, row))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        debug_assert_eq!(va.nrows(), vb.nrows());
        let mut v = Mat::zeros((va.nrows(), va.ncols() + vb.ncols()));
        v.slice_mut(s![.., ..va.ncols()]).assign(va);
        v.slice_mut(s![.., va.ncols()..]).assign(vb);
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let v = self.value(a).slice(s![r0..r1, ..]).to_owned();
        self.push(v, Op::SliceRows(a, r0, r1))
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let v = self.value(a).slice(s![.., c0..c1]).to_owned();
        self.push(v, Op::SliceCols(a, c0, c1))
    }

    /// Rows re-ordered/duplicated by index; also used for subsample, upsample
    /// by repetition, shuffles and clamped shifts.
    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let mut v = Mat::zeros((idx.len(), va.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&va.row(r));
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn gather_cols(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let mut v = Mat::zeros((va.nrows(), idx.len()));
        for (j, &c) in idx.iter().enumerate() {
            v.column_mut(j).assign(&va.column(c));
        }
        self.push(v, Op::GatherCols(a, idx))
    }

    pub fn stack_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        debug_assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Mat::zeros((rows, cols));
        let mut r = 0;
        for &p in &parts {
            let vp = self.value(p);
            v.slice_mut(s![r..r + vp.nrows(), ..]).assign(vp);
            r += vp.nrows();
        }
        self.push(v, Op::StackRows(parts))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let m = va.sum() / (va.len() as f64);
        self.push(Mat::from_elem((1, 1), m), Op::MeanAll(a))
    }

    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for mut row in v.rows_mut() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(v, Op::LayerNormRows(a, eps))
    }

    /// Mean cross-entropy of row logits against integer labels, with
    /// per-frame weights (0 drops a frame). Result is 1x1.
    pub fn cross_entropy_logits(
        &mut self,
        logits: NodeId,
        labels: Vec<usize>,
        weights: Vec<f64>,
    ) -> NodeId {
        let z = self.value(logits);
        debug_assert_eq!(z.nrows(), labels.len());
        debug_assert_eq!(z.nrows(), weights.len());
        let wsum: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if wsum > 0.0 {
            for (t, row) in z.rows().into_iter().enumerate() {
                if weights[t] == 0.0 {
                    continue;
                }
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                loss += weights[t] * (lse - row[labels[t]]);
            }
            loss /= wsum;
        }
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropyLogits(logits, labels, weights),
        )
    }

    /// Mean binary cross-entropy of predictions in (0,1) against a constant
    /// 0/1 target matrix; predictions are clamped to [eps, 1-eps].
    pub fn bce_mean(&mut self, pred: NodeId, target: Mat, eps: f64) -> NodeId {
        let p = self.value(pred);
        debug_assert_eq!(p.dim(), target.dim());
        let loss = bce_mean_value(p, &target, eps);
        self.push(Mat::from_elem((1, 1), loss), Op::BceMean(pred, target, eps))
    }

    /// Reverse pass from `root` (seeded with ones). Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Mat::ones(rv.dim()));

        for i in (0..=root.0).rev() {
            // By construction children have smaller ids, so grads[i] is
            // complete here. Clone (not take): callers read leaves afterwards.
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value);
                    let gb = g.t().dot(&self.nodes[a.0].value);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::MulRow(x, row) => {
                    let vx = &self.nodes[x.0].value;
                    let vr = &self.nodes[row.0].value;
                    let gx = &g * &vr.row(0);
                    let gr = (&g * vx).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, &g * &(y * &(1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, &g * &(1.0 - y * y));
                }
                Op::Relu(a) => {
                    let mask = node.value.mapv(|y| if y > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let row_dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, &gy - &(y * &row_dot));
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].value.ncols();
                    accumulate(&mut grads, *a, g.slice(s![.., ..ca]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![.., ca..]).to_owned());
                }
                Op::SliceRows(a, r0, _r1) => {
                    let va = &self.nodes[a.0].value;
                    let mut ga = Mat::zeros(va.dim());
                    ga.slice_mut(s![*r0..*r0 + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, c0, _c1) => {
                    let va = &self.nodes[a.0].value;
                    let mut ga = Mat::zeros(va.dim());
                    ga.slice_mut(s![.., *c0..*c0 + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let va = &self.nodes[a.0].value;
                    let mut ga = Mat::zeros(va.dim());
                    for (i, &r) in idx.iter().enumerate() {
                        let mut target = ga.row_mut(r);
                        target += &g.row(i);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherCols(a, idx) => {
                    let va = &self.nodes[a.0].value;
                    let mut ga = Mat::zeros(va.dim());
                    for (j, &c) in idx.iter().enumerate() {
                        let mut target = ga.column_mut(c);
                        target += &g.column(j);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::StackRows(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.nrows();
                        accumulate(&mut grads, p, g.slice(s![r..r + n, ..]).to_owned());
                        r += n;
                    }
                }
                Op::MeanAll(a) => {
                    let va = &self.nodes[a.0].value;
                    let k = g[[0, 0]] / (va.len() as f64);
                    accumulate(&mut grads, *a, Mat::from_elem(va.dim(), k));
                }
                Op::LayerNormRows(a, eps) => {
                    let va = &self.nodes[a.0].value;
                    let y = &node.value;
                    let d = va.ncols() as f64;
                    let mut ga = Mat::zeros(va.dim());
                    for r in 0..va.nrows() {
                        let xr = va.row(r);
                        let mean = xr.sum() / d;
                        let var = xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let g_mean = gr.sum() / d;
                        let gy_mean = gr
                            .iter()
                            .zip(yr.iter())
                            .map(|(gi, yi)| gi * yi)
                            .sum::<f64>()
                            / d;
                        for c in 0..va.ncols() {
                            ga[[r, c]] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropyLogits(z, labels, weights) => {
                    let vz = &self.nodes[z.0].value;
                    let wsum: f64 = weights.iter().sum();
                    let mut gz = Mat::zeros(vz.dim());
                    if wsum > 0.0 {
                        let scale = g[[0, 0]] / wsum;
                        for (t, row) in vz.rows().into_iter().enumerate() {
                            if weights[t] == 0.0 {
                                continue;
                            }
                            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
                            let denom: f64 = exps.iter().sum();
                            for c in 0..row.len() {
                                let p = exps[c] / denom;
                                let onehot = if c == labels[t] { 1.0 } else { 0.0 };
                                gz[[t, c]] = scale * weights[t] * (p - onehot);
                            }
                        }
                    }
                    accumulate(&mut grads, *z, gz);
                }
                Op::BceMean(pred, target, eps) => {
                    let p = &self.nodes[pred.0].value;
                    let n = p.len() as f64;
                    let scale = g[[0, 0]] / n;
                    let mut gp = Mat::zeros(p.dim());
                    for ((idx, &pv), &tv) in p.indexed_iter().zip(target.iter()) {
                        if pv >= *eps && pv <= 1.0 - *eps {
                            gp[idx] = scale * (-tv / pv + (1.0 - tv) / (1.0 - pv));
                        }
                    }
                    accumulate(&mut grads, *pred, gp);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Per-node gradients from a backward pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Gradient w.r.t. `id`, zeros if the node does not influence the root.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Mat {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Mat::zeros(graph.value(id).dim()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax_rows(z: &Mat) -> Mat {
    let mut v = z.clone();
    for mut row in v.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - mx).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    v
}

/// Shared BCE formula: mean over all entries with predictions clamped to
/// [eps, 1-eps]. Used by both the tape op and the standalone PIT loss so the
/// two paths agree exactly.
pub fn bce_mean_value(pred: &Mat, target: &Mat, eps: f64) -> f64 {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let p = p.clamp(eps, 1.0 - eps);
        loss += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    }
    loss / n
}
