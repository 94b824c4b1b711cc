//! Named parameter bank and the layers used by the diarizer and acoustic models.
//!
//! Layers hold indices into a [`ParamBank`]; a forward pass first binds the
//! bank onto a fresh tape (`ParamBank::bind`) and then applies layers against
//! the bound ids. This keeps parameters, optimizer state and checkpoints in
//! one flat, ordered store.

use ndarray::s;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::graph::{Graph, Mat, NodeId};

/// Index of a tensor in a [`ParamBank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamIdx(pub usize);

/// Flat, ordered store of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamBank {
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl ParamBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Mat) -> ParamIdx {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamIdx(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Mat {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Mat {
        &mut self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Put every tensor on the tape as a leaf, in bank order.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let ids = self.tensors.iter().map(|t| g.leaf(t.clone())).collect();
        BoundParams { ids }
    }

    /// Xavier-uniform matrix.
    pub fn xavier(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Mat {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
    }
}

/// Parameter ids on a specific tape, aligned with the bank's order.
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn id(&self, p: ParamIdx) -> NodeId {
        self.ids[p.0]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Dense layer `x @ w (+ b)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    w: ParamIdx,
    b: Option<ParamIdx>,
}

impl Linear {
    pub fn new(
        bank: &mut ParamBank,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w = bank.add(&format!("{name}.w"), ParamBank::xavier(rng, din, dout));
        let b = bias.then(|| bank.add(&format!("{name}.b"), Mat::zeros((1, dout))));
        Linear { w, b }
    }

    /// Wrap existing bank slots (e.g. when rebuilding from a checkpoint).
    pub fn from_indices(w: ParamIdx, b: Option<ParamIdx>) -> Self {
        Linear { w, b }
    }

    pub fn apply(&self, g: &mut Graph, bp: &BoundParams, x: NodeId) -> NodeId {
        let y = g.matmul(x, bp.id(self.w));
        match self.b {
            Some(b) => g.add_row(y, bp.id(b)),
            None => y,
        }
    }
}

/// Single-direction LSTM over a whole sequence.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    w_ih: ParamIdx,
    w_hh: ParamIdx,
    b: ParamIdx,
    hidden: usize,
}

impl Lstm {
    pub fn new(
        bank: &mut ParamBank,
        name: &str,
        din: usize,
        hidden: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w_ih = bank.add(&format!("{name}.w_ih"), ParamBank::xavier(rng, din, 4 * hidden));
        let w_hh = bank.add(
            &format!("{name}.w_hh"),
            ParamBank::xavier(rng, hidden, 4 * hidden),
        );
        // forget-gate bias starts at 1
        let mut bias = Mat::zeros((1, 4 * hidden));
        bias.slice_mut(s![0, hidden..2 * hidden]).fill(1.0);
        let b = bank.add(&format!("{name}.b"), bias);
        Lstm { w_ih, w_hh, b, hidden }
    }

    /// Run over `x` (N x Din) and return hidden states (N x H) in input order.
    /// `reverse` scans the sequence backwards (states still returned in input
    /// order). Also returns the final (h, c).
    pub fn run(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        x: NodeId,
        reverse: bool,
    ) -> (NodeId, NodeId, NodeId) {
        let n = g.value(x).nrows();
        let h = self.hidden;
        // input contribution for all frames at once
        let xi = g.matmul(x, bp.id(self.w_ih));
        let xi = g.add_row(xi, bp.id(self.b));

        let mut hs: Vec<NodeId> = vec![NodeId(0); n];
        let mut hprev = g.zeros(1, h);
        let mut cprev = g.zeros(1, h);
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let (hn, cn) = self.step_from_input_row(g, bp, xi, t, hprev, cprev);
            hprev = hn;
            cprev = cn;
            hs[t] = hn;
        }
        let stacked = g.stack_rows(hs);
        (stacked, hprev, cprev)
    }

    /// One step given the precomputed input contribution row `t` of `xi`.
    fn step_from_input_row(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        xi: NodeId,
        t: usize,
        hprev: NodeId,
        cprev: NodeId,
    ) -> (NodeId, NodeId) {
        let h = self.hidden;
        let xrow = g.slice_rows(xi, t, t + 1);
        let hh = g.matmul(hprev, bp.id(self.w_hh));
        let gates = g.add(xrow, hh);
        let i = g.slice_cols(gates, 0, h);
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, h, 2 * h);
        let f = g.sigmoid(f);
        let cc = g.slice_cols(gates, 2 * h, 3 * h);
        let cc = g.tanh(cc);
        let o = g.slice_cols(gates, 3 * h, 4 * h);
        let o = g.sigmoid(o);
        let fc = g.mul(f, cprev);
        let ic = g.mul(i, cc);
        let cn = g.add(fc, ic);
        let ct = g.tanh(cn);
        let hn = g.mul(o, ct);
        (hn, cn)
    }

    /// One step with an explicit input row (used by the attractor decoder).
    pub fn step(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        x: NodeId,
        hprev: NodeId,
        cprev: NodeId,
    ) -> (NodeId, NodeId) {
        let xi = g.matmul(x, bp.id(self.w_ih));
        let xi = g.add_row(xi, bp.id(self.b));
        self.step_from_input_row(g, bp, xi, 0, hprev, cprev)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// Stack of bidirectional LSTM layers; per layer, forward and backward hidden
/// states are concatenated (output width 2 * units).
#[derive(Clone, Debug)]
pub struct BlstmStack {
    layers: Vec<(Lstm, Lstm)>,
}

impl BlstmStack {
    pub fn new(
        bank: &mut ParamBank,
        name: &str,
        din: usize,
        units: usize,
        num_layers: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(num_layers);
        let mut input = din;
        for l in 0..num_layers {
            let fwd = Lstm::new(bank, &format!("{name}.{l}.fwd"), input, units, rng);
            let bwd = Lstm::new(bank, &format!("{name}.{l}.bwd"), input, units, rng);
            layers.push((fwd, bwd));
            input = 2 * units;
        }
        BlstmStack { layers }
    }

    pub fn apply(&self, g: &mut Graph, bp: &BoundParams, x: NodeId) -> NodeId {
        let mut cur = x;
        for (fwd, bwd) in &self.layers {
            let (hf, _, _) = fwd.run(g, bp, cur, false);
            let (hb, _, _) = bwd.run(g, bp, cur, true);
            cur = g.concat_cols(hf, hb);
        }
        cur
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Time-delay layer: taps at {-offset, 0, +offset} with edge replication,
/// followed by ReLU.
#[derive(Clone, Copy, Debug)]
pub struct Tdnn {
    w_prev: ParamIdx,
    w_cur: ParamIdx,
    w_next: ParamIdx,
    b: ParamIdx,
    offset: usize,
}

impl Tdnn {
    pub fn new(
        bank: &mut ParamBank,
        name: &str,
        din: usize,
        dout: usize,
        offset: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Tdnn {
            w_prev: bank.add(&format!("{name}.w_prev"), ParamBank::xavier(rng, din, dout)),
            w_cur: bank.add(&format!("{name}.w_cur"), ParamBank::xavier(rng, din, dout)),
            w_next: bank.add(&format!("{name}.w_next"), ParamBank::xavier(rng, din, dout)),
            b: bank.add(&format!("{name}.b"), Mat::zeros((1, dout))),
            offset,
        }
    }

    pub fn apply(&self, g: &mut Graph, bp: &BoundParams, x: NodeId) -> NodeId {
        let n = g.value(x).nrows();
        let k = self.offset;
        let idx_prev: Vec<usize> = (0..n).map(|t| t.saturating_sub(k)).collect();
        let idx_next: Vec<usize> = (0..n).map(|t| (t + k).min(n - 1)).collect();
        let xp = g.gather_rows(x, idx_prev);
        let xn = g.gather_rows(x, idx_next);
        let yp = g.matmul(xp, bp.id(self.w_prev));
        let yc = g.matmul(x, bp.id(self.w_cur));
        let yn = g.matmul(xn, bp.id(self.w_next));
        let s1 = g.add(yp, yc);
        let s2 = g.add(s1, yn);
        let y = g.add_row(s2, bp.id(self.b));
        g.relu(y)
    }
}

/// Post-norm transformer encoder block (multi-head self-attention + FF),
/// without positional encodings.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff1: Linear,
    ff2: Linear,
    ln1_gamma: ParamIdx,
    ln1_beta: ParamIdx,
    ln2_gamma: ParamIdx,
    ln2_beta: ParamIdx,
    heads: usize,
    dim: usize,
}

impl SelfAttentionBlock {
    pub fn new(
        bank: &mut ParamBank,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        assert!(dim % heads == 0, "model dim must be divisible by heads");
        SelfAttentionBlock {
            wq: Linear::new(bank, &format!("{name}.wq"), dim, dim, true, rng),
            wk: Linear::new(bank, &format!("{name}.wk"), dim, dim, true, rng),
            wv: Linear::new(bank, &format!("{name}.wv"), dim, dim, true, rng),
            wo: Linear::new(bank, &format!("{name}.wo"), dim, dim, true, rng),
            ff1: Linear::new(bank, &format!("{name}.ff1"), dim, ff_dim, true, rng),
            ff2: Linear::new(bank, &format!("{name}.ff2"), ff_dim, dim, true, rng),
            ln1_gamma: bank.add(&format!("{name}.ln1.gamma"), Mat::ones((1, dim))),
            ln1_beta: bank.add(&format!("{name}.ln1.beta"), Mat::zeros((1, dim))),
            ln2_gamma: bank.add(&format!("{name}.ln2.gamma"), Mat::ones((1, dim))),
            ln2_beta: bank.add(&format!("{name}.ln2.beta"), Mat::zeros((1, dim))),
            heads,
            dim,
        }
    }

    pub fn apply(&self, g: &mut Graph, bp: &BoundParams, x: NodeId) -> NodeId {
        let q = self.wq.apply(g, bp, x);
        let k = self.wk.apply(g, bp, x);
        let v = self.wv.apply(g, bp, x);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, c0, c1);
            let kh = g.slice_cols(k, c0, c1);
            let vh = g.slice_cols(v, c0, c1);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            head_outs.push(g.matmul(attn, vh));
        }
        let mut joined = head_outs[0];
        for &h in &head_outs[1..] {
            joined = g.concat_cols(joined, h);
        }
        let attn_out = self.wo.apply(g, bp, joined);
        let res1 = g.add(x, attn_out);
        let n1 = g.layer_norm_rows(res1, 1e-5);
        let n1 = g.mul_row(n1, bp.id(self.ln1_gamma));
        let n1 = g.add_row(n1, bp.id(self.ln1_beta));

        let f = self.ff1.apply(g, bp, n1);
        let f = g.relu(f);
        let f = self.ff2.apply(g, bp, f);
        let res2 = g.add(n1, f);
        let n2 = g.layer_norm_rows(res2, 1e-5);
        let n2 = g.mul_row(n2, bp.id(self.ln2_gamma));
        g.add_row(n2, bp.id(self.ln2_beta))
    }
}
