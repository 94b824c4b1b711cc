//! Speaker-activity-conditioned acoustic models and baselines.
//!
//! Two conditioned variants share a learned speaker-embedding branch: ICAM
//! concatenates the embedding to the input features before a deep BLSTM
//! stack, while GFAM uses the embedding to gate intermediate hidden features
//! through a sigmoid mask. The unconditioned baselines (BLSTM-iso and
//! BLSTM-mix, differing only in training data) append a frozen projection of
//! pooled features as a speaker feature. All models emit per-frame senone
//! posteriors and are trained with cross-entropy to per-speaker targets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{
    collect_grads, Adam, BlstmStack, BoundParams, Graph, Linear, Mat, NodeId, ParamBank, Tdnn,
};

/// Seed of the frozen baseline speaker-feature projection (not trained, so
/// it is reproduced from this constant rather than checkpointed).
const SPEAKER_FEATURE_SEED: u64 = 0x1bec_7041;

// ---------------------------------------------------------------------------
// Configuration and model kinds
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmKind {
    Icam,
    Gfam,
    BlstmIso,
    BlstmMix,
}

impl AmKind {
    pub fn label(&self) -> &'static str {
        match self {
            AmKind::Icam => "icam",
            AmKind::Gfam => "gfam",
            AmKind::BlstmIso => "blstm-iso",
            AmKind::BlstmMix => "blstm-mix",
        }
    }

    pub fn is_conditioned(&self) -> bool {
        matches!(self, AmKind::Icam | AmKind::Gfam)
    }

    fn checkpoint_kind(&self) -> String {
        format!("am-{}", self.label())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AmConfig {
    /// Stacked input feature width.
    pub input_dim: usize,
    /// Output size of the embedding branch's linear and TDNN layers.
    pub tdnn_dim: usize,
    /// Temporal offset of each TDNN layer's outer taps.
    pub tdnn_context: usize,
    pub embedding_dim: usize,
    /// BLSTM units per direction.
    pub blstm_units: usize,
    /// Depth of the main stack (ICAM and the baselines).
    pub main_blstm_layers: usize,
    /// GFAM: layers before the gate producing the hidden features H.
    pub gfam_pre_layers: usize,
    /// GFAM: layers after the gate.
    pub gfam_post_layers: usize,
    /// Output classes including class 0 (speaker inactive).
    pub num_senones: usize,
    /// Train inactive-speaker frames to class 0 instead of masking them out
    /// of the loss.
    pub train_inactive_as_class0: bool,
}

impl Default for AmConfig {
    fn default() -> Self {
        AmConfig {
            input_dim: 200,
            tdnn_dim: 64,
            tdnn_context: 3,
            embedding_dim: 100,
            blstm_units: 64,
            main_blstm_layers: 6,
            gfam_pre_layers: 2,
            gfam_post_layers: 4,
            num_senones: 64,
            train_inactive_as_class0: true,
        }
    }
}

impl AmConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.tdnn_dim,
            self.tdnn_context,
            self.embedding_dim,
            self.blstm_units,
            self.main_blstm_layers,
            self.gfam_pre_layers,
            self.gfam_post_layers,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::UnsupportedConfig("zero-sized acoustic model dimension".into()));
        }
        if self.num_senones < 2 {
            return Err(Error::UnsupportedConfig(
                "need at least class 0 plus one speech senone".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Speaker identity vector produced by the embedding branch. The zero vector
/// is reserved for "no active frames".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn is_silence(&self) -> bool {
        self.vector.iter().all(|&v| v == 0.0)
    }
}

/// Sigmoid gate over hidden features; every entry lies strictly in (0,1).
#[derive(Clone, Debug)]
pub struct GateMask {
    pub mask: Mat,
}

// ---------------------------------------------------------------------------
// Pooling and embedding analysis
// ---------------------------------------------------------------------------

/// Activity-weighted average over frames: sum(activity[t] * h[t]) divided by
/// sum(activity). Returns the zero vector when no frame has weight.
pub fn weighted_average_pool(h: &Mat, activity: &[f64]) -> Result<Vec<f64>> {
    if h.nrows() != activity.len() {
        return Err(Error::RejectedInput(format!(
            "{} feature frames vs {} activity weights",
            h.nrows(),
            activity.len()
        )));
    }
    if activity.iter().any(|&a| a < 0.0) {
        return Err(Error::RejectedInput("negative activity weight".into()));
    }
    let total: f64 = activity.iter().sum();
    let mut out = vec![0.0; h.ncols()];
    if total == 0.0 {
        return Ok(out);
    }
    for (t, &w) in activity.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (d, o) in out.iter_mut().enumerate() {
            *o += w * h[[t, d]];
        }
    }
    for o in &mut out {
        *o /= total;
    }
    Ok(out)
}

/// Normalized inner product of two embeddings, in [-1, 1].
pub fn embedding_cross_correlation(c1: &[f64], c2: &[f64]) -> Result<f64> {
    if c1.len() != c2.len() {
        return Err(Error::RejectedInput(format!(
            "embedding dims differ: {} vs {}",
            c1.len(),
            c2.len()
        )));
    }
    let dot: f64 = c1.iter().zip(c2).map(|(a, b)| a * b).sum();
    let n1: f64 = c1.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2: f64 = c2.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::UndefinedValue(
            "cross-correlation undefined for a zero-norm embedding".into(),
        ));
    }
    Ok(dot / (n1 * n2))
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Embedding branch: linear, two TDNN layers, activity-weighted pooling,
/// then a bias-free linear so the reserved all-silent case maps to zero.
struct EmbedBranch {
    lin_in: Linear,
    tdnn1: Tdnn,
    tdnn2: Tdnn,
    lin_out: Linear,
}

impl EmbedBranch {
    fn new(bank: &mut ParamBank, cfg: &AmConfig, rng: &mut ChaCha12Rng) -> Self {
        EmbedBranch {
            lin_in: Linear::new(bank, "embed.lin_in", cfg.input_dim, cfg.tdnn_dim, true, rng),
            tdnn1: Tdnn::new(bank, "embed.tdnn1", cfg.tdnn_dim, cfg.tdnn_dim, cfg.tdnn_context, rng),
            tdnn2: Tdnn::new(bank, "embed.tdnn2", cfg.tdnn_dim, cfg.tdnn_dim, cfg.tdnn_context, rng),
            lin_out: Linear::new(bank, "embed.lin_out", cfg.tdnn_dim, cfg.embedding_dim, false, rng),
        }
    }

    /// Embedding node (1 x embedding_dim) for the given activity weights.
    fn apply(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        x: NodeId,
        activity: &[f64],
    ) -> Result<NodeId> {
        let h = self.lin_in.apply(g, bp, x);
        let h = self.tdnn1.apply(g, bp, h);
        let h = self.tdnn2.apply(g, bp, h);
        let total: f64 = activity.iter().sum();
        if activity.iter().any(|&a| a < 0.0) {
            return Err(Error::RejectedInput("negative activity weight".into()));
        }
        if total == 0.0 {
            let dim = g.value(h).ncols();
            let zero = g.zeros(1, dim);
            return Ok(self.lin_out.apply(g, bp, zero));
        }
        let weights: Vec<f64> = activity.iter().map(|&a| a / total).collect();
        let w = g.leaf(Mat::from_shape_vec((1, weights.len()), weights).expect("row vector"));
        let pooled = g.matmul(w, h);
        Ok(self.lin_out.apply(g, bp, pooled))
    }
}

enum Arch {
    /// Embedding concatenated to the input of one deep stack.
    Conditioned { main: BlstmStack, out: Linear },
    /// Hidden features from a pre-stack, gated by a mask computed from the
    /// embedding, then a post-stack.
    Gated { pre: BlstmStack, mask: Linear, post: BlstmStack, out: Linear },
    /// Frozen speaker feature appended to the input (baselines).
    Appended { main: BlstmStack, out: Linear },
}

/// Nodes of one forward pass kept around for shape inspection.
struct GraphTrace {
    /// Concatenated input handed to a recurrent stack (features ++ broadcast
    /// conditioning; hidden features ++ conditioning for the gated model).
    joined: NodeId,
    /// Hidden features: the main-stack output, or the pre-gate features H of
    /// the gated model.
    hidden: NodeId,
    /// Sigmoid gate mask M (gated model only).
    mask: Option<NodeId>,
    logits: NodeId,
}

/// Edge dimensions of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardShapes {
    pub concat_input: (usize, usize),
    pub hidden: (usize, usize),
    pub mask: Option<(usize, usize)>,
    pub posteriors: (usize, usize),
}

pub struct AcousticModel {
    pub kind: AmKind,
    pub cfg: AmConfig,
    pub bank: ParamBank,
    embed: Option<EmbedBranch>,
    arch: Arch,
    /// Frozen projection for the baseline speaker feature.
    feature_proj: Option<Mat>,
}

/// Conditioning input for a forward pass.
pub enum Conditioning<'a> {
    /// Per-frame activity of the target speaker (conditioned models; also
    /// accepted by baselines, which pool their frozen projection over it).
    Activity(&'a [f64]),
    /// Precomputed 1 x embedding_dim speaker feature (baselines only).
    Feature(&'a Mat),
}

impl AcousticModel {
    pub fn new(kind: AmKind, cfg: AmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut bank = ParamBank::new();
        let width = 2 * cfg.blstm_units;
        let (embed, arch, feature_proj) = match kind {
            AmKind::Icam => {
                let embed = EmbedBranch::new(&mut bank, &cfg, &mut rng);
                let main = BlstmStack::new(
                    &mut bank,
                    "main",
                    cfg.input_dim + cfg.embedding_dim,
                    cfg.blstm_units,
                    cfg.main_blstm_layers,
                    &mut rng,
                );
                let out = Linear::new(&mut bank, "out", width, cfg.num_senones, true, &mut rng);
                (Some(embed), Arch::Conditioned { main, out }, None)
            }
            AmKind::Gfam => {
                let embed = EmbedBranch::new(&mut bank, &cfg, &mut rng);
                let pre = BlstmStack::new(
                    &mut bank,
                    "pre",
                    cfg.input_dim,
                    cfg.blstm_units,
                    cfg.gfam_pre_layers,
                    &mut rng,
                );
                let mask = Linear::new(
                    &mut bank,
                    "gate",
                    width + cfg.embedding_dim,
                    width,
                    true,
                    &mut rng,
                );
                let post = BlstmStack::new(
                    &mut bank,
                    "post",
                    width,
                    cfg.blstm_units,
                    cfg.gfam_post_layers,
                    &mut rng,
                );
                let out = Linear::new(&mut bank, "out", width, cfg.num_senones, true, &mut rng);
                (Some(embed), Arch::Gated { pre, mask, post, out }, None)
            }
            AmKind::BlstmIso | AmKind::BlstmMix => {
                let main = BlstmStack::new(
                    &mut bank,
                    "main",
                    cfg.input_dim + cfg.embedding_dim,
                    cfg.blstm_units,
                    cfg.main_blstm_layers,
                    &mut rng,
                );
                let out = Linear::new(&mut bank, "out", width, cfg.num_senones, true, &mut rng);
                let mut proj_rng = ChaCha12Rng::seed_from_u64(SPEAKER_FEATURE_SEED);
                let proj = ParamBank::xavier(&mut proj_rng, cfg.input_dim, cfg.embedding_dim);
                (None, Arch::Appended { main, out }, Some(proj))
            }
        };
        Ok(AcousticModel { kind, cfg, bank, embed, arch, feature_proj })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_value(self.cfg)?;
        crate::nn::checkpoint::save_checkpoint(path, &self.kind.checkpoint_kind(), &config, &self.bank)
    }

    pub fn load(path: &Path, kind: AmKind) -> Result<Self> {
        let (header, bank) =
            crate::nn::checkpoint::load_checkpoint_expecting(path, &kind.checkpoint_kind())?;
        let cfg: AmConfig = serde_json::from_value(header.config)?;
        let mut model = AcousticModel::new(kind, cfg, 0)?;
        crate::nn::checkpoint::restore_into(&mut model.bank, &bank)?;
        Ok(model)
    }

    /// Frozen 1 x embedding_dim speaker feature for the baselines: the
    /// activity-pooled features pushed through a fixed random projection.
    pub fn speaker_feature(&self, x: &Mat, activity: &[f64]) -> Result<Mat> {
        let proj = self.feature_proj.as_ref().ok_or_else(|| {
            Error::UnsupportedConfig(format!(
                "{} derives its speaker feature from the embedding branch",
                self.kind.label()
            ))
        })?;
        let pooled = weighted_average_pool(x, activity)?;
        let pooled = Mat::from_shape_vec((1, pooled.len()), pooled).expect("row vector");
        Ok(pooled.dot(proj))
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.ncols() != self.cfg.input_dim {
            return Err(Error::RejectedInput(format!(
                "feature width {} does not match input_dim {}",
                x.ncols(),
                self.cfg.input_dim
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::RejectedInput("empty feature sequence".into()));
        }
        Ok(())
    }

    /// Pre-softmax logits; optionally also returns the gate-mask node.
    fn logits_graph(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        x: &Mat,
        cond: &Conditioning,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let trace = self.logits_trace(g, bp, x, cond)?;
        Ok((trace.logits, trace.mask))
    }

    /// Full forward pass keeping the nodes whose shapes characterize the
    /// architecture: the concatenated stack input, the hidden features (the
    /// pre-gate features H for the gated model), the gate mask, the logits.
    fn logits_trace(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        x: &Mat,
        cond: &Conditioning,
    ) -> Result<GraphTrace> {
        self.check_input(x)?;
        let n = x.nrows();
        let xn = g.leaf(x.clone());
        match (&self.arch, cond) {
            (Arch::Conditioned { main, out }, Conditioning::Activity(a)) => {
                self.check_activity(a, n)?;
                let c = self.embed.as_ref().expect("conditioned model").apply(g, bp, xn, a)?;
                let c_rows = g.gather_rows(c, vec![0; n]);
                let joined = g.concat_cols(xn, c_rows);
                let h = main.apply(g, bp, joined);
                Ok(GraphTrace { joined, hidden: h, mask: None, logits: out.apply(g, bp, h) })
            }
            (Arch::Gated { pre, mask, post, out }, Conditioning::Activity(a)) => {
                self.check_activity(a, n)?;
                let c = self.embed.as_ref().expect("conditioned model").apply(g, bp, xn, a)?;
                let h = pre.apply(g, bp, xn);
                let c_rows = g.gather_rows(c, vec![0; n]);
                let joined = g.concat_cols(h, c_rows);
                let m_logits = mask.apply(g, bp, joined);
                let m = g.sigmoid(m_logits);
                let gated = g.mul(h, m);
                let h2 = post.apply(g, bp, gated);
                Ok(GraphTrace { joined, hidden: h, mask: Some(m), logits: out.apply(g, bp, h2) })
            }
            (Arch::Appended { main, out }, cond) => {
                let feat = match cond {
                    Conditioning::Feature(f) => {
                        if f.dim() != (1, self.cfg.embedding_dim) {
                            return Err(Error::RejectedInput(format!(
                                "speaker feature shape {:?}, expected (1, {})",
                                f.dim(),
                                self.cfg.embedding_dim
                            )));
                        }
                        if f.iter().any(|v| !v.is_finite()) {
                            return Err(Error::RejectedInput(
                                "non-finite speaker feature".into(),
                            ));
                        }
                        (*f).clone()
                    }
                    Conditioning::Activity(a) => {
                        self.check_activity(a, n)?;
                        self.speaker_feature(x, a)?
                    }
                };
                let f = g.leaf(feat);
                let f_rows = g.gather_rows(f, vec![0; n]);
                let joined = g.concat_cols(xn, f_rows);
                let h = main.apply(g, bp, joined);
                Ok(GraphTrace { joined, hidden: h, mask: None, logits: out.apply(g, bp, h) })
            }
            (_, Conditioning::Feature(_)) => Err(Error::RejectedInput(format!(
                "{} is conditioned on activity, not a precomputed feature",
                self.kind.label()
            ))),
        }
    }

    /// Edge dimensions of one forward pass, for architecture inspection.
    pub fn forward_shapes(&self, x: &Mat, cond: &Conditioning) -> Result<ForwardShapes> {
        let mut g = Graph::new();
        let bp = self.bank.bind(&mut g);
        let trace = self.logits_trace(&mut g, &bp, x, cond)?;
        let post = g.softmax_rows(trace.logits);
        let dim = |g: &Graph, n: NodeId| {
            let v = g.value(n);
            (v.nrows(), v.ncols())
        };
        Ok(ForwardShapes {
            concat_input: dim(&g, trace.joined),
            hidden: dim(&g, trace.hidden),
            mask: trace.mask.map(|m| dim(&g, m)),
            posteriors: dim(&g, post),
        })
    }

    fn check_activity(&self, activity: &[f64], n: usize) -> Result<()> {
        if activity.len() != n {
            return Err(Error::RejectedInput(format!(
                "{} activity weights vs {} frames",
                activity.len(),
                n
            )));
        }
        Ok(())
    }

    /// Row-stochastic senone posteriors (N x num_senones).
    pub fn posteriors(&self, x: &Mat, cond: &Conditioning) -> Result<Mat> {
        let mut g = Graph::new();
        let bp = self.bank.bind(&mut g);
        let (logits, _) = self.logits_graph(&mut g, &bp, x, cond)?;
        let post = g.softmax_rows(logits);
        Ok(g.value(post).clone())
    }

    /// Natural-log posteriors for the decoder.
    pub fn log_posteriors(&self, x: &Mat, cond: &Conditioning) -> Result<Mat> {
        Ok(crate::decode::log_posteriors(&self.posteriors(x, cond)?))
    }

    /// Run just the embedding branch (conditioned models only).
    pub fn speaker_embedding(&self, x: &Mat, activity: &[f64]) -> Result<SpeakerEmbedding> {
        self.check_input(x)?;
        self.check_activity(activity, x.nrows())?;
        let embed = self.embed.as_ref().ok_or_else(|| {
            Error::UnsupportedConfig(format!("{} has no embedding branch", self.kind.label()))
        })?;
        let mut g = Graph::new();
        let bp = self.bank.bind(&mut g);
        let xn = g.leaf(x.clone());
        let c = embed.apply(&mut g, &bp, xn, activity)?;
        let vector: Vec<f64> = g.value(c).iter().copied().collect();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite embedding".into()));
        }
        Ok(SpeakerEmbedding { vector })
    }

    /// Gate mask for one forward pass (gated model only).
    pub fn gate_mask(&self, x: &Mat, activity: &[f64]) -> Result<GateMask> {
        if !matches!(self.arch, Arch::Gated { .. }) {
            return Err(Error::UnsupportedConfig(format!(
                "{} has no gate mask",
                self.kind.label()
            )));
        }
        let mut g = Graph::new();
        let bp = self.bank.bind(&mut g);
        let (_, mask) = self.logits_graph(&mut g, &bp, x, &Conditioning::Activity(activity))?;
        Ok(GateMask { mask: g.value(mask.expect("gated arch")).clone() })
    }
}

/// Conditioned forward pass of the concatenation model.
pub fn icam_forward(model: &AcousticModel, x: &Mat, activity: &[f64]) -> Result<Mat> {
    if model.kind != AmKind::Icam {
        return Err(Error::RejectedInput(format!("model is {}", model.kind.label())));
    }
    model.posteriors(x, &Conditioning::Activity(activity))
}

/// Conditioned forward pass of the gated model.
pub fn gfam_forward(model: &AcousticModel, x: &Mat, activity: &[f64]) -> Result<Mat> {
    if model.kind != AmKind::Gfam {
        return Err(Error::RejectedInput(format!("model is {}", model.kind.label())));
    }
    model.posteriors(x, &Conditioning::Activity(activity))
}

/// Baseline forward pass with an explicit speaker feature.
pub fn baseline_forward(model: &AcousticModel, x: &Mat, spk_feat: &Mat) -> Result<Mat> {
    if model.kind.is_conditioned() {
        return Err(Error::RejectedInput(format!("model is {}", model.kind.label())));
    }
    model.posteriors(x, &Conditioning::Feature(spk_feat))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One training example: features for a window, the conditioning speaker's
/// activity, and that speaker's per-frame senone labels (0 = inactive).
#[derive(Clone, Debug)]
pub struct AmExample {
    pub features: Mat,
    pub activity: Vec<f64>,
    pub labels: Vec<usize>,
}

impl AmExample {
    pub fn validate(&self, cfg: &AmConfig) -> Result<()> {
        let n = self.features.nrows();
        if self.activity.len() != n || self.labels.len() != n {
            return Err(Error::RejectedInput(format!(
                "example with {} frames, {} weights, {} labels",
                n,
                self.activity.len(),
                self.labels.len()
            )));
        }
        if self.features.ncols() != cfg.input_dim {
            return Err(Error::RejectedInput(format!(
                "example width {} vs input_dim {}",
                self.features.ncols(),
                cfg.input_dim
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= cfg.num_senones) {
            return Err(Error::RejectedInput(format!(
                "label {l} outside {} senones",
                cfg.num_senones
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AmTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for AmTrainConfig {
    fn default() -> Self {
        AmTrainConfig { epochs: 4, learning_rate: 1e-4 }
    }
}

/// Cross-entropy loss node for one example, or `None` when every frame is
/// masked out (possible only with `train_inactive_as_class0 = false`).
fn example_loss_graph(
    model: &AcousticModel,
    g: &mut Graph,
    bp: &BoundParams,
    example: &AmExample,
) -> Result<Option<NodeId>> {
    let weights: Vec<f64> = if model.cfg.train_inactive_as_class0 {
        vec![1.0; example.labels.len()]
    } else {
        example.labels.iter().map(|&l| f64::from(u8::from(l != 0))).collect()
    };
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(None);
    }
    let (logits, _) =
        model.logits_graph(g, bp, &example.features, &Conditioning::Activity(&example.activity))?;
    Ok(Some(g.cross_entropy_logits(logits, example.labels.clone(), weights)))
}

/// Train (or fine-tune) a senone classifier of the given kind; returns the
/// model and per-epoch mean losses. Aborts on non-finite loss.
pub fn train_am(
    examples: &[AmExample],
    kind: AmKind,
    cfg: &AmConfig,
    tcfg: &AmTrainConfig,
    seed: u64,
    init: Option<AcousticModel>,
) -> Result<(AcousticModel, Vec<f64>)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::RejectedInput("no training examples".into()));
    }
    for e in examples {
        e.validate(cfg)?;
    }
    let mut model = match init {
        Some(m) => {
            if m.kind != kind || serde_json::to_value(m.cfg)? != serde_json::to_value(*cfg)? {
                return Err(Error::RejectedInput(
                    "fine-tune checkpoint does not match the requested model".into(),
                ));
            }
            m
        }
        None => AcousticModel::new(kind, *cfg, derive_seed(seed, 0))?,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1));
    let mut opt = Adam::new(tcfg.learning_rate);
    let mut history = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for &i in &order {
            let mut g = Graph::new();
            let bp = model.bank.bind(&mut g);
            let Some(loss) = example_loss_graph(&model, &mut g, &bp, &examples[i])? else {
                continue;
            };
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "{} loss became {value} in epoch {epoch}",
                    kind.label()
                )));
            }
            let grads = g.backward(loss);
            let grad_mats = collect_grads(&g, &grads, &bp);
            opt.step(&mut model.bank, &grad_mats);
            epoch_loss += value;
            counted += 1;
        }
        if counted == 0 {
            return Err(Error::RejectedInput("every example was fully masked".into()));
        }
        history.push(epoch_loss / counted as f64);
    }
    Ok((model, history))
}

/// Numerically verify the training loss of this model kind: analytic
/// gradients of a freshly initialized model on `example` are compared
/// against central finite differences on `entries_per_param` random entries
/// of every parameter tensor. Panics with a diagnostic if any relative error
/// exceeds `rel_tol`; returns the probe report otherwise.
pub fn verify_training_gradients(
    kind: AmKind,
    cfg: &AmConfig,
    example: &AmExample,
    entries_per_param: usize,
    rel_tol: f64,
    seed: u64,
) -> Result<crate::nn::gradcheck::GradCheckReport> {
    cfg.validate()?;
    example.validate(cfg)?;
    let init_seed = derive_seed(seed, 0);
    let model = AcousticModel::new(kind, *cfg, init_seed)?;
    let mut g = Graph::new();
    let bp = model.bank.bind(&mut g);
    let loss = example_loss_graph(&model, &mut g, &bp, example)?
        .ok_or_else(|| Error::RejectedInput("every frame of the example is masked".into()))?;
    let grads = g.backward(loss);
    let analytic = collect_grads(&g, &grads, &bp);

    let cfg = *cfg;
    let loss_fn = |bank: &ParamBank| {
        let probe =
            AcousticModel { bank: bank.clone(), ..AcousticModel::new(kind, cfg, init_seed).unwrap() };
        let mut g = Graph::new();
        let bp = probe.bank.bind(&mut g);
        let loss = example_loss_graph(&probe, &mut g, &bp, example).unwrap().unwrap();
        g.scalar(loss)
    };
    Ok(crate::nn::gradcheck::assert_gradients_match(
        &model.bank,
        &analytic,
        loss_fn,
        entries_per_param,
        rel_tol,
        derive_seed(seed, 1),
    ))
}

/// Fraction of frames whose argmax posterior matches the label; `mask`
/// restricts which frames count.
pub fn frame_accuracy(posteriors: &Mat, labels: &[usize], mask: Option<&[bool]>) -> f64 {
    assert_eq!(posteriors.nrows(), labels.len());
    let mut hits = 0usize;
    let mut total = 0usize;
    for (t, &label) in labels.iter().enumerate() {
        if let Some(m) = mask {
            if !m[t] {
                continue;
            }
        }
        let row = posteriors.row(t);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        hits += usize::from(best == label);
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    hits as f64 / total as f64
}

// ---------------------------------------------------------------------------
// 2-D projection for plots
// ---------------------------------------------------------------------------

/// Deterministic 2-D layout of embedding vectors: principal-component
/// initialization refined by a small t-SNE loop. Plot emission only.
pub fn project_embeddings_2d(points: &Mat, seed: u64) -> Result<Mat> {
    let k = points.nrows();
    if k < 5 {
        return Err(Error::RejectedInput(format!("need at least 5 points, got {k}")));
    }
    let d = points.ncols();
    // center
    let mean = points.sum_axis(ndarray::Axis(0)) / k as f64;
    let centered = points - &mean.clone().insert_axis(ndarray::Axis(0));

    // top-2 principal directions by power iteration on the Gram structure
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut components: Vec<ndarray::Array1<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v = ndarray::Array1::from_shape_fn(d, |_| {
            rand::Rng::random_range(&mut rng, -1.0..1.0)
        });
        for _ in 0..100 {
            // project out earlier components
            for c in &components {
                let dot = v.dot(c);
                v = &v - &(c * dot);
            }
            let mut w = centered.t().dot(&centered.dot(&v));
            let norm = w.dot(&w).sqrt();
            if norm < 1e-300 {
                w = ndarray::Array1::from_shape_fn(d, |_| {
                    rand::Rng::random_range(&mut rng, -1.0..1.0)
                });
            } else {
                w /= norm;
            }
            v = w;
        }
        components.push(v);
    }
    let mut y = Mat::zeros((k, 2));
    for i in 0..k {
        for (j, c) in components.iter().enumerate() {
            y[[i, j]] = centered.row(i).dot(c) * 1e-4;
        }
    }
    for v in y.iter_mut() {
        *v += rand::Rng::random_range(&mut rng, -1e-6..1e-6);
    }

    // pairwise affinities with per-point bandwidth tuned to a fixed perplexity
    let perplexity = (((k - 1) as f64) / 3.0).min(10.0).max(2.0);
    let target_entropy = perplexity.ln();
    let mut sq = Mat::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let diff = &centered.row(i) - &centered.row(j);
            sq[[i, j]] = diff.dot(&diff);
        }
    }
    let mut p = Mat::zeros((k, k));
    for i in 0..k {
        let (mut lo, mut hi) = (1e-20f64, 1e20f64);
        let mut beta = 1.0f64;
        for _ in 0..60 {
            let mut row: Vec<f64> = (0..k)
                .map(|j| if j == i { 0.0 } else { (-beta * sq[[i, j]]).exp() })
                .collect();
            let sum: f64 = row.iter().sum();
            if sum < 1e-300 {
                beta /= 2.0;
                continue;
            }
            for v in &mut row {
                *v /= sum;
            }
            let entropy: f64 =
                row.iter().filter(|&&q| q > 1e-300).map(|&q| -q * q.ln()).sum();
            if entropy > target_entropy {
                lo = beta;
                beta = if hi >= 1e20 { beta * 2.0 } else { (beta + hi) / 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            for (j, &v) in row.iter().enumerate() {
                p[[i, j]] = v;
            }
        }
    }
    // symmetrize and normalize
    let mut pj = Mat::zeros((k, k));
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            pj[[i, j]] = (p[[i, j]] + p[[j, i]]).max(1e-300);
            if i != j {
                total += pj[[i, j]];
            }
        }
    }
    for v in pj.iter_mut() {
        *v /= total;
    }

    // gradient descent with the student-t kernel
    let iters = 300;
    let mut velocity = Mat::zeros((k, 2));
    for it in 0..iters {
        let exaggeration = if it < 60 { 4.0 } else { 1.0 };
        let momentum = if it < 100 { 0.5 } else { 0.8 };
        // low-dim affinities
        let mut num = Mat::zeros((k, k));
        let mut qsum = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[[i, j]] = v;
                qsum += v;
            }
        }
        let mut grad = Mat::zeros((k, 2));
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let q = (num[[i, j]] / qsum).max(1e-300);
                let coeff = 4.0 * (exaggeration * pj[[i, j]] - q) * num[[i, j]];
                grad[[i, 0]] += coeff * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += coeff * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        let lr = 50.0f64.max(k as f64 / 2.0);
        for i in 0..k {
            for c in 0..2 {
                velocity[[i, c]] = momentum * velocity[[i, c]] - lr * grad[[i, c]];
                y[[i, c]] += velocity[[i, c]];
            }
        }
        // re-center
        let m0 = y.column(0).sum() / k as f64;
        let m1 = y.column(1).sum() / k as f64;
        for i in 0..k {
            y[[i, 0]] -= m0;
            y[[i, 1]] -= m1;
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("projection diverged".into()));
    }
    Ok(y)
}
