//! End-to-end neural diarizer: self-attention encoder with encoder-decoder
//! attractors, trained with permutation-invariant binary cross-entropy.
//! Emits frame-level per-speaker activity posteriors for the mixed channel.
//!
//! All architecture sizes here are toy defaults chosen for a single-CPU
//! budget; they are not tuned to reproduce any published system.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_seed, Conversation, SpeakerActivity};
use crate::error::{Error, Result};
use crate::evaluate::permutations;
use crate::features::{compute_mfcc, FeatureConfig};
use crate::nn::{
    bce_mean_value, collect_grads, Adam, BoundParams, Graph, Linear, Lstm, Mat, NodeId, ParamBank,
    ParamIdx, SelfAttentionBlock,
};

pub const CHECKPOINT_KIND: &str = "diarizer";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DiarizerConfig {
    /// Width of the stacked input feature rows.
    pub input_dim: usize,
    pub encoder_blocks: usize,
    pub model_dim: usize,
    pub attention_heads: usize,
    pub feedforward_dim: usize,
    /// Attractor LSTM width; must equal `model_dim` so attractors live in
    /// the embedding space used by the inner-product posteriors.
    pub attractor_hidden_dim: usize,
    pub max_speakers: usize,
    /// Posterior (and attractor-existence) cutoff in (0,1).
    pub threshold: f64,
    /// Median smoothing window (frames, odd).
    pub median_window: usize,
    /// Input frame subsampling factor; posteriors are upsampled back by
    /// repetition.
    pub subsample: usize,
}

impl Default for DiarizerConfig {
    fn default() -> Self {
        DiarizerConfig {
            input_dim: 200,
            encoder_blocks: 2,
            model_dim: 64,
            attention_heads: 4,
            feedforward_dim: 128,
            attractor_hidden_dim: 64,
            max_speakers: 2,
            threshold: 0.5,
            median_window: 11,
            subsample: 5,
        }
    }
}

impl DiarizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % self.attention_heads != 0 {
            return Err(Error::UnsupportedConfig(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.attention_heads
            )));
        }
        if self.max_speakers < 2 {
            return Err(Error::UnsupportedConfig("max_speakers must be at least 2".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::UnsupportedConfig(format!(
                "threshold {} outside (0,1)",
                self.threshold
            )));
        }
        if self.median_window % 2 == 0 {
            return Err(Error::UnsupportedConfig(format!(
                "median window {} must be odd",
                self.median_window
            )));
        }
        if self.attractor_hidden_dim != self.model_dim {
            return Err(Error::UnsupportedConfig(
                "attractor_hidden_dim must equal model_dim (attractors are \
                 compared to frame embeddings by inner product)"
                    .into(),
            ));
        }
        if self.subsample == 0 || self.input_dim == 0 || self.encoder_blocks == 0 {
            return Err(Error::UnsupportedConfig("zero-sized diarizer dimension".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Frame-level diarization output for one recording.
#[derive(Clone, Debug)]
pub struct DiarizationResult {
    /// N x S posteriors in (0,1), upsampled to the input frame rate.
    pub posteriors: Mat,
    /// Existence probabilities for the S+1 decoded attractors.
    pub attractor_existence: Vec<f64>,
    /// Attractors with existence probability above the cutoff, capped.
    pub decoded_speakers: usize,
    /// N x S binary activity after thresholding, smoothing, and zeroing
    /// channels beyond the decoded speaker count.
    pub binary_activity: SpeakerActivity,
}

pub struct Diarizer {
    pub cfg: DiarizerConfig,
    pub bank: ParamBank,
    input: Linear,
    blocks: Vec<SelfAttentionBlock>,
    encoder: Lstm,
    decoder: Lstm,
    w_exist: ParamIdx,
}

impl Diarizer {
    pub fn new(cfg: DiarizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut bank = ParamBank::new();
        let input = Linear::new(&mut bank, "input", cfg.input_dim, cfg.model_dim, true, &mut rng);
        let blocks = (0..cfg.encoder_blocks)
            .map(|i| {
                SelfAttentionBlock::new(
                    &mut bank,
                    &format!("enc{i}"),
                    cfg.model_dim,
                    cfg.attention_heads,
                    cfg.feedforward_dim,
                    &mut rng,
                )
            })
            .collect();
        let encoder = Lstm::new(&mut bank, "eda.enc", cfg.model_dim, cfg.attractor_hidden_dim, &mut rng);
        let decoder = Lstm::new(&mut bank, "eda.dec", cfg.model_dim, cfg.attractor_hidden_dim, &mut rng);
        let w_exist = bank.add("eda.exist", ParamBank::xavier(&mut rng, cfg.model_dim, 1));
        Ok(Diarizer { cfg, bank, input, blocks, encoder, decoder, w_exist })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_value(self.cfg)?;
        crate::nn::checkpoint::save_checkpoint(path, CHECKPOINT_KIND, &config, &self.bank)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, bank) =
            crate::nn::checkpoint::load_checkpoint_expecting(path, CHECKPOINT_KIND)?;
        let cfg: DiarizerConfig = serde_json::from_value(header.config)?;
        let mut model = Diarizer::new(cfg, 0)?;
        crate::nn::checkpoint::restore_into(&mut model.bank, &bank)?;
        Ok(model)
    }

    /// Build the forward graph on subsampled features. `order` is the frame
    /// permutation fed to the attractor encoder. Returns (posteriors N' x S,
    /// existence probabilities (S+1) x 1).
    fn forward_graph(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        x_sub: &Mat,
        order: &[usize],
    ) -> (NodeId, NodeId) {
        let s = self.cfg.max_speakers;
        let x = g.leaf(x_sub.clone());
        let mut h = self.input.apply(g, bp, x);
        for block in &self.blocks {
            h = block.apply(g, bp, h);
        }
        // attractor calculation over shuffled frame embeddings
        let shuffled = g.gather_rows(h, order.to_vec());
        let (_, mut hs, mut cs) = self.encoder.run(g, bp, shuffled, false);
        let zero_in = g.zeros(1, self.cfg.model_dim);
        let mut attractors = Vec::with_capacity(s + 1);
        for _ in 0..=s {
            let (hn, cn) = self.decoder.step(g, bp, zero_in, hs, cs);
            attractors.push(hn);
            hs = hn;
            cs = cn;
        }
        let a = g.stack_rows(attractors);
        let exist_logits = g.matmul(a, bp.id(self.w_exist));
        let existence = g.sigmoid(exist_logits);
        let a_speakers = g.slice_rows(a, 0, s);
        let logits = g.matmul_nt(h, a_speakers);
        let posteriors = g.sigmoid(logits);
        (posteriors, existence)
    }

    /// Subsampled row indices for an N-frame input.
    fn subsample_indices(&self, n: usize) -> Vec<usize> {
        (0..n).step_by(self.cfg.subsample).collect()
    }

    /// Run inference on stacked full-rate features (N x input_dim).
    pub fn forward(&self, stacked: &Mat, frame_shift: f64) -> Result<DiarizationResult> {
        let n = stacked.nrows();
        if n == 0 {
            return Err(Error::RejectedInput("diarizer needs at least one frame".into()));
        }
        if stacked.ncols() != self.cfg.input_dim {
            return Err(Error::RejectedInput(format!(
                "feature width {} does not match diarizer input_dim {}",
                stacked.ncols(),
                self.cfg.input_dim
            )));
        }
        let idx = self.subsample_indices(n);
        let x_sub = stacked.select(ndarray::Axis(0), &idx);
        let n_sub = x_sub.nrows();
        // deterministic shuffle for the attractor encoder
        let mut order: Vec<usize> = (0..n_sub).collect();
        order.shuffle(&mut ChaCha12Rng::seed_from_u64(0x5eed_d1a7));

        let mut g = Graph::new();
        let bp = self.bank.bind(&mut g);
        let (post_node, exist_node) = self.forward_graph(&mut g, &bp, &x_sub, &order);
        let post_sub = g.value(post_node).clone();
        let existence: Vec<f64> = g.value(exist_node).iter().copied().collect();

        let s = self.cfg.max_speakers;
        let decoded = existence.iter().filter(|&&p| p > self.cfg.threshold).count().min(s);

        // upsample by repetition back to the input frame rate
        let mut posteriors = Mat::zeros((n, s));
        for t in 0..n {
            let src = (t / self.cfg.subsample).min(n_sub - 1);
            for k in 0..s {
                posteriors[[t, k]] = post_sub[[src, k]];
            }
        }
        let mut binary = threshold_activity(&posteriors, self.cfg.threshold, self.cfg.median_window)?;
        for k in decoded..s {
            binary.column_mut(k).fill(0.0);
        }
        Ok(DiarizationResult {
            posteriors,
            attractor_existence: existence,
            decoded_speakers: decoded,
            binary_activity: SpeakerActivity::new(binary, frame_shift),
        })
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Permutation-invariant BCE: minimum over speaker permutations of the mean
/// binary cross-entropy between permuted posterior columns and labels.
/// Returns the loss and the argmin permutation (posterior column `perm[s]`
/// scores against label column `s`); ties prefer the identity.
pub fn pit_bce_loss(posteriors: &Mat, labels: &Mat) -> Result<(f64, Vec<usize>)> {
    if posteriors.dim() != labels.dim() {
        return Err(Error::RejectedInput(format!(
            "posterior shape {:?} does not match labels {:?}",
            posteriors.dim(),
            labels.dim()
        )));
    }
    let s = labels.ncols();
    if s == 0 || labels.nrows() == 0 {
        return Err(Error::RejectedInput("empty PIT instance".into()));
    }
    // per-pair column BCE, computed once so permuted sums are bit-reproducible
    let mut pair = Mat::zeros((s, s));
    for p in 0..s {
        for l in 0..s {
            let pc = posteriors.column(p).to_owned().insert_axis(ndarray::Axis(1));
            let lc = labels.column(l).to_owned().insert_axis(ndarray::Axis(1));
            pair[[p, l]] = bce_mean_value(&pc, &lc, 1e-7);
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(s) {
        let mut loss = 0.0;
        for l in 0..s {
            loss += pair[[perm[l], l]];
        }
        loss /= s as f64;
        if best.as_ref().map_or(true, |(b, _)| loss < *b) {
            best = Some((loss, perm));
        }
    }
    Ok(best.expect("nonzero speaker count"))
}

/// Graph-node PIT loss: the permutation is chosen from current values, then
/// the differentiable BCE is built under that fixed permutation.
fn pit_bce_graph(g: &mut Graph, posteriors: NodeId, labels: &Mat) -> Result<(NodeId, Vec<usize>)> {
    let (_, perm) = pit_bce_loss(&g.value(posteriors).clone(), labels)?;
    let permuted = g.gather_cols(posteriors, perm.clone());
    let loss = g.bce_mean(permuted, labels.clone(), 1e-7);
    Ok((loss, perm))
}

/// Binarize at `theta` then median-filter each speaker column (edge values
/// replicated so the window length stays odd everywhere).
pub fn threshold_activity(posteriors: &Mat, theta: f64, median_window: usize) -> Result<Mat> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::RejectedInput(format!("threshold {theta} outside (0,1)")));
    }
    if median_window % 2 == 0 || median_window == 0 {
        return Err(Error::RejectedInput(format!(
            "median window {median_window} must be odd"
        )));
    }
    let (n, s) = posteriors.dim();
    let half = median_window / 2;
    let mut out = Mat::zeros((n, s));
    for k in 0..s {
        let bin: Vec<bool> = (0..n).map(|t| posteriors[[t, k]] > theta).collect();
        for t in 0..n {
            let mut ones = 0;
            for w in 0..median_window {
                let u = (t + w).saturating_sub(half).min(n.saturating_sub(1));
                ones += usize::from(bin[u]);
            }
            out[[t, k]] = f64::from(u8::from(ones > median_window / 2));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DiarizerTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Training window length in subsampled frames.
    pub window_frames: usize,
    /// Trailing windows shorter than this are dropped.
    pub min_window_frames: usize,
    /// Weight of the attractor-existence BCE term.
    pub existence_weight: f64,
}

impl Default for DiarizerTrainConfig {
    fn default() -> Self {
        DiarizerTrainConfig {
            epochs: 6,
            learning_rate: 1e-3,
            window_frames: 100,
            min_window_frames: 20,
            existence_weight: 1.0,
        }
    }
}

/// One training example: subsampled stacked features plus aligned labels.
#[derive(Clone, Debug)]
pub struct DiarizerWindow {
    pub features: Mat,
    pub labels: Mat,
}

impl DiarizerWindow {
    /// Existence targets: one slot per decoded attractor, 1 for each speaker
    /// with any activity in the window, then 0s (the stop attractor).
    fn existence_target(&self, slots: usize) -> Mat {
        let active: usize =
            (0..self.labels.ncols()).filter(|&k| self.labels.column(k).sum() > 0.0).count();
        let mut t = Mat::zeros((slots, 1));
        for i in 0..active.min(slots) {
            t[[i, 0]] = 1.0;
        }
        t
    }
}

/// Chop conversations into fixed-length subsampled windows for training.
pub fn prepare_windows(
    conversations: &[Conversation],
    feat_cfg: &FeatureConfig,
    cfg: &DiarizerConfig,
    tcfg: &DiarizerTrainConfig,
) -> Result<Vec<DiarizerWindow>> {
    let mut windows = Vec::new();
    for conv in conversations {
        let feats = compute_mfcc(&conv.audio, feat_cfg)?;
        let stacked = feats.stacked();
        if stacked.ncols() != cfg.input_dim {
            return Err(Error::RejectedInput(format!(
                "feature width {} does not match diarizer input_dim {}",
                stacked.ncols(),
                cfg.input_dim
            )));
        }
        let n = stacked.nrows().min(conv.activity.num_frames());
        let idx: Vec<usize> = (0..n).step_by(cfg.subsample).collect();
        let x = stacked.select(ndarray::Axis(0), &idx);
        let labels = conv.activity.matrix.select(ndarray::Axis(0), &idx);
        let total = x.nrows();
        let mut start = 0;
        while start < total {
            let end = (start + tcfg.window_frames).min(total);
            if end - start >= tcfg.min_window_frames {
                windows.push(DiarizerWindow {
                    features: x.slice(ndarray::s![start..end, ..]).to_owned(),
                    labels: labels.slice(ndarray::s![start..end, ..]).to_owned(),
                });
            }
            start = end;
        }
    }
    if windows.is_empty() {
        return Err(Error::RejectedInput("no usable training windows".into()));
    }
    Ok(windows)
}

/// Loss node for one window: PIT BCE on posteriors plus weighted existence
/// BCE. Shared between training and the gradient check.
fn window_loss_graph(
    model: &Diarizer,
    g: &mut Graph,
    bp: &BoundParams,
    window: &DiarizerWindow,
    order: &[usize],
    existence_weight: f64,
) -> Result<NodeId> {
    let (post, exist) = model.forward_graph(g, bp, &window.features, order);
    let (pit, _) = pit_bce_graph(g, post, &window.labels)?;
    let target = window.existence_target(model.cfg.max_speakers + 1);
    let ex = g.bce_mean(exist, target, 1e-7);
    let ex = g.scale(ex, existence_weight);
    Ok(g.add(pit, ex))
}

/// Same loss with the speaker permutation pinned, so probe evaluations stay
/// on one branch of the PIT minimum.
fn window_loss_graph_frozen(
    model: &Diarizer,
    g: &mut Graph,
    bp: &BoundParams,
    window: &DiarizerWindow,
    order: &[usize],
    perm: &[usize],
    existence_weight: f64,
) -> NodeId {
    let (post, exist) = model.forward_graph(g, bp, &window.features, order);
    let permuted = g.gather_cols(post, perm.to_vec());
    let pit = g.bce_mean(permuted, window.labels.clone(), 1e-7);
    let target = window.existence_target(model.cfg.max_speakers + 1);
    let ex = g.bce_mean(exist, target, 1e-7);
    let ex = g.scale(ex, existence_weight);
    g.add(pit, ex)
}

/// Numerically verify the window training loss: analytic gradients of a
/// freshly initialized model are compared against central finite differences
/// on `entries_per_param` random entries of every parameter tensor, under the
/// speaker permutation frozen at the base point. Panics with a diagnostic if
/// any relative error exceeds `rel_tol`; returns the probe report otherwise.
/// `window.features` are taken as already subsampled.
pub fn verify_training_gradients(
    cfg: &DiarizerConfig,
    window: &DiarizerWindow,
    existence_weight: f64,
    entries_per_param: usize,
    rel_tol: f64,
    seed: u64,
) -> Result<crate::nn::gradcheck::GradCheckReport> {
    cfg.validate()?;
    let init_seed = derive_seed(seed, 0);
    let model = Diarizer::new(*cfg, init_seed)?;
    let mut order: Vec<usize> = (0..window.features.nrows()).collect();
    order.shuffle(&mut ChaCha12Rng::seed_from_u64(derive_seed(seed, 1)));

    let perm = {
        let mut g = Graph::new();
        let bp = model.bank.bind(&mut g);
        let (post, _) = model.forward_graph(&mut g, &bp, &window.features, &order);
        pit_bce_loss(&g.value(post).clone(), &window.labels)?.1
    };

    let mut g = Graph::new();
    let bp = model.bank.bind(&mut g);
    let loss =
        window_loss_graph_frozen(&model, &mut g, &bp, window, &order, &perm, existence_weight);
    let grads = g.backward(loss);
    let analytic = collect_grads(&g, &grads, &bp);

    let cfg = *cfg;
    let loss_fn = |bank: &ParamBank| {
        let probe = Diarizer { bank: bank.clone(), ..Diarizer::new(cfg, init_seed).unwrap() };
        let mut g = Graph::new();
        let bp = probe.bank.bind(&mut g);
        let loss = window_loss_graph_frozen(
            &probe,
            &mut g,
            &bp,
            window,
            &order,
            &perm,
            existence_weight,
        );
        g.scalar(loss)
    };
    Ok(crate::nn::gradcheck::assert_gradients_match(
        &model.bank,
        &analytic,
        loss_fn,
        entries_per_param,
        rel_tol,
        derive_seed(seed, 2),
    ))
}

/// Train (or fine-tune, when `init` is given) on the conversations; returns
/// the model and per-epoch mean losses. Aborts with a divergence error if
/// the loss leaves the reals.
pub fn train_diarizer(
    conversations: &[Conversation],
    feat_cfg: &FeatureConfig,
    cfg: &DiarizerConfig,
    tcfg: &DiarizerTrainConfig,
    seed: u64,
    init: Option<Diarizer>,
) -> Result<(Diarizer, Vec<f64>)> {
    cfg.validate()?;
    if conversations.is_empty() {
        return Err(Error::RejectedInput("empty training corpus".into()));
    }
    let mut model = match init {
        Some(m) => {
            if serde_json::to_value(m.cfg)? != serde_json::to_value(*cfg)? {
                return Err(Error::RejectedInput(
                    "fine-tune checkpoint was built with a different configuration".into(),
                ));
            }
            m
        }
        None => Diarizer::new(*cfg, derive_seed(seed, 0))?,
    };
    let windows = prepare_windows(conversations, feat_cfg, cfg, tcfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1));
    let mut opt = Adam::new(tcfg.learning_rate);
    let mut history = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &wi in &order {
            let window = &windows[wi];
            let mut frame_order: Vec<usize> = (0..window.features.nrows()).collect();
            frame_order.shuffle(&mut rng);

            let mut g = Graph::new();
            let bp = model.bank.bind(&mut g);
            let loss = window_loss_graph(&model, &mut g, &bp, window, &frame_order, tcfg.existence_weight)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "diarizer loss became {value} in epoch {epoch}"
                )));
            }
            let grads = g.backward(loss);
            let grad_mats = collect_grads(&g, &grads, &bp);
            opt.step(&mut model.bank, &grad_mats);
            epoch_loss += value;
        }
        history.push(epoch_loss / windows.len() as f64);
    }
    Ok((model, history))
}
