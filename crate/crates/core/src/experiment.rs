//! Config-driven experiment harness.
//!
//! One TOML file describes a full run: corpus synthesis, diarizer and
//! acoustic-model training, transcription, scoring and plots. Every command
//! is deterministic under the configured seed, and every artifact records the
//! config hash and seed it was produced from.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::{
    train_am, AcousticModel, AmConfig, AmExample, AmKind, AmTrainConfig, Conditioning,
};
use crate::corpus::{
    augment_overlap, build_senone_targets, derive_seed, extract_segment, form_segments,
    load_corpus, rle, save_conversation, save_manifest, synth_toy_corpus, unrle,
    write_rttm_activity, Conversation, Lexicon, SegmentKind, SpeakerActivity, TokenInstance,
    ToyCorpusSpec,
};
use crate::decode::{decode_conversation, log_posteriors, transcript_trn, DecoderConfig, ToyLm};
use crate::diarization::{train_diarizer, Diarizer, DiarizerConfig, DiarizerTrainConfig};
use crate::error::{Error, Result};
use crate::evaluate::{
    der_csv, der_table, fmt_pct, score_pipeline, wer_table, ConversationHypothesis, DerReport,
    ScoringConfig, ScoringReport, WerCounts,
};
use crate::features::{compute_mfcc, Waveform};
use crate::nn::Mat;

/// Environment variable that, when set, re-roots `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "CROSSTALK_OUT_ROOT";

// Per-purpose seed tags, all derived from the one configured seed.
const SEED_DIAR_INIT: u64 = 11;
const SEED_DIAR_EPOCH: u64 = 1_000;
const SEED_AM_INIT: u64 = 21;
const SEED_AM_EPOCH: u64 = 2_000;
const SEED_AUGMENT: u64 = 31;
const SEED_PROJECTION: u64 = 41;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Everything one run needs, in a single serializable structure.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; all per-stage seeds are derived from it.
    pub seed: u64,
    /// Run directory; all artifacts land below it (see [`OUTPUT_ROOT_ENV`]).
    pub output_dir: PathBuf,
    /// Conversations held out for evaluation, taken from the end of the corpus.
    pub eval_conversations: usize,
    /// Acoustic model flavor to train and decode with.
    pub am_kind: AmKind,
    /// Add-k smoothing of the bigram token LM used by the decoder.
    pub lm_add_k: f64,
    /// Synthetic overlapped examples added per training conversation when
    /// training mixture acoustic models (ignored for the isolated baseline).
    pub augment_per_conversation: usize,
    pub corpus: ToyCorpusSpec,
    pub diarizer: DiarizerConfig,
    pub diarizer_train: DiarizerTrainConfig,
    pub am: AmConfig,
    pub am_train: AmTrainConfig,
    pub decoder: DecoderConfig,
    pub scoring: ScoringConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 17,
            output_dir: PathBuf::from("runs/default"),
            eval_conversations: 2,
            am_kind: AmKind::Icam,
            lm_add_k: 1.0,
            augment_per_conversation: 2,
            corpus: ToyCorpusSpec::default(),
            diarizer: DiarizerConfig::default(),
            diarizer_train: DiarizerTrainConfig::default(),
            am: AmConfig::default(),
            am_train: AmTrainConfig::default(),
            decoder: DecoderConfig::default(),
            scoring: ScoringConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Cross-field consistency checks; every violation is a config error.
    pub fn validate(&self) -> Result<()> {
        if self.corpus.num_conversations == 0 {
            return Err(Error::Config("corpus.num_conversations must be positive".into()));
        }
        if self.eval_conversations == 0 || self.eval_conversations >= self.corpus.num_conversations
        {
            return Err(Error::Config(format!(
                "eval_conversations must be in 1..{} (got {})",
                self.corpus.num_conversations, self.eval_conversations
            )));
        }
        let stacked = self.corpus.feature.num_ceps * (2 * self.corpus.feature.context_radius + 1);
        if self.diarizer.input_dim != stacked {
            return Err(Error::Config(format!(
                "diarizer.input_dim {} != stacked feature width {stacked}",
                self.diarizer.input_dim
            )));
        }
        if self.am.input_dim != stacked {
            return Err(Error::Config(format!(
                "am.input_dim {} != stacked feature width {stacked}",
                self.am.input_dim
            )));
        }
        if self.am.num_senones != self.corpus.num_senones {
            return Err(Error::Config(format!(
                "am.num_senones {} != corpus.num_senones {}",
                self.am.num_senones, self.corpus.num_senones
            )));
        }
        if !(self.lm_add_k > 0.0 && self.lm_add_k.is_finite()) {
            return Err(Error::Config(format!("lm_add_k must be positive (got {})", self.lm_add_k)));
        }
        if self.diarizer_train.epochs == 0 || self.am_train.epochs == 0 {
            return Err(Error::Config("training schedules need at least one epoch".into()));
        }
        if !(self.decoder.chunk_seconds > 0.0) {
            return Err(Error::Config("decoder.chunk_seconds must be positive".into()));
        }
        if self.scoring.collar_secs < 0.0 {
            return Err(Error::Config("scoring.collar_secs must be non-negative".into()));
        }
        self.diarizer.validate().map_err(|e| Error::Config(format!("diarizer: {e}")))?;
        self.am.validate().map_err(|e| Error::Config(format!("am: {e}")))?;
        Ok(())
    }
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("config serialize: {e}")))
}

pub fn config_from_toml(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    config_from_toml(&text)
}

/// First 16 hex digits of the SHA-256 of the canonical (JSON) config encoding.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance stamp written into every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
}

pub fn run_meta(cfg: &ExperimentConfig) -> RunMeta {
    RunMeta { config_hash: config_hash(cfg), seed: cfg.seed }
}

fn meta_comment(prefix: &str, meta: &RunMeta) -> String {
    format!("{prefix} config_hash={} seed={}\n", meta.config_hash, meta.seed)
}

/// Resolve the effective output directory: when `root` is given, the
/// configured directory is re-rooted under it (absolute paths lose their
/// leading separator first).
pub fn resolve_output_dir_from(output_dir: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        None => output_dir.to_path_buf(),
        Some(root) => root.join(output_dir.strip_prefix("/").unwrap_or(output_dir)),
    }
}

pub fn resolve_output_dir(cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    resolve_output_dir_from(&cfg.output_dir, root.as_deref())
}

/// Canonical layout of one run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        RunPaths { root: resolve_output_dir(cfg) }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }

    /// Transcription output directory; one per activity source.
    pub fn hyp_dir(&self, ground_truth_activity: bool) -> PathBuf {
        self.root.join(if ground_truth_activity { "hyp-gts" } else { "hyp-diar" })
    }

    pub fn diarizer_checkpoint(&self) -> PathBuf {
        self.models_dir().join("diarizer.ckpt")
    }

    pub fn am_checkpoint(&self, kind: AmKind) -> PathBuf {
        self.models_dir().join(format!("am-{}.ckpt", kind.label()))
    }

    pub fn loss_csv(&self, stage: &str) -> PathBuf {
        self.models_dir().join(format!("{stage}_loss.csv"))
    }
}

/// Train/eval split: the last `eval_conversations` (in id order) are held out.
pub fn split_corpus<'a>(
    cfg: &ExperimentConfig,
    convs: &'a [Conversation],
) -> Result<(&'a [Conversation], &'a [Conversation])> {
    if cfg.eval_conversations == 0 || cfg.eval_conversations >= convs.len() {
        return Err(Error::Config(format!(
            "eval_conversations must be in 1..{} (got {})",
            convs.len(),
            cfg.eval_conversations
        )));
    }
    Ok(convs.split_at(convs.len() - cfg.eval_conversations))
}

fn check_spec_matches(cfg: &ExperimentConfig, on_disk: &ToyCorpusSpec) -> Result<()> {
    if serde_json::to_value(on_disk)? != serde_json::to_value(&cfg.corpus)? {
        return Err(Error::Data(
            "corpus on disk was generated from a different configuration; re-run synth".into(),
        ));
    }
    Ok(())
}

fn load_run_corpus(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<(ToyCorpusSpec, Lexicon, Vec<Conversation>)> {
    if !dir.join("corpus.json").is_file() {
        return Err(Error::Data(format!(
            "no corpus manifest at {}; run synth first",
            dir.display()
        )));
    }
    let (spec, lex, convs) = load_corpus(dir)?;
    check_spec_matches(cfg, &spec)?;
    Ok((spec, lex, convs))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Corpus-level statistics; printed by the CLI and re-derivable from the
/// emitted files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub meta: RunMeta,
    pub conversations: usize,
    pub total_duration_secs: f64,
    /// Frames with at least one active speaker, as a percentage of all frames.
    pub speech_pct: f64,
    /// Frames with both speakers active, as a percentage of speech frames.
    pub overlap_pct: f64,
}

/// Recount the summary statistics from a set of conversations.
pub fn corpus_summary(meta: RunMeta, convs: &[Conversation]) -> SynthSummary {
    let mut frames = 0usize;
    let mut voiced = 0usize;
    let mut overlapped = 0usize;
    let mut secs = 0.0;
    for c in convs {
        frames += c.num_frames();
        voiced += c.activity.voiced_frames();
        overlapped += c.activity.overlapped_frames();
        secs += c.num_frames() as f64 * c.activity.frame_shift;
    }
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    SynthSummary {
        meta,
        conversations: convs.len(),
        total_duration_secs: secs,
        speech_pct: pct(voiced, frames),
        overlap_pct: pct(overlapped, voiced),
    }
}

/// Synthesize the corpus into `<out>/corpus`: WAV + JSON sidecar + reference
/// RTTM per conversation, a manifest, and a summary file. Refuses to touch a
/// non-empty corpus directory unless `force` is set.
pub fn cmd_synth(cfg: &ExperimentConfig, force: bool) -> Result<SynthSummary> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg);
    let dir = paths.corpus_dir();
    if dir.is_dir() && std::fs::read_dir(&dir)?.next().is_some() {
        if !force {
            return Err(Error::RejectedInput(format!(
                "corpus directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;

    let (lexicon, convs) = synth_toy_corpus(&cfg.corpus, cfg.seed)?;
    let meta = run_meta(cfg);
    let ids: Vec<String> = convs.iter().map(|c| c.id.clone()).collect();
    save_manifest(&dir, &cfg.corpus, &lexicon, &ids, Some(serde_json::to_value(&meta)?))?;
    convs.par_iter().try_for_each(|conv| -> Result<()> {
        save_conversation(&dir, conv)?;
        let mut rttm = Vec::new();
        write_rttm_activity(&mut rttm, &conv.id, &conv.activity)?;
        std::fs::write(dir.join(format!("{}.rttm", conv.id)), rttm)?;
        Ok(())
    })?;

    let summary = corpus_summary(meta, &convs);
    std::fs::write(dir.join("synth_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    Diarizer,
    Acoustic,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub meta: RunMeta,
    /// "diar" or "am-<kind>".
    pub stage: String,
    /// Full per-epoch loss history, including epochs restored on resume.
    pub losses: Vec<f64>,
    /// Epochs actually run by this invocation.
    pub epochs_run: usize,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

fn loss_csv_string(meta: &RunMeta, stage: &str, losses: &[f64]) -> String {
    let mut out = meta_comment("#", meta);
    let _ = writeln!(out, "# stage={stage}");
    out.push_str("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

/// Parse a loss-curve CSV written by [`cmd_train`]; `#` lines are comments.
pub fn parse_loss_csv(text: &str) -> Result<Vec<f64>> {
    let mut rows = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    match rows.next() {
        Some("epoch,loss") => {}
        other => {
            return Err(Error::Data(format!("loss CSV header missing (got {other:?})")));
        }
    }
    let mut losses = Vec::new();
    for line in rows {
        let (epoch, loss) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("malformed loss CSV row {line:?}")))?;
        let epoch: usize = epoch
            .parse()
            .map_err(|_| Error::Data(format!("malformed loss CSV epoch {line:?}")))?;
        if epoch != losses.len() {
            return Err(Error::Data(format!(
                "loss CSV epochs out of order: expected {}, got {epoch}",
                losses.len()
            )));
        }
        let loss: f64 =
            loss.parse().map_err(|_| Error::Data(format!("malformed loss CSV value {line:?}")))?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Build the per-speaker acoustic training examples for a model kind.
///
/// Every conversation yields one example per speaker: mixture features (or
/// the speaker's clean channel for the isolated baseline), that speaker's
/// activity as conditioning, and their aligned senones (0 where inactive) as
/// labels. Mixture models additionally get synthetic overlaps built by
/// cross-mixing single-speaker segments.
pub fn build_am_examples(
    cfg: &ExperimentConfig,
    train: &[Conversation],
) -> Result<Vec<AmExample>> {
    let feat = &cfg.corpus.feature;
    let mut out = Vec::new();
    for conv in train {
        let targets = build_senone_targets(conv)?;
        let mixture = compute_mfcc(&conv.audio, feat)?.stacked().clone();
        for s in 0..2 {
            let features = if cfg.am_kind == AmKind::BlstmIso {
                compute_mfcc(&conv.channels[s], feat)?.stacked().clone()
            } else {
                mixture.clone()
            };
            out.push(AmExample {
                features,
                activity: conv.activity.matrix.column(s).to_vec(),
                labels: targets.labels.column(s).to_vec(),
            });
        }
    }

    if cfg.am_kind != AmKind::BlstmIso && cfg.augment_per_conversation > 0 {
        let mut a_pool = Vec::new();
        let mut b_pool = Vec::new();
        for conv in train {
            for seg in form_segments(&conv.activity)? {
                match seg.kind {
                    SegmentKind::A => a_pool.push(extract_segment(conv, &seg, feat)),
                    SegmentKind::B => b_pool.push(extract_segment(conv, &seg, feat)),
                    SegmentKind::C => {}
                }
            }
        }
        if !a_pool.is_empty() && !b_pool.is_empty() {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, SEED_AUGMENT));
            for _ in 0..cfg.augment_per_conversation * train.len() {
                let a = &a_pool[rng.random_range(0..a_pool.len())];
                let b = &b_pool[rng.random_range(0..b_pool.len())];
                let Some(aug) = augment_overlap(a, b, cfg.corpus.mixture.overlap_range, feat, &mut rng)
                else {
                    continue;
                };
                let w = Waveform::new(aug.audio, feat.sample_rate)?;
                let fs = compute_mfcc(&w, feat)?;
                debug_assert_eq!(fs.num_frames(), aug.frames);
                let stacked = fs.stacked().slice(ndarray::s![..aug.frames, ..]).to_owned();
                for s in 0..2 {
                    out.push(AmExample {
                        features: stacked.clone(),
                        activity: aug.activity.column(s).to_vec(),
                        labels: aug.targets.column(s).to_vec(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Train one stage, writing the checkpoint and loss CSV after every epoch.
///
/// Epochs are self-contained (the shuffle seed and optimizer are derived per
/// epoch), so `resume` continues from the checkpoint and reproduces exactly
/// the losses an uninterrupted run would have produced. `on_epoch` is called
/// with each newly trained epoch's index and mean loss.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    stage: TrainStage,
    resume: bool,
    mut on_epoch: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg);
    let (_spec, _lexicon, convs) = load_run_corpus(cfg, &paths.corpus_dir())?;
    let (train, _eval) = split_corpus(cfg, &convs)?;
    let meta = run_meta(cfg);
    std::fs::create_dir_all(paths.models_dir())?;

    let stage_label = match stage {
        TrainStage::Diarizer => "diar".to_string(),
        TrainStage::Acoustic => format!("am-{}", cfg.am_kind.label()),
    };
    let csv_path = paths.loss_csv(match stage {
        TrainStage::Diarizer => "diarizer",
        TrainStage::Acoustic => &stage_label,
    });
    let ckpt_path = match stage {
        TrainStage::Diarizer => paths.diarizer_checkpoint(),
        TrainStage::Acoustic => paths.am_checkpoint(cfg.am_kind),
    };

    let mut losses: Vec<f64> = if resume && ckpt_path.is_file() {
        let text = std::fs::read_to_string(&csv_path).map_err(|_| {
            Error::Data(format!(
                "checkpoint {} exists but its loss CSV is missing",
                ckpt_path.display()
            ))
        })?;
        parse_loss_csv(&text)?
    } else {
        Vec::new()
    };

    let total_epochs = match stage {
        TrainStage::Diarizer => cfg.diarizer_train.epochs,
        TrainStage::Acoustic => cfg.am_train.epochs,
    };
    let start = losses.len();
    if start > total_epochs {
        return Err(Error::Data(format!(
            "checkpoint already trained for {start} epochs, but the schedule has {total_epochs}"
        )));
    }

    match stage {
        TrainStage::Diarizer => {
            let mut model = if start > 0 {
                Diarizer::load(&ckpt_path)?
            } else {
                Diarizer::new(cfg.diarizer, derive_seed(cfg.seed, SEED_DIAR_INIT))?
            };
            for epoch in start..total_epochs {
                let ecfg = DiarizerTrainConfig { epochs: 1, ..cfg.diarizer_train };
                let eseed = derive_seed(cfg.seed, SEED_DIAR_EPOCH + epoch as u64);
                let (next, history) = train_diarizer(
                    train,
                    &cfg.corpus.feature,
                    &cfg.diarizer,
                    &ecfg,
                    eseed,
                    Some(model),
                )?;
                model = next;
                losses.push(history[0]);
                model.save(&ckpt_path)?;
                std::fs::write(&csv_path, loss_csv_string(&meta, &stage_label, &losses))?;
                if let Some(hook) = on_epoch.as_deref_mut() {
                    hook(epoch, history[0]);
                }
            }
            if start == 0 && total_epochs == 0 {
                model.save(&ckpt_path)?;
            }
        }
        TrainStage::Acoustic => {
            let examples = build_am_examples(cfg, train)?;
            let mut model = if start > 0 {
                AcousticModel::load(&ckpt_path, cfg.am_kind)?
            } else {
                AcousticModel::new(cfg.am_kind, cfg.am, derive_seed(cfg.seed, SEED_AM_INIT))?
            };
            for epoch in start..total_epochs {
                let ecfg = AmTrainConfig { epochs: 1, ..cfg.am_train };
                let eseed = derive_seed(cfg.seed, SEED_AM_EPOCH + epoch as u64);
                let (next, history) =
                    train_am(&examples, cfg.am_kind, &cfg.am, &ecfg, eseed, Some(model))?;
                model = next;
                losses.push(history[0]);
                model.save(&ckpt_path)?;
                std::fs::write(&csv_path, loss_csv_string(&meta, &stage_label, &losses))?;
                if let Some(hook) = on_epoch.as_deref_mut() {
                    hook(epoch, history[0]);
                }
            }
        }
    }

    Ok(TrainOutcome {
        meta,
        stage: stage_label,
        epochs_run: total_epochs - start,
        losses,
        checkpoint: ckpt_path,
        loss_csv: csv_path,
    })
}

// ---------------------------------------------------------------------------
// transcribe
// ---------------------------------------------------------------------------

/// Train the bigram token LM on the training split's reference token streams.
pub fn train_lm(train: &[Conversation], lexicon: &Lexicon, add_k: f64) -> Result<ToyLm> {
    let mut sequences = Vec::new();
    for conv in train {
        for s in 0..2 {
            let toks: Vec<usize> = conv.ref_tokens[s].iter().map(|t| t.token).collect();
            if !toks.is_empty() {
                sequences.push(toks);
            }
        }
    }
    ToyLm::train(&sequences, lexicon.vocab_size(), add_k)
}

/// Per-conversation hypothesis artifact: decoded activity and token streams.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HypSidecar {
    pub meta: RunMeta,
    pub id: String,
    pub frame_shift: f64,
    pub num_frames: usize,
    pub decoded_speakers: usize,
    /// Per speaker: run-length encoded binary activity as (value, length).
    pub activity_rle: [Vec<(u8, usize)>; 2],
    pub tokens: [Vec<TokenInstance>; 2],
    pub viterbi_scores: [f64; 2],
}

/// Write one conversation's hypothesis sidecar.
pub fn write_hypothesis(
    dir: &Path,
    meta: &RunMeta,
    id: &str,
    activity: &SpeakerActivity,
    tokens: &[Vec<TokenInstance>; 2],
    decoded_speakers: usize,
    viterbi_scores: [f64; 2],
) -> Result<()> {
    let act = |s: usize| {
        rle(&(0..activity.num_frames())
            .map(|t| activity.active(t, s) as u8)
            .collect::<Vec<_>>())
    };
    let sidecar = HypSidecar {
        meta: meta.clone(),
        id: id.to_string(),
        frame_shift: activity.frame_shift,
        num_frames: activity.num_frames(),
        decoded_speakers,
        activity_rle: [act(0), act(1)],
        tokens: tokens.clone(),
        viterbi_scores,
    };
    std::fs::write(dir.join(format!("{id}.hyp.json")), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Load one hypothesis sidecar back as a scorable structure.
pub fn load_hypothesis(dir: &Path, id: &str) -> Result<(ConversationHypothesis, HypSidecar)> {
    let path = dir.join(format!("{id}.hyp.json"));
    let sidecar: HypSidecar = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    let n = sidecar.num_frames;
    let mut matrix = Mat::zeros((n, 2));
    for s in 0..2 {
        let col = unrle(&sidecar.activity_rle[s]);
        if col.len() != n {
            return Err(Error::Data(format!(
                "{}: activity run-lengths do not sum to {n}",
                path.display()
            )));
        }
        for (t, v) in col.iter().enumerate() {
            matrix[[t, s]] = f64::from(*v);
        }
    }
    let hyp = ConversationHypothesis {
        activity: SpeakerActivity::new(matrix, sidecar.frame_shift),
        tokens: sidecar.tokens.clone(),
    };
    Ok((hyp, sidecar))
}

/// Per-frame posterior dump: raw little-endian f64 matrix plus a JSON header.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorHeader {
    pub meta: RunMeta,
    pub conversation: String,
    pub speaker: usize,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub layout: String,
}

fn posterior_base(dir: &Path, id: &str, speaker: usize) -> PathBuf {
    dir.join(format!("{id}.spk{speaker}.post"))
}

pub fn save_posteriors(
    dir: &Path,
    meta: &RunMeta,
    id: &str,
    speaker: usize,
    m: &Mat,
) -> Result<()> {
    let base = posterior_base(dir, id, speaker);
    let header = PosteriorHeader {
        meta: meta.clone(),
        conversation: id.to_string(),
        speaker,
        rows: m.nrows(),
        cols: m.ncols(),
        dtype: "f64le".into(),
        layout: "row-major".into(),
    };
    std::fs::write(base.with_extension("post.json"), serde_json::to_string_pretty(&header)?)?;
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for row in m.rows() {
        for &v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(base.with_extension("post.bin"), bytes)?;
    Ok(())
}

pub fn load_posteriors(dir: &Path, id: &str, speaker: usize) -> Result<(PosteriorHeader, Mat)> {
    let base = posterior_base(dir, id, speaker);
    let header: PosteriorHeader =
        serde_json::from_str(&std::fs::read_to_string(base.with_extension("post.json"))?)?;
    if header.dtype != "f64le" || header.layout != "row-major" {
        return Err(Error::Data(format!(
            "unsupported posterior encoding {}/{}",
            header.dtype, header.layout
        )));
    }
    let bytes = std::fs::read(base.with_extension("post.bin"))?;
    if bytes.len() != header.rows * header.cols * 8 {
        return Err(Error::Data(format!(
            "posterior payload is {} bytes, header says {}x{}",
            bytes.len(),
            header.rows,
            header.cols
        )));
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let m = Mat::from_shape_vec((header.rows, header.cols), values)
        .map_err(|e| Error::Data(format!("posterior shape: {e}")))?;
    Ok((header, m))
}

#[derive(Clone, Debug)]
pub struct TranscribeOutcome {
    pub meta: RunMeta,
    pub hyp_dir: PathBuf,
    pub used_ground_truth: bool,
    pub conversations: Vec<String>,
    /// Decoded speaker count per conversation, in the same order.
    pub decoded_speakers: Vec<usize>,
}

/// Transcribe the evaluation split. The diarizer predicts speaker activity
/// unless `ground_truth_activity` is set, in which case the reference
/// activity is used; everything downstream of the activity source is the
/// same code path.
pub fn cmd_transcribe(cfg: &ExperimentConfig, ground_truth_activity: bool) -> Result<TranscribeOutcome> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg);
    let (_spec, lexicon, convs) = load_run_corpus(cfg, &paths.corpus_dir())?;
    let (train, eval) = split_corpus(cfg, &convs)?;

    let am_path = paths.am_checkpoint(cfg.am_kind);
    if !am_path.is_file() {
        return Err(Error::Data(format!(
            "no acoustic model checkpoint at {}; run train --stage am first",
            am_path.display()
        )));
    }
    let am = AcousticModel::load(&am_path, cfg.am_kind)?;
    let diarizer = if ground_truth_activity {
        None
    } else {
        let path = paths.diarizer_checkpoint();
        if !path.is_file() {
            return Err(Error::Data(format!(
                "no diarizer checkpoint at {}; run train --stage diar first",
                path.display()
            )));
        }
        Some(Diarizer::load(&path)?)
    };
    let lm = train_lm(train, &lexicon, cfg.lm_add_k)?;

    let hyp_dir = paths.hyp_dir(ground_truth_activity);
    std::fs::create_dir_all(&hyp_dir)?;
    let meta = run_meta(cfg);

    let decoded: Vec<(String, usize)> = eval
        .par_iter()
        .map(|conv| {
            transcribe_one(cfg, &am, diarizer.as_ref(), &lexicon, &lm, conv, &hyp_dir, &meta)
        })
        .collect::<Result<Vec<_>>>()?;

    let outcome = TranscribeOutcome {
        meta: meta.clone(),
        hyp_dir: hyp_dir.clone(),
        used_ground_truth: ground_truth_activity,
        conversations: decoded.iter().map(|(id, _)| id.clone()).collect(),
        decoded_speakers: decoded.iter().map(|&(_, d)| d).collect(),
    };
    let summary = serde_json::json!({
        "meta": meta,
        "ground_truth_activity": ground_truth_activity,
        "conversations": outcome.conversations,
        "decoded_speakers": outcome.decoded_speakers,
    });
    std::fs::write(hyp_dir.join("transcribe_meta.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn transcribe_one(
    cfg: &ExperimentConfig,
    am: &AcousticModel,
    diarizer: Option<&Diarizer>,
    lexicon: &Lexicon,
    lm: &ToyLm,
    conv: &Conversation,
    hyp_dir: &Path,
    meta: &RunMeta,
) -> Result<(String, usize)> {
    let feat = &cfg.corpus.feature;
    let features = compute_mfcc(&conv.audio, feat)?;
    let x = features.stacked();

    // The activity source is the single point where the ground-truth and
    // diarizer paths differ.
    let (activity, decoded_speakers) = match diarizer {
        None => (conv.activity.clone(), 2),
        Some(d) => {
            let r = d.forward(x, feat.frame_shift_secs())?;
            (r.binary_activity, r.decoded_speakers)
        }
    };

    let mut log_post: [Mat; 2] = [Mat::zeros((0, 0)), Mat::zeros((0, 0))];
    for s in 0..2 {
        let act_col = activity.matrix.column(s).to_vec();
        let probs = am.posteriors(x, &Conditioning::Activity(&act_col))?;
        save_posteriors(hyp_dir, meta, &conv.id, s, &probs)?;
        log_post[s] = log_posteriors(&probs);
    }

    let lattice = decode_conversation(&conv.id, &log_post, &activity, lexicon, lm, &cfg.decoder)?;

    let trn_all = transcript_trn(
        &lattice,
        activity.num_frames(),
        activity.frame_shift,
        cfg.decoder.chunk_seconds,
    );
    let mut trn = meta_comment(";;", meta);
    for line in trn_all.lines() {
        let spk = line
            .split_whitespace()
            .nth(1)
            .and_then(|f| f.strip_prefix("spk"))
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or_else(|| Error::Data(format!("unparseable transcript line {line:?}")))?;
        if spk < decoded_speakers {
            trn.push_str(line);
            trn.push('\n');
        }
    }
    std::fs::write(hyp_dir.join(format!("{}.trn", conv.id)), trn)?;

    let tokens = [lattice.speakers[0].tokens.clone(), lattice.speakers[1].tokens.clone()];
    let scores = [lattice.speakers[0].score, lattice.speakers[1].score];
    write_hypothesis(hyp_dir, meta, &conv.id, &activity, &tokens, decoded_speakers, scores)?;

    let mut rttm = Vec::new();
    write_rttm_activity(&mut rttm, &conv.id, &activity)?;
    std::fs::write(hyp_dir.join(format!("{}.rttm", conv.id)), rttm)?;

    Ok((conv.id.clone(), decoded_speakers))
}

/// Parse RTTM SPEAKER lines (labels `spk0`/`spk1`) back into a frame-level
/// activity matrix.
pub fn parse_rttm_activity(
    text: &str,
    id: &str,
    frame_shift: f64,
    num_frames: usize,
) -> Result<SpeakerActivity> {
    let mut matrix = Mat::zeros((num_frames, 2));
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with(";;") {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 8 || fields[0] != "SPEAKER" {
            return Err(Error::Data(format!("malformed RTTM line {line:?}")));
        }
        if fields[1] != id {
            continue;
        }
        let onset: f64 = fields[3]
            .parse()
            .map_err(|_| Error::Data(format!("malformed RTTM onset {line:?}")))?;
        let dur: f64 = fields[4]
            .parse()
            .map_err(|_| Error::Data(format!("malformed RTTM duration {line:?}")))?;
        let speaker = match fields[7] {
            "spk0" => 0,
            "spk1" => 1,
            other => return Err(Error::Data(format!("unknown RTTM speaker {other:?}"))),
        };
        let start = (onset / frame_shift).round() as usize;
        let len = (dur / frame_shift).round() as usize;
        for t in start..(start + len).min(num_frames) {
            matrix[[t, speaker]] = 1.0;
        }
    }
    Ok(SpeakerActivity::new(matrix, frame_shift))
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ScoreOutcome {
    pub meta: RunMeta,
    /// Per-conversation and pooled DER rows, with and without overlap.
    pub der_rows: Vec<(String, DerReport)>,
    /// Per-conversation and pooled WER reports.
    pub wer_rows: Vec<(String, ScoringReport)>,
    pub der_csv: PathBuf,
    pub wer_csv: PathBuf,
    /// Pretty-printed report (also written to `report.txt`).
    pub tables: String,
}

/// Pooled row label in the score reports.
pub const POOLED_LABEL: &str = "ALL";

/// Score a hypothesis directory against the reference corpus. Emits DER rows
/// both with and without overlap regions, per conversation and pooled, plus
/// per-speaker WER; everything is written as CSV and a pretty table.
pub fn cmd_score(
    cfg: &ExperimentConfig,
    ref_dir: Option<&Path>,
    hyp_dir: Option<&Path>,
) -> Result<ScoreOutcome> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg);
    let ref_dir = match ref_dir {
        Some(d) => d.to_path_buf(),
        None => paths.corpus_dir(),
    };
    let hyp_dir = match hyp_dir {
        Some(d) => d.to_path_buf(),
        None => default_hyp_dir(&paths)?,
    };
    if !ref_dir.join("corpus.json").is_file() {
        return Err(Error::Data(format!(
            "no corpus manifest at {}; run synth first",
            ref_dir.display()
        )));
    }
    let (_spec, _lexicon, convs) = load_corpus(&ref_dir)?;

    let loaded: Vec<Option<(ConversationHypothesis, HypSidecar)>> = convs
        .par_iter()
        .map(|conv| -> Result<Option<(ConversationHypothesis, HypSidecar)>> {
            if hyp_dir.join(format!("{}.hyp.json", conv.id)).is_file() {
                Ok(Some(load_hypothesis(&hyp_dir, &conv.id)?))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let pairs: Vec<(&Conversation, ConversationHypothesis)> = convs
        .iter()
        .zip(loaded)
        .filter_map(|(conv, h)| h.map(|(hyp, _)| (conv, hyp)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no hypothesis sidecars in {}; run transcribe first",
            hyp_dir.display()
        )));
    }
    for (conv, hyp) in &pairs {
        if hyp.activity.num_frames() != conv.num_frames() {
            return Err(Error::Data(format!(
                "{}: hypothesis covers {} frames, reference {}",
                conv.id,
                hyp.activity.num_frames(),
                conv.num_frames()
            )));
        }
    }

    let mut der_rows = Vec::new();
    let mut wer_rows = Vec::new();
    for include_overlap in [true, false] {
        let sc = ScoringConfig { include_overlap, ..cfg.scoring };
        for (conv, hyp) in &pairs {
            let report = score_pipeline(&[(conv, hyp)], &sc)?;
            der_rows.push((conv.id.clone(), report.der));
            if include_overlap == cfg.scoring.include_overlap {
                wer_rows.push((conv.id.clone(), report));
            }
        }
        let all: Vec<(&Conversation, &ConversationHypothesis)> =
            pairs.iter().map(|(c, h)| (*c, h)).collect();
        let report = score_pipeline(&all, &sc)?;
        der_rows.push((POOLED_LABEL.to_string(), report.der));
        if include_overlap == cfg.scoring.include_overlap {
            wer_rows.push((POOLED_LABEL.to_string(), report));
        }
    }

    let meta = run_meta(cfg);
    let scores_dir = hyp_dir.join("scores");
    std::fs::create_dir_all(&scores_dir)?;
    let der_path = scores_dir.join("der.csv");
    let wer_path = scores_dir.join("wer.csv");
    std::fs::write(&der_path, meta_comment("#", &meta) + &der_csv(&der_rows))?;
    std::fs::write(&wer_path, meta_comment("#", &meta) + &wer_csv_rows_string(&wer_csv_rows(&wer_rows)))?;
    let tables = format!("{}\n{}", der_table(&der_rows), wer_table(&wer_rows));
    std::fs::write(scores_dir.join("report.txt"), meta_comment("#", &meta) + &tables)?;

    Ok(ScoreOutcome { meta, der_rows, wer_rows, der_csv: der_path, wer_csv: wer_path, tables })
}

fn default_hyp_dir(paths: &RunPaths) -> Result<PathBuf> {
    let diar = paths.hyp_dir(false);
    if diar.is_dir() {
        return Ok(diar);
    }
    let gts = paths.hyp_dir(true);
    if gts.is_dir() {
        return Ok(gts);
    }
    Err(Error::Data(format!(
        "no hypothesis directory under {}; run transcribe first",
        paths.root.display()
    )))
}

/// One row of the WER CSV.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WerCsvRow {
    pub system: String,
    /// "spk0", "spk1" or "all".
    pub speaker: String,
    pub counts: WerCounts,
}

/// Flatten scoring reports into WER CSV rows (per speaker plus "all").
pub fn wer_csv_rows(rows: &[(String, ScoringReport)]) -> Vec<WerCsvRow> {
    let mut out = Vec::new();
    for (label, r) in rows {
        for (s, c) in r.per_speaker.iter().enumerate() {
            out.push(WerCsvRow { system: label.clone(), speaker: format!("spk{s}"), counts: *c });
        }
        out.push(WerCsvRow { system: label.clone(), speaker: "all".into(), counts: r.aggregate });
    }
    out
}

/// Render WER CSV rows in the same format [`crate::evaluate::wer_csv`] uses.
pub fn wer_csv_rows_string(rows: &[WerCsvRow]) -> String {
    let mut out =
        String::from("system,speaker,substitutions,deletions,insertions,ref_words,wer_pct\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.system,
            r.speaker,
            r.counts.substitutions,
            r.counts.deletions,
            r.counts.insertions,
            r.counts.ref_words,
            fmt_pct(r.counts.wer_pct())
        );
    }
    out
}

fn csv_body(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Parse a DER CSV (as written by [`cmd_score`]) back into report rows.
pub fn parse_der_csv(text: &str) -> Result<Vec<(String, DerReport)>> {
    let mut lines = csv_body(text);
    let header = "system,overlap,miss_pct,fa_pct,spkerr_pct,der_pct,scored_time_s";
    if lines.next() != Some(header) {
        return Err(Error::Data("DER CSV header missing".into()));
    }
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Data(format!("malformed DER CSV row {line:?}")));
        }
        let overlap_included = match fields[1] {
            "with" => true,
            "without" => false,
            other => return Err(Error::Data(format!("bad overlap column {other:?}"))),
        };
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Data(format!("bad DER CSV number {:?}", fields[i])))
        };
        rows.push((
            fields[0].to_string(),
            DerReport {
                miss_pct: num(2)?,
                fa_pct: num(3)?,
                spkerr_pct: num(4)?,
                der_pct: num(5)?,
                scored_time: num(6)?,
                overlap_included,
            },
        ));
    }
    Ok(rows)
}

/// Parse a WER CSV (as written by [`cmd_score`]) back into rows.
pub fn parse_wer_csv(text: &str) -> Result<Vec<WerCsvRow>> {
    let mut lines = csv_body(text);
    let header = "system,speaker,substitutions,deletions,insertions,ref_words,wer_pct";
    if lines.next() != Some(header) {
        return Err(Error::Data("WER CSV header missing".into()));
    }
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Data(format!("malformed WER CSV row {line:?}")));
        }
        let num = |i: usize| -> Result<usize> {
            fields[i]
                .parse()
                .map_err(|_| Error::Data(format!("bad WER CSV count {:?}", fields[i])))
        };
        rows.push(WerCsvRow {
            system: fields[0].to_string(),
            speaker: fields[1].to_string(),
            counts: WerCounts {
                substitutions: num(2)?,
                deletions: num(3)?,
                insertions: num(4)?,
                ref_words: num(5)?,
            },
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// 2-D projection of speaker embeddings from held-out segments.
    Embeddings,
    /// Predicted senone trajectories with the activity input overlaid.
    Senones,
    /// Training loss curves.
    Loss,
}

#[derive(Clone, Debug)]
pub struct PlotOutcome {
    pub meta: RunMeta,
    pub files: Vec<PathBuf>,
}

/// Render SVG plots. `input` overrides the default source directory: the
/// models directory for loss curves, the hypothesis directory for senones;
/// embeddings always read the corpus and the trained conditioned model.
pub fn cmd_plot(cfg: &ExperimentConfig, kind: PlotKind, input: Option<&Path>) -> Result<PlotOutcome> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg);
    let meta = run_meta(cfg);
    let out_dir = paths.plots_dir();
    std::fs::create_dir_all(&out_dir)?;
    let files = match kind {
        PlotKind::Loss => plot_loss(&paths, &meta, input, &out_dir)?,
        PlotKind::Senones => plot_senones(cfg, &paths, &meta, input, &out_dir)?,
        PlotKind::Embeddings => plot_embeddings(cfg, &paths, &meta, &out_dir)?,
    };
    Ok(PlotOutcome { meta, files })
}

fn plot_loss(
    paths: &RunPaths,
    meta: &RunMeta,
    input: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let dir = input.map(Path::to_path_buf).unwrap_or_else(|| paths.models_dir());
    let mut curves = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
            if let Some(stem) = name.strip_suffix("_loss.csv") {
                let losses = parse_loss_csv(&std::fs::read_to_string(&path)?)?;
                curves.push((stem.to_string(), losses));
            }
        }
    }
    curves.sort_by(|a, b| a.0.cmp(&b.0));
    if curves.is_empty() {
        return Err(Error::RejectedInput(format!(
            "no loss curves (*_loss.csv) in {}; run train first",
            dir.display()
        )));
    }
    let mut files = Vec::new();
    for (stem, losses) in curves {
        let svg = svg::loss_curve(meta, &stem, &losses)?;
        let path = out_dir.join(format!("loss-{stem}.svg"));
        std::fs::write(&path, svg)?;
        files.push(path);
    }
    Ok(files)
}

fn plot_senones(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    meta: &RunMeta,
    input: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let hyp_dir = match input {
        Some(d) => d.to_path_buf(),
        None => default_hyp_dir(paths)?,
    };
    let mut ids: Vec<String> = Vec::new();
    if hyp_dir.is_dir() {
        for entry in std::fs::read_dir(&hyp_dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".hyp.json") {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::RejectedInput(format!(
            "no hypothesis sidecars in {}; run transcribe first",
            hyp_dir.display()
        )));
    }
    let mut files = Vec::new();
    for id in ids {
        let (hyp, _sidecar) = load_hypothesis(&hyp_dir, &id)?;
        let mut traces = Vec::new();
        for s in 0..2 {
            let (_, probs) = load_posteriors(&hyp_dir, &id, s)?;
            let argmax: Vec<usize> = probs
                .rows()
                .into_iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite posterior"))
                        .map(|(i, _)| i)
                        .unwrap_or(0)
                })
                .collect();
            let activity: Vec<f64> = hyp.activity.matrix.column(s).to_vec();
            traces.push((argmax, activity));
        }
        let svg = svg::senone_traces(meta, &id, cfg.am.num_senones, &traces)?;
        let path = out_dir.join(format!("senones-{id}.svg"));
        std::fs::write(&path, svg)?;
        files.push(path);
    }
    Ok(files)
}

/// Segment classes of the embedding scatter: single-speaker segments carry
/// their speaker's label, overlapped segments appear once per speaker channel.
const EMBED_CLASSES: [&str; 4] = ["A", "B", "C-A", "C-B"];

fn plot_embeddings(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    meta: &RunMeta,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if !cfg.am_kind.is_conditioned() {
        return Err(Error::UnsupportedConfig(format!(
            "the embedding scatter needs a conditioned acoustic model, not {}",
            cfg.am_kind.label()
        )));
    }
    let (_spec, _lexicon, convs) = load_run_corpus(cfg, &paths.corpus_dir())?;
    let (_train, eval) = split_corpus(cfg, &convs)?;
    let am_path = paths.am_checkpoint(cfg.am_kind);
    if !am_path.is_file() {
        return Err(Error::Data(format!(
            "no acoustic model checkpoint at {}; run train --stage am first",
            am_path.display()
        )));
    }
    let am = AcousticModel::load(&am_path, cfg.am_kind)?;

    let (points, classes) = collect_segment_embeddings(cfg, &am, eval)?;
    let coords = crate::acoustic::project_embeddings_2d(
        &points,
        derive_seed(cfg.seed, SEED_PROJECTION),
    )?;
    let svg = svg::embedding_scatter(meta, &coords, &classes)?;
    let path = out_dir.join("embeddings.svg");
    std::fs::write(&path, svg)?;
    Ok(vec![path])
}

/// Embed every usable segment of the given conversations: one point per
/// single-speaker segment, two per overlapped segment (one per conditioning
/// channel). Returns the K x embedding_dim matrix and a class index per row.
pub fn collect_segment_embeddings(
    cfg: &ExperimentConfig,
    am: &AcousticModel,
    convs: &[Conversation],
) -> Result<(Mat, Vec<usize>)> {
    let feat = &cfg.corpus.feature;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut classes = Vec::new();
    for conv in convs {
        for seg in form_segments(&conv.activity)? {
            if seg.len() < crate::corpus::MIN_AUGMENT_FRAMES {
                continue;
            }
            let data = extract_segment(conv, &seg, feat);
            let w = Waveform::new(data.audio, feat.sample_rate)?;
            let fs = compute_mfcc(&w, feat)?;
            let x = fs.stacked().slice(ndarray::s![..data.frames, ..]).to_owned();
            for &s in seg.speakers() {
                let act: Vec<f64> = data.activity.column(s).to_vec();
                let emb = am.speaker_embedding(&x, &act)?;
                if emb.is_silence() {
                    continue;
                }
                rows.push(emb.vector);
                classes.push(match (seg.kind, s) {
                    (SegmentKind::A, _) => 0,
                    (SegmentKind::B, _) => 1,
                    (SegmentKind::C, 0) => 2,
                    (SegmentKind::C, _) => 3,
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::RejectedInput("no usable segments to embed".into()));
    }
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let points = Mat::from_shape_vec((rows.len(), dim), flat).expect("consistent embedding dims");
    Ok((points, classes))
}

// ---------------------------------------------------------------------------
// SVG rendering
// ---------------------------------------------------------------------------

mod svg {
    use super::{meta_comment, Error, Mat, Result, RunMeta, EMBED_CLASSES};
    use std::fmt::Write as _;

    const WIDTH: f64 = 640.0;
    const HEIGHT: f64 = 400.0;
    const MARGIN: f64 = 52.0;
    const CLASS_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#17becf", "#ff7f0e"];

    /// Map data coordinates into the plot box (y grows upward).
    struct Axes {
        xmin: f64,
        xmax: f64,
        ymin: f64,
        ymax: f64,
        height: f64,
    }

    impl Axes {
        fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64, height: f64) -> Self {
            let pad = |lo: &mut f64, hi: &mut f64| {
                if *hi <= *lo {
                    *hi = *lo + 1.0;
                }
            };
            let (mut xmin, mut xmax, mut ymin, mut ymax) = (xmin, xmax, ymin, ymax);
            pad(&mut xmin, &mut xmax);
            pad(&mut ymin, &mut ymax);
            Axes { xmin, xmax, ymin, ymax, height }
        }

        fn x(&self, v: f64) -> f64 {
            MARGIN + (v - self.xmin) / (self.xmax - self.xmin) * (WIDTH - 2.0 * MARGIN)
        }

        fn y(&self, v: f64) -> f64 {
            self.height - MARGIN
                - (v - self.ymin) / (self.ymax - self.ymin) * (self.height - 2.0 * MARGIN)
        }
    }

    fn open(out: &mut String, meta: &RunMeta, title: &str, height: f64) {
        let _ = write!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" \
             viewBox=\"0 0 {WIDTH} {height}\">\n<!--{}-->\n",
            meta_comment("", meta).trim_end()
        );
        let _ = writeln!(
            out,
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" \
             text-anchor=\"middle\">{title}</text>",
            WIDTH / 2.0
        );
    }

    fn axes_box(out: &mut String, a: &Axes, xlabel: &str, ylabel: &str) {
        let (x0, x1) = (MARGIN, WIDTH - MARGIN);
        let (y0, y1) = (a.height - MARGIN, MARGIN);
        let _ = writeln!(
            out,
            "<rect x=\"{x0}\" y=\"{y1}\" width=\"{}\" height=\"{}\" fill=\"none\" \
             stroke=\"#444\"/>",
            x1 - x0,
            y0 - y1
        );
        let label = |out: &mut String, x: f64, y: f64, anchor: &str, s: &str| {
            let _ = writeln!(
                out,
                "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" \
                 fill=\"#444\" text-anchor=\"{anchor}\">{s}</text>"
            );
        };
        label(out, x0, y0 + 16.0, "middle", &trim_float(a.xmin));
        label(out, x1, y0 + 16.0, "middle", &trim_float(a.xmax));
        label(out, x0 - 6.0, y0, "end", &trim_float(a.ymin));
        label(out, x0 - 6.0, y1 + 4.0, "end", &trim_float(a.ymax));
        label(out, (x0 + x1) / 2.0, y0 + 32.0, "middle", xlabel);
        label(out, x0 - 6.0, y1 - 10.0, "end", ylabel);
    }

    fn trim_float(v: f64) -> String {
        if (v - v.round()).abs() < 1e-9 && v.abs() < 1e9 {
            format!("{}", v.round() as i64)
        } else {
            format!("{v:.3}")
        }
    }

    fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str, dashed: bool) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>",
            coords.join(" ")
        );
    }

    pub fn loss_curve(meta: &RunMeta, stage: &str, losses: &[f64]) -> Result<String> {
        if losses.is_empty() {
            return Err(Error::RejectedInput(format!("loss curve for {stage} is empty")));
        }
        let ymin = losses.iter().copied().fold(f64::INFINITY, f64::min);
        let ymax = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let a = Axes::new(0.0, (losses.len() - 1).max(1) as f64, ymin, ymax, HEIGHT);
        let mut out = String::new();
        open(&mut out, meta, &format!("training loss: {stage}"), HEIGHT);
        axes_box(&mut out, &a, "epoch", "mean loss");
        let pts: Vec<(f64, f64)> =
            losses.iter().enumerate().map(|(i, &l)| (a.x(i as f64), a.y(l))).collect();
        polyline(&mut out, &pts, CLASS_COLORS[0], false);
        for (x, y) in &pts {
            let _ = writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\" fill=\"{}\"/>", CLASS_COLORS[0]);
        }
        out.push_str("</svg>\n");
        Ok(out)
    }

    /// Two stacked panels (one per speaker channel): the arg-max senone
    /// trajectory solid, the activity conditioning dashed.
    pub fn senone_traces(
        meta: &RunMeta,
        id: &str,
        num_senones: usize,
        traces: &[(Vec<usize>, Vec<f64>)],
    ) -> Result<String> {
        if traces.iter().all(|(t, _)| t.is_empty()) {
            return Err(Error::RejectedInput(format!("no posterior frames for {id}")));
        }
        let panel_h = 240.0;
        let total_h = panel_h * traces.len() as f64;
        let mut out = String::new();
        open(&mut out, meta, &format!("senone predictions: {id}"), total_h);
        let top = num_senones.max(2) as f64 - 1.0;
        for (panel, (argmax, activity)) in traces.iter().enumerate() {
            let n = argmax.len().max(2);
            let mut a = Axes::new(0.0, (n - 1) as f64, 0.0, top, panel_h);
            // shift this panel's box down by its offset
            let offset = panel as f64 * panel_h;
            let pts: Vec<(f64, f64)> = argmax
                .iter()
                .enumerate()
                .map(|(t, &s)| (a.x(t as f64), a.y(s as f64) + offset))
                .collect();
            let act_pts: Vec<(f64, f64)> = activity
                .iter()
                .enumerate()
                .map(|(t, &v)| (a.x(t as f64), a.y(v * top) + offset))
                .collect();
            a.height = panel_h; // axes labels are drawn per panel
            let mut panel_box = String::new();
            axes_box(&mut panel_box, &a, "frame", "senone");
            // re-anchor the panel's box by offsetting its y coordinates
            let _ = writeln!(out, "<g transform=\"translate(0,{offset})\">{panel_box}</g>");
            polyline(&mut out, &pts, CLASS_COLORS[panel % CLASS_COLORS.len()], false);
            polyline(&mut out, &act_pts, "#555555", true);
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
                 fill=\"#444\">spk{panel} (dashed: activity)</text>",
                MARGIN + 6.0,
                offset + MARGIN - 6.0
            );
        }
        out.push_str("</svg>\n");
        Ok(out)
    }

    /// Scatter of 2-D projected embeddings, one color per segment class.
    pub fn embedding_scatter(meta: &RunMeta, coords: &Mat, classes: &[usize]) -> Result<String> {
        if coords.nrows() != classes.len() {
            return Err(Error::RejectedInput(format!(
                "{} points vs {} class labels",
                coords.nrows(),
                classes.len()
            )));
        }
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for row in coords.rows() {
            xmin = xmin.min(row[0]);
            xmax = xmax.max(row[0]);
            ymin = ymin.min(row[1]);
            ymax = ymax.max(row[1]);
        }
        let a = Axes::new(xmin, xmax, ymin, ymax, HEIGHT);
        let mut out = String::new();
        open(&mut out, meta, "speaker embeddings (2-D projection)", HEIGHT);
        axes_box(&mut out, &a, "dim 1", "dim 2");
        for (row, &class) in coords.rows().into_iter().zip(classes) {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.8\"/>",
                a.x(row[0]),
                a.y(row[1]),
                CLASS_COLORS[class % CLASS_COLORS.len()]
            );
        }
        for (i, name) in EMBED_CLASSES.iter().enumerate() {
            let y = MARGIN + 16.0 * i as f64;
            let _ = writeln!(
                out,
                "<circle cx=\"{}\" cy=\"{y}\" r=\"4\" fill=\"{}\"/>\
                 <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{name}</text>",
                WIDTH - MARGIN - 60.0,
                CLASS_COLORS[i],
                WIDTH - MARGIN - 50.0,
                y + 4.0
            );
        }
        out.push_str("</svg>\n");
        Ok(out)
    }
}
