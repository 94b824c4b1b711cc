//! Synthetic two-speaker conversation corpus with exact ground truth.
//!
//! A small left-to-right state machine emits per-speaker "senone" state
//! sequences; each state is rendered as a distinct stack of sinusoids inside
//! a speaker-specific frequency band plus a little noise, so frame-level
//! alignments, activities and token references are exact by construction.
//! The module also provides mixture simulation for diarizer training,
//! segment formation over binary activity, overlap augmentation for
//! acoustic-model training, and corpus persistence (stereo WAV + JSON
//! sidecar, RTTM export).

use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{mix_channels, FeatureConfig, Waveform};
use crate::nn::Mat;

/// Split one master seed into independent per-worker seeds (splitmix64).
pub fn derive_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(i.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Frame-level speaker activity: N x S values in [0, 1] (binary for
/// references, posteriors for hypotheses).
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerActivity {
    pub matrix: Mat,
    pub frame_shift: f64,
}

impl SpeakerActivity {
    pub fn new(matrix: Mat, frame_shift: f64) -> Self {
        SpeakerActivity { matrix, frame_shift }
    }

    pub fn num_frames(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_speakers(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_binary(&self) -> bool {
        self.matrix.iter().all(|&x| x == 0.0 || x == 1.0)
    }

    pub fn active(&self, t: usize, s: usize) -> bool {
        self.matrix[[t, s]] > 0.5
    }

    /// Frames where at least one speaker is active.
    pub fn voiced_frames(&self) -> usize {
        (0..self.num_frames())
            .filter(|&t| (0..self.num_speakers()).any(|s| self.active(t, s)))
            .count()
    }

    /// Frames where two or more speakers are active.
    pub fn overlapped_frames(&self) -> usize {
        (0..self.num_frames())
            .filter(|&t| (0..self.num_speakers()).filter(|&s| self.active(t, s)).count() >= 2)
            .count()
    }
}

/// A lexicon token placed on the conversation timeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenInstance {
    pub token: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Counters collected while simulating one mixture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureStats {
    pub turn_boundaries: usize,
    pub overlapped_boundaries: usize,
    pub overlapped_frames: usize,
    pub voiced_frames: usize,
}

/// One two-speaker conversation with exact ground truth.
#[derive(Clone, Debug)]
pub struct Conversation {
    pub id: String,
    /// Mixed single channel (mean of the two speaker channels).
    pub audio: Waveform,
    /// Clean per-speaker channels (synthetic ground truth).
    pub channels: [Waveform; 2],
    pub activity: SpeakerActivity,
    /// Per-speaker token streams with frame boundaries.
    pub ref_tokens: [Vec<TokenInstance>; 2],
    /// Per-speaker frame-level senone indices; 0 where the speaker is silent.
    pub alignments: [Vec<usize>; 2],
    pub stats: MixtureStats,
}

impl Conversation {
    pub fn num_frames(&self) -> usize {
        self.activity.num_frames()
    }

    /// Overlapped fraction of voiced frames.
    pub fn overlap_fraction(&self) -> f64 {
        if self.stats.voiced_frames == 0 {
            0.0
        } else {
            self.stats.overlapped_frames as f64 / self.stats.voiced_frames as f64
        }
    }

    /// Check the structural invariants that tie audio, activity, alignments
    /// and token boundaries together.
    pub fn validate(&self, cfg: &FeatureConfig) -> Result<()> {
        let n = self.num_frames();
        if cfg.num_frames(self.audio.len()) != n {
            return Err(Error::Data(format!(
                "{}: audio of {} samples yields {} frames but activity has {}",
                self.id,
                self.audio.len(),
                cfg.num_frames(self.audio.len()),
                n
            )));
        }
        if !self.activity.is_binary() {
            return Err(Error::Data(format!("{}: reference activity must be binary", self.id)));
        }
        for s in 0..2 {
            if self.alignments[s].len() != n {
                return Err(Error::Data(format!("{}: alignment length mismatch", self.id)));
            }
            for t in 0..n {
                let active = self.activity.active(t, s);
                let label = self.alignments[s][t];
                if active && label == 0 {
                    return Err(Error::Data(format!(
                        "{}: speaker {s} active at frame {t} without a senone label",
                        self.id
                    )));
                }
                if !active && label != 0 {
                    return Err(Error::Data(format!(
                        "{}: speaker {s} silent at frame {t} but labelled {label}",
                        self.id
                    )));
                }
            }
            for tok in &self.ref_tokens[s] {
                if tok.end_frame <= tok.start_frame || tok.end_frame > n {
                    return Err(Error::Data(format!("{}: bad token span", self.id)));
                }
                for t in tok.start_frame..tok.end_frame {
                    if !self.activity.active(t, s) {
                        return Err(Error::Data(format!(
                            "{}: token at frame {t} outside speaker {s} activity",
                            self.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Token inventory: each token is a short sequence of senone states drawn
/// from 1..num_senones (state 0 is reserved for "inactive").
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Lexicon {
    /// Number of output classes including the reserved 0.
    pub num_senones: usize,
    pub tokens: Vec<Vec<usize>>,
}

impl Lexicon {
    pub fn generate(num_senones: usize, vocab_size: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        if num_senones < 2 {
            return Err(Error::RejectedInput(format!(
                "senone inventory of {num_senones} leaves no speech states"
            )));
        }
        if vocab_size == 0 {
            return Err(Error::RejectedInput("vocabulary must be non-empty".into()));
        }
        let states = num_senones - 1;
        let mut tokens: Vec<Vec<usize>> = Vec::with_capacity(vocab_size);
        let mut guard = 0;
        while tokens.len() < vocab_size {
            let len = rng.random_range(2..=4usize);
            let mut tok = Vec::with_capacity(len);
            for _ in 0..len {
                loop {
                    let s = rng.random_range(1..=states);
                    if tok.last() != Some(&s) {
                        tok.push(s);
                        break;
                    }
                }
            }
            if !tokens.contains(&tok) {
                tokens.push(tok);
            }
            guard += 1;
            if guard > vocab_size * 1000 {
                return Err(Error::RejectedInput(format!(
                    "cannot build {vocab_size} distinct tokens from {states} states"
                )));
            }
        }
        Ok(Lexicon { num_senones, tokens })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }
}

/// Timeline-placement statistics for mixture simulation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MixtureParams {
    /// Mean of the exponential silence gap between turns, seconds.
    pub gap_mean_secs: f64,
    /// Probability that a turn starts before the previous one ends.
    pub overlap_prob: f64,
    /// Overlapped fraction of the shorter utterance, sampled uniformly.
    pub overlap_range: (f64, f64),
    /// Probability that the same speaker takes two turns in a row.
    pub same_speaker_repeat_prob: f64,
}

impl Default for MixtureParams {
    fn default() -> Self {
        MixtureParams {
            gap_mean_secs: 2.0,
            overlap_prob: 0.3,
            overlap_range: (0.3, 0.7),
            same_speaker_repeat_prob: 0.2,
        }
    }
}

/// Full description of a synthetic corpus.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ToyCorpusSpec {
    pub num_conversations: usize,
    /// Output classes including the reserved 0 (inactive).
    pub num_senones: usize,
    pub vocab_size: usize,
    /// Turns per conversation, inclusive range.
    pub utterances_per_conversation: (usize, usize),
    /// Tokens per utterance, inclusive range.
    pub tokens_per_utterance: (usize, usize),
    /// Frames each senone state is held, inclusive range.
    pub state_duration_frames: (usize, usize),
    pub mixture: MixtureParams,
    pub feature: FeatureConfig,
    /// Frequency band (lo, hi) per speaker, Hz.
    pub speaker_bands: [(f64, f64); 2],
    /// Amplitudes of the three per-state sinusoids.
    pub tone_amplitudes: [f64; 3],
    /// Added white noise during speech.
    pub noise_std: f64,
    /// Noise floor during silence.
    pub silence_noise_std: f64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            num_conversations: 10,
            num_senones: 64,
            vocab_size: 20,
            utterances_per_conversation: (6, 10),
            tokens_per_utterance: (2, 4),
            state_duration_frames: (8, 14),
            mixture: MixtureParams::default(),
            feature: FeatureConfig::default(),
            speaker_bands: [(300.0, 1800.0), (2000.0, 3600.0)],
            tone_amplitudes: [0.30, 0.24, 0.20],
            noise_std: 0.005,
            silence_noise_std: 1e-4,
        }
    }
}

impl ToyCorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.num_senones < 2 {
            return Err(Error::RejectedInput(format!(
                "senone inventory of {} leaves no speech states",
                self.num_senones
            )));
        }
        if self.utterances_per_conversation.0 < 2 {
            return Err(Error::RejectedInput(
                "need at least two turns so both speakers appear".into(),
            ));
        }
        let nyquist = self.feature.sample_rate as f64 / 2.0;
        for (lo, hi) in self.speaker_bands {
            if !(0.0 < lo && lo < hi && hi < nyquist) {
                return Err(Error::RejectedInput(format!(
                    "speaker band {lo}-{hi} Hz must sit below Nyquist {nyquist} Hz"
                )));
            }
        }
        Ok(())
    }

    /// The three sinusoid frequencies rendering senone `state` for `speaker`.
    ///
    /// Each tone lives in its own third of the speaker band, positioned on a
    /// per-state grid; the grid indices are the state multiplied by 1, 4 and
    /// 16 (mod the state count), so any two states disagree strongly in at
    /// least one tone and no two states share a frequency set.
    pub fn state_freqs(&self, speaker: usize, state: usize) -> [f64; 3] {
        debug_assert!(state >= 1 && state < self.num_senones);
        let k = self.num_senones - 1;
        let (lo, hi) = self.speaker_bands[speaker];
        let third = (hi - lo) / 3.0;
        let step = third / k as f64;
        let mut freqs = [0.0; 3];
        for (i, mult) in [1usize, 4, 16].into_iter().enumerate() {
            let idx = (state * mult) % k;
            freqs[i] = lo + third * i as f64 + (idx as f64 + 0.5) * step;
        }
        freqs
    }
}

/// One planned utterance: token ids, per-token frame spans (relative to the
/// utterance start) and the per-frame senone sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtterancePlan {
    pub tokens: Vec<usize>,
    pub token_bounds: Vec<(usize, usize)>,
    pub states: Vec<usize>,
}

impl UtterancePlan {
    pub fn num_frames(&self) -> usize {
        self.states.len()
    }
}

/// Sample an utterance: a few tokens back to back, each state held for a
/// random number of frames.
pub fn sample_utterance(
    lex: &Lexicon,
    spec: &ToyCorpusSpec,
    rng: &mut ChaCha12Rng,
) -> UtterancePlan {
    let (tok_lo, tok_hi) = spec.tokens_per_utterance;
    let num_tokens = rng.random_range(tok_lo..=tok_hi);
    let (d_lo, d_hi) = spec.state_duration_frames;
    let mut tokens = Vec::with_capacity(num_tokens);
    let mut token_bounds = Vec::with_capacity(num_tokens);
    let mut states = Vec::new();
    for _ in 0..num_tokens {
        let tok = rng.random_range(0..lex.vocab_size());
        let start = states.len();
        for &s in &lex.tokens[tok] {
            let dur = rng.random_range(d_lo..=d_hi);
            states.extend(std::iter::repeat_n(s, dur));
        }
        tokens.push(tok);
        token_bounds.push((start, states.len()));
    }
    UtterancePlan { tokens, token_bounds, states }
}

/// Map a sample index to the frame whose analysis-window centre is nearest.
/// Inverse of the rendering rule, so state boundaries in the audio line up
/// with frame boundaries in the labels.
pub fn sample_to_frame(n: usize, num_frames: usize, cfg: &FeatureConfig) -> usize {
    let lead = (cfg.window - cfg.hop) / 2;
    (n.saturating_sub(lead) / cfg.hop).min(num_frames - 1)
}

/// Render one speaker channel from a frame-level alignment (0 = silent).
pub fn render_channel(
    alignment: &[usize],
    speaker: usize,
    spec: &ToyCorpusSpec,
    rng: &mut ChaCha12Rng,
) -> Waveform {
    let n = alignment.len();
    let cfg = &spec.feature;
    let total = cfg.num_samples(n);
    let sr = cfg.sample_rate as f64;
    let speech_noise = Normal::new(0.0, spec.noise_std).expect("positive std");
    let floor_noise = Normal::new(0.0, spec.silence_noise_std).expect("positive std");
    let tau = 2.0 * std::f64::consts::PI;

    // per-sample state, then ramp gains at state-run edges so that analysis
    // windows straddling a transition see little of the neighbouring state
    let per_sample: Vec<usize> =
        (0..total).map(|i| alignment[sample_to_frame(i, n, cfg)]).collect();
    let ramp = (cfg.hop / 2).max(1);
    let mut gain = vec![1.0f64; total];
    let mut i = 0;
    while i < total {
        if per_sample[i] == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < total && per_sample[i] == per_sample[start] {
            i += 1;
        }
        for (k, g) in gain[start..i].iter_mut().enumerate() {
            let edge = k.min(i - start - 1 - k);
            if edge < ramp {
                let x = (edge as f64 + 0.5) / ramp as f64;
                *g = 0.5 - 0.5 * (std::f64::consts::PI * x).cos();
            }
        }
    }

    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        let state = per_sample[i];
        let x = if state > 0 {
            let freqs = spec.state_freqs(speaker, state);
            let ph = i as f64 / sr;
            let tones: f64 = freqs
                .iter()
                .zip(&spec.tone_amplitudes)
                .map(|(&f, &a)| a * (tau * f * ph).sin())
                .sum();
            gain[i] * tones + speech_noise.sample(rng)
        } else {
            floor_noise.sample(rng)
        };
        samples.push(x);
    }
    Waveform { samples, sample_rate: cfg.sample_rate }
}

/// Place utterances from two per-speaker pools on a shared timeline and
/// render the conversation. Activity, alignments and token references are
/// exact by construction.
pub fn simulate_mixture(
    spec: &ToyCorpusSpec,
    pool0: &[UtterancePlan],
    pool1: &[UtterancePlan],
    id: &str,
    rng: &mut ChaCha12Rng,
) -> Result<Conversation> {
    spec.validate()?;
    if pool0.is_empty() || pool1.is_empty() {
        return Err(Error::RejectedInput("both utterance pools must be non-empty".into()));
    }
    let params = &spec.mixture;
    let frame_shift = spec.feature.frame_shift_secs();
    let gap_dist = Exp::new(1.0 / params.gap_mean_secs).map_err(|_| {
        Error::RejectedInput("gap mean must be positive".into())
    })?;

    let (turn_lo, turn_hi) = spec.utterances_per_conversation;
    let turns = rng.random_range(turn_lo..=turn_hi);

    // choose turn order and utterances first, then place them
    let mut speaker = rng.random_range(0..2usize);
    let mut placed: Vec<(usize, usize, UtterancePlan)> = Vec::new(); // (speaker, start, plan)
    let mut stats = MixtureStats::default();
    let mut cursor = rng.random_range(5..=25usize); // lead-in silence
    let mut prev_end = cursor;
    // frame after which this speaker is free (no self-overlap)
    let mut free_at = [0usize; 2];

    for turn in 0..turns {
        if turn > 0 {
            let same = rng.random_bool(params.same_speaker_repeat_prob);
            if !same {
                speaker = 1 - speaker;
            }
            stats.turn_boundaries += 1;
            let pool = if speaker == 0 { pool0 } else { pool1 };
            let plan = pool.choose(rng).expect("non-empty pool").clone();
            let len = plan.num_frames();
            let overlap =
                !same && rng.random_bool(params.overlap_prob) && prev_end > free_at[speaker];
            let start = if overlap {
                let prev_len = prev_end - placed.last().expect("turn > 0").1;
                let (u_lo, u_hi) = params.overlap_range;
                let u = rng.random_range(u_lo..u_hi);
                let ov = ((u * len.min(prev_len) as f64).round() as usize).max(1);
                stats.overlapped_boundaries += 1;
                // never start before this speaker's own previous utterance ended
                (prev_end - ov.min(prev_end)).max(free_at[speaker])
            } else {
                let gap_frames = (gap_dist.sample(rng) / frame_shift).round() as usize;
                prev_end + gap_frames.max(1)
            };
            prev_end = (start + len).max(prev_end);
            free_at[speaker] = start + len;
            placed.push((speaker, start, plan));
        } else {
            let pool = if speaker == 0 { pool0 } else { pool1 };
            let plan = pool.choose(rng).expect("non-empty pool").clone();
            prev_end = cursor + plan.num_frames();
            free_at[speaker] = prev_end;
            placed.push((speaker, cursor, plan));
        }
        cursor = prev_end;
    }

    let n = prev_end + 10; // tail silence
    let mut activity = Mat::zeros((n, 2));
    let mut alignments = [vec![0usize; n], vec![0usize; n]];
    let mut ref_tokens: [Vec<TokenInstance>; 2] = [Vec::new(), Vec::new()];
    for (s, start, plan) in &placed {
        for (i, &st) in plan.states.iter().enumerate() {
            let t = start + i;
            activity[[t, *s]] = 1.0;
            alignments[*s][t] = st;
        }
        for (tok, (b0, b1)) in plan.tokens.iter().zip(&plan.token_bounds) {
            ref_tokens[*s].push(TokenInstance {
                token: *tok,
                start_frame: start + b0,
                end_frame: start + b1,
            });
        }
    }
    for s in 0..2 {
        ref_tokens[s].sort_by_key(|t| t.start_frame);
    }

    let act = SpeakerActivity::new(activity, frame_shift);
    stats.voiced_frames = act.voiced_frames();
    stats.overlapped_frames = act.overlapped_frames();

    let ch0 = render_channel(&alignments[0], 0, spec, rng);
    let ch1 = render_channel(&alignments[1], 1, spec, rng);
    let audio = mix_channels(&ch0, &ch1)?;

    let conv = Conversation {
        id: id.to_string(),
        audio,
        channels: [ch0, ch1],
        activity: act,
        ref_tokens,
        alignments,
        stats,
    };
    conv.validate(&spec.feature)?;
    Ok(conv)
}

/// Synthesize a corpus. Conversation `i` uses a seed derived from `seed` and
/// `i`, so corpora are reproducible and conversations independent.
pub fn synth_toy_corpus(spec: &ToyCorpusSpec, seed: u64) -> Result<(Lexicon, Vec<Conversation>)> {
    spec.validate()?;
    let mut lex_rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0));
    let lex = Lexicon::generate(spec.num_senones, spec.vocab_size, &mut lex_rng)?;
    let mut convs = Vec::with_capacity(spec.num_conversations);
    for i in 0..spec.num_conversations {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1 + i as u64));
        let pool_size = 6;
        let pool0: Vec<UtterancePlan> =
            (0..pool_size).map(|_| sample_utterance(&lex, spec, &mut rng)).collect();
        let pool1: Vec<UtterancePlan> =
            (0..pool_size).map(|_| sample_utterance(&lex, spec, &mut rng)).collect();
        let id = format!("conv{i:04}");
        convs.push(simulate_mixture(spec, &pool0, &pool1, &id, &mut rng)?);
    }
    Ok((lex, convs))
}

// ---------------------------------------------------------------------------
// Segment formation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    /// Only speaker 0 speaks.
    A,
    /// Only speaker 1 speaks.
    B,
    /// Contains overlapped speech.
    C,
}

/// Half-open frame range of one training segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub kind: SegmentKind,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn speakers(&self) -> &'static [usize] {
        match self.kind {
            SegmentKind::A => &[0],
            SegmentKind::B => &[1],
            SegmentKind::C => &[0, 1],
        }
    }
}

/// Silence (frames, on both channels) that terminates an overlapped segment.
pub const SEGMENT_GAP_FRAMES: usize = 10;

/// Partition voiced frames into single-speaker (A/B) and overlapped (C)
/// segments: single-speaker regions are taken as-is as maximal runs, while a
/// run containing any overlap becomes one C segment extended across the
/// contiguous speech around it (silences shorter than `min_gap` do not break
/// contiguity).
pub fn form_segments_with_gap(
    activity: &SpeakerActivity,
    min_gap: usize,
) -> Result<Vec<Segment>> {
    if activity.num_speakers() != 2 {
        return Err(Error::UnsupportedConfig(format!(
            "segment formation handles exactly 2 speakers, got {}",
            activity.num_speakers()
        )));
    }
    let n = activity.num_frames();
    let voiced: Vec<bool> =
        (0..n).map(|t| activity.active(t, 0) || activity.active(t, 1)).collect();
    let both: Vec<bool> = (0..n).map(|t| activity.active(t, 0) && activity.active(t, 1)).collect();

    // maximal voiced runs
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut t = 0;
    while t < n {
        if voiced[t] {
            let start = t;
            while t < n && voiced[t] {
                t += 1;
            }
            runs.push((start, t));
        } else {
            t += 1;
        }
    }

    // merge runs across short silences into super-runs
    let mut super_runs: Vec<Vec<(usize, usize)>> = Vec::new();
    for run in runs {
        match super_runs.last_mut() {
            Some(group) if run.0 - group.last().expect("non-empty").1 < min_gap => {
                group.push(run)
            }
            _ => super_runs.push(vec![run]),
        }
    }

    let mut segments = Vec::new();
    for group in super_runs {
        let has_overlap = group.iter().any(|&(a, b)| both[a..b].iter().any(|&x| x));
        if has_overlap {
            segments.push(Segment {
                start: group[0].0,
                end: group.last().expect("non-empty").1,
                kind: SegmentKind::C,
            });
        } else {
            // split every voiced run into maximal constant-speaker stretches
            for &(a, b) in &group {
                let mut t = a;
                while t < b {
                    let spk = if activity.active(t, 0) { 0 } else { 1 };
                    let start = t;
                    while t < b && activity.active(t, spk) && !activity.active(t, 1 - spk) {
                        t += 1;
                    }
                    segments.push(Segment {
                        start,
                        end: t,
                        kind: if spk == 0 { SegmentKind::A } else { SegmentKind::B },
                    });
                }
            }
        }
    }
    Ok(segments)
}

pub fn form_segments(activity: &SpeakerActivity) -> Result<Vec<Segment>> {
    form_segments_with_gap(activity, SEGMENT_GAP_FRAMES)
}

// ---------------------------------------------------------------------------
// Overlap augmentation
// ---------------------------------------------------------------------------

/// A segment cut out of a conversation, with enough audio margin to compute
/// exactly `frames` feature frames.
#[derive(Clone, Debug)]
pub struct SegmentData {
    pub kind: SegmentKind,
    pub frames: usize,
    /// `frames * hop + (window - hop)` samples starting at `start * hop`.
    pub audio: Vec<f64>,
    pub activity: Mat,
    pub alignment: [Vec<usize>; 2],
}

pub fn extract_segment(conv: &Conversation, seg: &Segment, cfg: &FeatureConfig) -> SegmentData {
    let margin = cfg.window - cfg.hop;
    let s0 = seg.start * cfg.hop;
    let s1 = seg.end * cfg.hop + margin;
    SegmentData {
        kind: seg.kind,
        frames: seg.len(),
        audio: conv.audio.samples[s0..s1.min(conv.audio.len())].to_vec(),
        activity: conv
            .activity
            .matrix
            .slice(ndarray::s![seg.start..seg.end, ..])
            .to_owned(),
        alignment: [
            conv.alignments[0][seg.start..seg.end].to_vec(),
            conv.alignments[1][seg.start..seg.end].to_vec(),
        ],
    }
}

/// A synthetic overlapped training example built from an A and a B segment.
#[derive(Clone, Debug)]
pub struct AugmentedExample {
    pub frames: usize,
    pub audio: Vec<f64>,
    pub activity: Mat,
    /// Frames x 2 senone labels (0 = channel inactive).
    pub targets: Array2<usize>,
    pub overlap_u: f64,
    pub overlap_frames: usize,
}

/// Segments shorter than this are skipped by augmentation.
pub const MIN_AUGMENT_FRAMES: usize = 5;

/// Mix a type-A and a type-B segment so that the overlapped span is a
/// `u`-fraction of the shorter one. Returns None if either is too short.
pub fn augment_overlap_with_u(
    a: &SegmentData,
    b: &SegmentData,
    u: f64,
    hop: usize,
    margin: usize,
) -> Option<AugmentedExample> {
    assert_eq!(a.kind, SegmentKind::A, "first argument must be a type-A segment");
    assert_eq!(b.kind, SegmentKind::B, "second argument must be a type-B segment");
    if a.frames < MIN_AUGMENT_FRAMES || b.frames < MIN_AUGMENT_FRAMES {
        return None;
    }
    let overlap = ((u * a.frames.min(b.frames) as f64).round() as usize).max(1);
    let offset = a.frames - overlap;
    let frames = offset + b.frames;

    let total = frames * hop + margin;
    let mut audio = vec![0.0f64; total];
    for (i, &x) in a.audio.iter().enumerate() {
        audio[i] += x / 2.0;
    }
    let shift = offset * hop;
    for (i, &x) in b.audio.iter().enumerate() {
        audio[shift + i] += x / 2.0;
    }

    let mut activity = Mat::zeros((frames, 2));
    let mut targets = Array2::<usize>::zeros((frames, 2));
    for t in 0..a.frames {
        if a.activity[[t, 0]] > 0.5 {
            activity[[t, 0]] = 1.0;
            targets[[t, 0]] = a.alignment[0][t];
        }
    }
    for t in 0..b.frames {
        if b.activity[[t, 1]] > 0.5 {
            activity[[offset + t, 1]] = 1.0;
            targets[[offset + t, 1]] = b.alignment[1][t];
        }
    }
    Some(AugmentedExample {
        frames,
        audio,
        activity,
        targets,
        overlap_u: u,
        overlap_frames: overlap,
    })
}

/// Sample the overlap fraction uniformly from `range` and mix.
pub fn augment_overlap(
    a: &SegmentData,
    b: &SegmentData,
    range: (f64, f64),
    cfg: &FeatureConfig,
    rng: &mut ChaCha12Rng,
) -> Option<AugmentedExample> {
    let u = rng.random_range(range.0..range.1);
    augment_overlap_with_u(a, b, u, cfg.hop, cfg.window - cfg.hop)
}

// ---------------------------------------------------------------------------
// Senone targets
// ---------------------------------------------------------------------------

/// Frames x 2 senone labels; 0 means "channel inactive".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SenoneTargets {
    pub labels: Array2<usize>,
}

/// Per-frame two-channel training targets: each speaker's aligned senone
/// where they are active, 0 elsewhere.
pub fn build_senone_targets(conv: &Conversation) -> Result<SenoneTargets> {
    let n = conv.num_frames();
    for s in 0..2 {
        if conv.alignments[s].len() != n {
            return Err(Error::RejectedInput(format!(
                "{}: alignment for speaker {s} has {} frames, activity has {n}",
                conv.id,
                conv.alignments[s].len()
            )));
        }
    }
    let mut labels = Array2::<usize>::zeros((n, 2));
    for t in 0..n {
        for s in 0..2 {
            if conv.activity.active(t, s) {
                let senone = conv.alignments[s][t];
                if senone == 0 {
                    return Err(Error::RejectedInput(format!(
                        "{}: active frame {t} speaker {s} lacks an aligned senone",
                        conv.id
                    )));
                }
                labels[[t, s]] = senone;
            }
        }
    }
    Ok(SenoneTargets { labels })
}

// ---------------------------------------------------------------------------
// Speed perturbation
// ---------------------------------------------------------------------------

/// Resample by `factor` with linear interpolation; factor 1.0 is the
/// identity, factor 0.9 makes the audio longer (slower).
pub fn speed_perturb(w: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0) {
        return Err(Error::RejectedInput(format!("speed factor must be positive, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(w.clone());
    }
    let out_len = (w.len() as f64 / factor).round() as usize;
    let mut samples = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * factor;
        let i0 = (pos.floor() as usize).min(w.len() - 1);
        let frac = pos - i0 as f64;
        let x0 = w.samples[i0];
        let x1 = w.samples[(i0 + 1).min(w.len() - 1)];
        samples.push(x0 + frac * (x1 - x0));
    }
    Ok(Waveform { samples, sample_rate: w.sample_rate })
}

/// The standard two-way perturbation factors.
pub const SPEED_FACTORS: [f64; 2] = [0.9, 1.1];

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Sidecar {
    id: String,
    frame_shift: f64,
    num_frames: usize,
    /// Per speaker: run-length encoded binary activity as (value, length).
    activity_rle: [Vec<(u8, usize)>; 2],
    tokens: [Vec<TokenInstance>; 2],
    /// Per speaker: run-length encoded alignment as (senone, length).
    alignment_rle: [Vec<(usize, usize)>; 2],
    stats: MixtureStats,
}

pub(crate) fn rle<T: Copy + PartialEq>(xs: &[T]) -> Vec<(T, usize)> {
    let mut out: Vec<(T, usize)> = Vec::new();
    for &x in xs {
        match out.last_mut() {
            Some((v, len)) if *v == x => *len += 1,
            _ => out.push((x, 1)),
        }
    }
    out
}

pub(crate) fn unrle<T: Copy>(runs: &[(T, usize)]) -> Vec<T> {
    let mut out = Vec::new();
    for &(v, len) in runs {
        out.extend(std::iter::repeat_n(v, len));
    }
    out
}

/// Write a conversation as a stereo WAV (clean channels) plus a JSON sidecar.
pub fn save_conversation(dir: &Path, conv: &Conversation) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: conv.audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(dir.join(format!("{}.wav", conv.id)), spec)?;
    for i in 0..conv.channels[0].len() {
        for ch in &conv.channels {
            let v = (ch.samples[i].clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v)?;
        }
    }
    writer.finalize()?;

    let act = |s: usize| {
        rle(&(0..conv.num_frames())
            .map(|t| conv.activity.active(t, s) as u8)
            .collect::<Vec<_>>())
    };
    let sidecar = Sidecar {
        id: conv.id.clone(),
        frame_shift: conv.activity.frame_shift,
        num_frames: conv.num_frames(),
        activity_rle: [act(0), act(1)],
        tokens: conv.ref_tokens.clone(),
        alignment_rle: [rle(&conv.alignments[0]), rle(&conv.alignments[1])],
        stats: conv.stats,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(dir.join(format!("{}.json", conv.id)), json)?;
    Ok(())
}

/// Load one conversation saved by [`save_conversation`].
pub fn load_conversation(dir: &Path, id: &str) -> Result<Conversation> {
    let sidecar: Sidecar =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{id}.json")))?)?;
    let channels_raw = crate::features::read_wav(&dir.join(format!("{id}.wav")))?;
    if channels_raw.len() != 2 {
        return Err(Error::Data(format!("{id}.wav: expected 2 channels")));
    }
    let mut it = channels_raw.into_iter();
    let ch0 = it.next().expect("checked");
    let ch1 = it.next().expect("checked");
    let audio = mix_channels(&ch0, &ch1)?;

    let n = sidecar.num_frames;
    let mut matrix = Mat::zeros((n, 2));
    for s in 0..2 {
        let col = unrle(&sidecar.activity_rle[s]);
        if col.len() != n {
            return Err(Error::Data(format!("{id}: activity run-lengths do not sum to {n}")));
        }
        for (t, v) in col.iter().enumerate() {
            matrix[[t, s]] = *v as f64;
        }
    }
    let alignments = [unrle(&sidecar.alignment_rle[0]), unrle(&sidecar.alignment_rle[1])];
    for a in &alignments {
        if a.len() != n {
            return Err(Error::Data(format!("{id}: alignment run-lengths do not sum to {n}")));
        }
    }
    Ok(Conversation {
        id: sidecar.id,
        audio,
        channels: [ch0, ch1],
        activity: SpeakerActivity::new(matrix, sidecar.frame_shift),
        ref_tokens: sidecar.tokens,
        alignments,
        stats: sidecar.stats,
    })
}

/// Write the `corpus.json` manifest (generator spec, lexicon, conversation
/// ids, plus optional extra metadata) without the per-conversation files.
pub fn save_manifest(
    dir: &Path,
    spec: &ToyCorpusSpec,
    lex: &Lexicon,
    ids: &[String],
    extra: Option<serde_json::Value>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = serde_json::json!({
        "spec": spec,
        "lexicon": lex,
        "conversations": ids,
    });
    if let Some(extra) = extra {
        manifest["meta"] = extra;
    }
    std::fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Write the whole corpus: one WAV + JSON pair per conversation plus a
/// `corpus.json` manifest holding the generator spec and lexicon.
pub fn save_corpus(
    dir: &Path,
    spec: &ToyCorpusSpec,
    lex: &Lexicon,
    convs: &[Conversation],
) -> Result<()> {
    let ids: Vec<String> = convs.iter().map(|c| c.id.clone()).collect();
    save_manifest(dir, spec, lex, &ids, None)?;
    for conv in convs {
        save_conversation(dir, conv)?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<(ToyCorpusSpec, Lexicon, Vec<Conversation>)> {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("corpus.json"))?)?;
    let spec: ToyCorpusSpec = serde_json::from_value(manifest["spec"].clone())?;
    let lex: Lexicon = serde_json::from_value(manifest["lexicon"].clone())?;
    let ids: Vec<String> = serde_json::from_value(manifest["conversations"].clone())?;
    let mut convs = Vec::with_capacity(ids.len());
    for id in &ids {
        let conv = load_conversation(dir, id)?;
        conv.validate(&spec.feature)?;
        convs.push(conv);
    }
    Ok((spec, lex, convs))
}

/// Speaker activity in RTTM form (one SPEAKER line per run).
pub fn write_rttm_activity(
    out: &mut impl std::io::Write,
    id: &str,
    activity: &SpeakerActivity,
) -> Result<()> {
    let shift = activity.frame_shift;
    for s in 0..activity.num_speakers() {
        let col: Vec<u8> =
            (0..activity.num_frames()).map(|t| activity.active(t, s) as u8).collect();
        let mut t = 0;
        for (v, len) in rle(&col) {
            if v == 1 {
                writeln!(
                    out,
                    "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> spk{} <NA> <NA>",
                    id,
                    t as f64 * shift,
                    len as f64 * shift,
                    s
                )?;
            }
            t += len;
        }
    }
    Ok(())
}

/// Reference speaker activity of a conversation in RTTM form.
pub fn write_rttm(out: &mut impl std::io::Write, conv: &Conversation) -> Result<()> {
    write_rttm_activity(out, &conv.id, &conv.activity)
}
