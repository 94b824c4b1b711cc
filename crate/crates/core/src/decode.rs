//! Token decoding: a small Viterbi decoder over left-to-right senone chains
//! with a smoothed bigram prior, plus chunking and segment extraction.

use serde::{Deserialize, Serialize};

use crate::corpus::{Lexicon, SpeakerActivity, TokenInstance};
use crate::error::{Error, Result};
use crate::nn::Mat;

// ---------------------------------------------------------------------------
// Language model
// ---------------------------------------------------------------------------

/// Bigram token prior with add-k smoothing. Every conditional distribution
/// covers the whole vocabulary (no end symbol) and sums to one.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyLm {
    pub vocab_size: usize,
    pub add_k: f64,
    /// log P(token | start)
    log_start: Vec<f64>,
    /// log P(token | previous), indexed [previous][token]
    log_bigram: Vec<Vec<f64>>,
}

impl ToyLm {
    /// Estimate the prior from token-id sequences (one per speaker stream).
    pub fn train(sequences: &[Vec<usize>], vocab_size: usize, add_k: f64) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::RejectedInput("language model needs a vocabulary".into()));
        }
        if add_k <= 0.0 {
            return Err(Error::RejectedInput(format!(
                "add-k smoothing needs k > 0, got {add_k}"
            )));
        }
        let mut start = vec![0.0f64; vocab_size];
        let mut bigram = vec![vec![0.0f64; vocab_size]; vocab_size];
        for seq in sequences {
            for (i, &tok) in seq.iter().enumerate() {
                if tok >= vocab_size {
                    return Err(Error::RejectedInput(format!(
                        "token {tok} outside vocabulary of {vocab_size}"
                    )));
                }
                if i == 0 {
                    start[tok] += 1.0;
                } else {
                    bigram[seq[i - 1]][tok] += 1.0;
                }
            }
        }
        let normalize = |counts: &[f64]| -> Vec<f64> {
            let total: f64 = counts.iter().sum::<f64>() + add_k * vocab_size as f64;
            counts.iter().map(|&c| ((c + add_k) / total).ln()).collect()
        };
        let lm = ToyLm {
            vocab_size,
            add_k,
            log_start: normalize(&start),
            log_bigram: bigram.iter().map(|row| normalize(row)).collect(),
        };
        debug_assert!(lm.distributions_sum_to_one(1e-9));
        Ok(lm)
    }

    pub fn start_logp(&self, token: usize) -> f64 {
        self.log_start[token]
    }

    pub fn bigram_logp(&self, prev: usize, token: usize) -> f64 {
        self.log_bigram[prev][token]
    }

    pub fn sequence_logp(&self, seq: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, &tok) in seq.iter().enumerate() {
            total += if i == 0 { self.start_logp(tok) } else { self.bigram_logp(seq[i - 1], tok) };
        }
        total
    }

    pub fn distributions_sum_to_one(&self, tol: f64) -> bool {
        let ok = |row: &[f64]| (row.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() <= tol;
        ok(&self.log_start) && self.log_bigram.iter().all(|r| ok(r))
    }
}

// ---------------------------------------------------------------------------
// Chunking and segmentation
// ---------------------------------------------------------------------------

/// Half-open frame intervals of uniform `chunk_seconds` chunks (last may be
/// short). Concatenating the pieces reconstructs the input exactly.
pub fn chunk_bounds(num_frames: usize, frame_shift: f64, chunk_seconds: f64) -> Vec<(usize, usize)> {
    let per_chunk = ((chunk_seconds / frame_shift).round() as usize).max(1);
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < num_frames {
        let end = (start + per_chunk).min(num_frames);
        bounds.push((start, end));
        start = end;
    }
    if bounds.is_empty() {
        bounds.push((0, 0));
    }
    bounds
}

/// Split a posterior (or feature) matrix into uniform time chunks.
pub fn split_chunks(posteriors: &Mat, frame_shift: f64, chunk_seconds: f64) -> Vec<Mat> {
    chunk_bounds(posteriors.nrows(), frame_shift, chunk_seconds)
        .into_iter()
        .map(|(a, b)| posteriors.slice(ndarray::s![a..b, ..]).to_owned())
        .collect()
}

/// Maximal active runs per speaker, dropping runs shorter than `min_frames`.
pub fn activity_to_segments(
    activity: &SpeakerActivity,
    min_frames: usize,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if !activity.is_binary() {
        return Err(Error::RejectedInput("segmentation requires binary activity".into()));
    }
    let n = activity.num_frames();
    let mut out = Vec::with_capacity(activity.num_speakers());
    for s in 0..activity.num_speakers() {
        let mut runs = Vec::new();
        let mut t = 0;
        while t < n {
            if activity.active(t, s) {
                let start = t;
                while t < n && activity.active(t, s) {
                    t += 1;
                }
                if t - start >= min_frames {
                    runs.push((start, t));
                }
            } else {
                t += 1;
            }
        }
        out.push(runs);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Viterbi decoding
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub lm_weight: f64,
    /// Cost in nats charged per emitted token.
    pub insertion_penalty: f64,
    pub chunk_seconds: f64,
    /// Activity runs shorter than this are not decoded.
    pub min_segment_frames: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            lm_weight: 1.0,
            insertion_penalty: 0.5,
            chunk_seconds: 5.0,
            min_segment_frames: 5,
        }
    }
}

/// Elementwise log with a floor, for turning softmax outputs into scores.
pub fn log_posteriors(probs: &Mat) -> Mat {
    probs.mapv(|p| p.max(1e-300).ln())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SegmentDecode {
    pub tokens: Vec<TokenInstance>,
    pub score: f64,
}

/// Decoded transcript of one speaker channel: tokens with frame spans in
/// increasing, non-overlapping order, plus the summed path score.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SpeakerTranscript {
    pub tokens: Vec<TokenInstance>,
    pub score: f64,
}

/// Per-speaker transcripts for one conversation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenLattice {
    pub conversation_id: String,
    pub speakers: [SpeakerTranscript; 2],
}

impl TokenLattice {
    /// Spans must be non-overlapping and increasing per speaker.
    pub fn validate(&self) -> Result<()> {
        for (s, tr) in self.speakers.iter().enumerate() {
            let mut prev_end = 0;
            for tok in &tr.tokens {
                if tok.end_frame <= tok.start_frame || tok.start_frame < prev_end {
                    return Err(Error::Data(format!(
                        "speaker {s}: token span [{}, {}) out of order",
                        tok.start_frame, tok.end_frame
                    )));
                }
                prev_end = tok.end_frame;
            }
        }
        Ok(())
    }
}

/// Max-probability token sequence for one segment of log-posteriors.
///
/// The path score is the summed per-frame log-posterior of the occupied
/// senone state, plus `lm_weight` times the token sequence log-prior, minus
/// `insertion_penalty` per token. States advance left-to-right with
/// self-loops; exact ties prefer the lexicographically smaller token
/// sequence. An empty segment decodes to an empty sequence.
pub fn viterbi_decode(
    log_post: &Mat,
    lexicon: &Lexicon,
    lm: &ToyLm,
    cfg: &DecoderConfig,
) -> Result<SegmentDecode> {
    if lexicon.tokens.is_empty() {
        return Err(Error::RejectedInput("empty lexicon".into()));
    }
    if lm.vocab_size != lexicon.tokens.len() {
        return Err(Error::RejectedInput(format!(
            "language model covers {} tokens, lexicon has {}",
            lm.vocab_size,
            lexicon.tokens.len()
        )));
    }
    let max_state = lexicon.tokens.iter().flatten().copied().max().unwrap_or(0);
    if log_post.ncols() <= max_state {
        return Err(Error::RejectedInput(format!(
            "posteriors have {} classes, lexicon uses state {}",
            log_post.ncols(),
            max_state
        )));
    }
    let n = log_post.nrows();
    if n == 0 {
        return Ok(SegmentDecode::default());
    }

    // flat state space: (token, position in its chain)
    let mut state_token = Vec::new();
    let mut state_pos = Vec::new();
    let mut token_first = Vec::with_capacity(lexicon.tokens.len());
    let mut token_last = Vec::with_capacity(lexicon.tokens.len());
    for (t, chain) in lexicon.tokens.iter().enumerate() {
        token_first.push(state_token.len());
        for (j, _) in chain.iter().enumerate() {
            state_token.push(t);
            state_pos.push(j);
        }
        token_last.push(state_token.len() - 1);
    }
    let num_states = state_token.len();
    let senone = |k: usize| lexicon.tokens[state_token[k]][state_pos[k]];

    const NEG: f64 = f64::NEG_INFINITY;
    let mut delta = vec![vec![NEG; num_states]; n];
    // back[f][k]: predecessor state at frame f-1, or usize::MAX at a token
    // start (entered == token whose chain begins at frame f... tracked via
    // enter[f][k] = previous token id + 1, 0 meaning sequence start)
    let mut back = vec![vec![usize::MAX; num_states]; n];

    for t in 0..lexicon.tokens.len() {
        let k = token_first[t];
        delta[0][k] = cfg.lm_weight * lm.start_logp(t) - cfg.insertion_penalty
            + log_post[[0, senone(k)]];
    }
    for f in 1..n {
        for k in 0..num_states {
            let mut best = delta[f - 1][k]; // self-loop
            let mut from = if best > NEG { k } else { usize::MAX };
            if state_pos[k] > 0 {
                let prev = k - 1; // advance within the chain
                if delta[f - 1][prev] > best {
                    best = delta[f - 1][prev];
                    from = prev;
                }
            } else {
                // token start: enter from any completed token
                let t = state_token[k];
                for pt in 0..lexicon.tokens.len() {
                    let last = token_last[pt];
                    let cand = delta[f - 1][last]
                        + cfg.lm_weight * lm.bigram_logp(pt, t)
                        - cfg.insertion_penalty;
                    if cand > best {
                        best = cand;
                        from = last;
                    }
                }
            }
            if best > NEG {
                delta[f][k] = best + log_post[[f, senone(k)]];
                back[f][k] = from;
            }
        }
    }

    // best complete path must end on the last state of some token
    let mut end_state = usize::MAX;
    let mut end_score = NEG;
    for t in 0..lexicon.tokens.len() {
        let k = token_last[t];
        if delta[n - 1][k] > end_score {
            end_score = delta[n - 1][k];
            end_state = k;
        }
    }
    if end_state == usize::MAX {
        // no token chain fits the segment
        return Ok(SegmentDecode::default());
    }

    // trace states back, then collapse into token spans
    let mut path = vec![0usize; n];
    path[n - 1] = end_state;
    for f in (1..n).rev() {
        path[f - 1] = back[f][path[f]];
    }
    let mut tokens = Vec::new();
    let mut start = 0;
    for f in 1..=n {
        if f == n || state_token[path[f]] != state_token[path[f - 1]] || path[f] < path[f - 1] {
            tokens.push(TokenInstance {
                token: state_token[path[f - 1]],
                start_frame: start,
                end_frame: f,
            });
            start = f;
        }
    }
    Ok(SegmentDecode { tokens, score: end_score })
}

/// Decode a whole conversation: form per-speaker activity segments, split
/// them at uniform chunk boundaries, and run the Viterbi decoder on each
/// piece. `log_post[s]` holds the log-posteriors for speaker channel `s`.
pub fn decode_conversation(
    conversation_id: &str,
    log_post: &[Mat; 2],
    activity: &SpeakerActivity,
    lexicon: &Lexicon,
    lm: &ToyLm,
    cfg: &DecoderConfig,
) -> Result<TokenLattice> {
    let n = activity.num_frames();
    for (s, lp) in log_post.iter().enumerate() {
        if lp.nrows() != n {
            return Err(Error::RejectedInput(format!(
                "speaker {s}: {} posterior frames vs {} activity frames",
                lp.nrows(),
                n
            )));
        }
    }
    let segments = activity_to_segments(activity, cfg.min_segment_frames)?;
    let chunks = chunk_bounds(n, activity.frame_shift, cfg.chunk_seconds);
    let mut speakers: [SpeakerTranscript; 2] = Default::default();
    for s in 0..2 {
        for &(seg_a, seg_b) in &segments[s] {
            for &(ch_a, ch_b) in &chunks {
                let a = seg_a.max(ch_a);
                let b = seg_b.min(ch_b);
                if b <= a {
                    continue;
                }
                let piece = log_post[s].slice(ndarray::s![a..b, ..]).to_owned();
                let decoded = viterbi_decode(&piece, lexicon, lm, cfg)?;
                for tok in decoded.tokens {
                    speakers[s].tokens.push(TokenInstance {
                        token: tok.token,
                        start_frame: tok.start_frame + a,
                        end_frame: tok.end_frame + a,
                    });
                }
                speakers[s].score += decoded.score;
            }
        }
    }
    let lattice = TokenLattice { conversation_id: conversation_id.to_string(), speakers };
    lattice.validate()?;
    Ok(lattice)
}

/// trn-style text: one line per (conversation, speaker, chunk).
pub fn transcript_trn(lattice: &TokenLattice, num_frames: usize, frame_shift: f64, chunk_seconds: f64) -> String {
    let chunks = chunk_bounds(num_frames, frame_shift, chunk_seconds);
    let mut out = String::new();
    for (s, tr) in lattice.speakers.iter().enumerate() {
        for (ci, &(a, b)) in chunks.iter().enumerate() {
            let toks: Vec<String> = tr
                .tokens
                .iter()
                .filter(|t| t.start_frame >= a && t.start_frame < b)
                .map(|t| format!("tok{}", t.token))
                .collect();
            out.push_str(&format!(
                "{} spk{} chunk{} {}\n",
                lattice.conversation_id,
                s,
                ci,
                toks.join(" ")
            ));
        }
    }
    out
}
