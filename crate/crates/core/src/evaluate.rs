//! Scoring: diarization error rate with collar and overlap handling,
//! speaker-permutation resolution, common-silence chunking, per-speaker word
//! error rate, and the combined pipeline report.

use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, SpeakerActivity, TokenInstance};
use crate::error::{Error, Result};
use crate::nn::Mat;

// ---------------------------------------------------------------------------
// Diarization error rate
// ---------------------------------------------------------------------------

/// Diarization scoring result. Percentages are relative to scored reference
/// speech (speaker-seconds); `der_pct = miss + fa + spkerr` by construction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DerReport {
    pub miss_pct: f64,
    pub fa_pct: f64,
    pub spkerr_pct: f64,
    pub der_pct: f64,
    /// Scored reference speech in speaker-seconds (the DER denominator).
    pub scored_time: f64,
    pub overlap_included: bool,
}

/// Raw scored times, used to merge conversations before taking percentages.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct DerAccumulator {
    pub miss_time: f64,
    pub fa_time: f64,
    pub spkerr_time: f64,
    pub ref_time: f64,
}

impl DerAccumulator {
    pub fn add(&mut self, other: &DerAccumulator) {
        self.miss_time += other.miss_time;
        self.fa_time += other.fa_time;
        self.spkerr_time += other.spkerr_time;
        self.ref_time += other.ref_time;
    }

    pub fn report(&self, overlap_included: bool) -> Result<DerReport> {
        if self.ref_time <= 0.0 {
            if self.miss_time + self.fa_time + self.spkerr_time > 0.0 {
                return Err(Error::UndefinedValue(
                    "DER undefined: errors present but no scored reference speech".into(),
                ));
            }
            return Ok(DerReport {
                miss_pct: 0.0,
                fa_pct: 0.0,
                spkerr_pct: 0.0,
                der_pct: 0.0,
                scored_time: 0.0,
                overlap_included,
            });
        }
        let pct = |t: f64| 100.0 * t / self.ref_time;
        Ok(DerReport {
            miss_pct: pct(self.miss_time),
            fa_pct: pct(self.fa_time),
            spkerr_pct: pct(self.spkerr_time),
            der_pct: pct(self.miss_time + self.fa_time + self.spkerr_time),
            scored_time: self.ref_time,
            overlap_included,
        })
    }
}

/// Frames of a recording that survive collar and overlap exclusion.
fn scored_mask(reference: &SpeakerActivity, collar_frames: usize, include_overlap: bool) -> Vec<bool> {
    let n = reference.num_frames();
    let s = reference.num_speakers();
    let mut scored = vec![true; n];
    // exclude +/- collar around every reference activity boundary
    for spk in 0..s {
        let mut boundaries = Vec::new();
        for t in 0..=n {
            let prev = t > 0 && reference.active(t - 1, spk);
            let cur = t < n && reference.active(t, spk);
            if prev != cur {
                boundaries.push(t);
            }
        }
        for b in boundaries {
            let lo = b.saturating_sub(collar_frames);
            let hi = (b + collar_frames).min(n);
            for m in scored.iter_mut().take(hi).skip(lo) {
                *m = false;
            }
        }
    }
    if !include_overlap {
        for t in 0..n {
            let active = (0..s).filter(|&spk| reference.active(t, spk)).count();
            if active >= 2 {
                scored[t] = false;
            }
        }
    }
    scored
}

/// Accumulate NIST-style miss / false-alarm / speaker-error time for one
/// recording, searching all hypothesis-speaker mappings.
pub fn accumulate_der(
    reference: &SpeakerActivity,
    hypothesis: &SpeakerActivity,
    collar_secs: f64,
    include_overlap: bool,
) -> Result<DerAccumulator> {
    if (reference.frame_shift - hypothesis.frame_shift).abs() > 1e-12 {
        return Err(Error::RejectedInput(format!(
            "frame shift mismatch: reference {} vs hypothesis {}",
            reference.frame_shift, hypothesis.frame_shift
        )));
    }
    if reference.num_frames() != hypothesis.num_frames() {
        return Err(Error::RejectedInput(format!(
            "frame count mismatch: reference {} vs hypothesis {}",
            reference.num_frames(),
            hypothesis.num_frames()
        )));
    }
    if !reference.is_binary() || !hypothesis.is_binary() {
        return Err(Error::RejectedInput("DER requires binary activities".into()));
    }
    let shift = reference.frame_shift;
    let collar_frames = (collar_secs / shift).round() as usize;
    let scored = scored_mask(reference, collar_frames, include_overlap);

    let s_ref = reference.num_speakers();
    let s_hyp = hypothesis.num_speakers();
    let mappings = permutations(s_hyp);

    let mut best: Option<(f64, DerAccumulator)> = None;
    for mapping in &mappings {
        let mut acc = DerAccumulator::default();
        for t in 0..reference.num_frames() {
            if !scored[t] {
                continue;
            }
            let n_ref = (0..s_ref).filter(|&s| reference.active(t, s)).count();
            let n_hyp = (0..s_hyp).filter(|&s| hypothesis.active(t, s)).count();
            // hyp channel mapping[s] speaks for reference speaker s
            let n_correct = (0..s_ref.min(s_hyp))
                .filter(|&s| reference.active(t, s) && hypothesis.active(t, mapping[s]))
                .count();
            acc.ref_time += n_ref as f64 * shift;
            acc.miss_time += n_ref.saturating_sub(n_hyp) as f64 * shift;
            acc.fa_time += n_hyp.saturating_sub(n_ref) as f64 * shift;
            acc.spkerr_time += (n_ref.min(n_hyp) - n_correct.min(n_ref.min(n_hyp))) as f64 * shift;
        }
        let err = acc.miss_time + acc.fa_time + acc.spkerr_time;
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, acc));
        }
    }
    Ok(best.expect("at least the identity mapping").1)
}

/// DER for one recording with the NIST conventions: a collar around
/// reference boundaries is excluded, the error-minimizing speaker mapping is
/// used, and `include_overlap = false` drops overlapped reference regions.
pub fn compute_der(
    reference: &SpeakerActivity,
    hypothesis: &SpeakerActivity,
    collar_secs: f64,
    include_overlap: bool,
) -> Result<DerReport> {
    accumulate_der(reference, hypothesis, collar_secs, include_overlap)?.report(include_overlap)
}

/// All permutations of `0..s` in sorted order (identity first).
pub(crate) fn permutations(s: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..s).collect();
    fn heap(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..k {
            heap(items, k - 1, out);
            if k % 2 == 0 {
                items.swap(i, k - 1);
            } else {
                items.swap(0, k - 1);
            }
        }
    }
    heap(&mut items, s, &mut out);
    out.sort();
    out
}

// ---------------------------------------------------------------------------
// Permutation resolution for transcript scoring
// ---------------------------------------------------------------------------

fn pearson(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        // constant column: correlation undefined, treated as 0
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Map hypothesis speaker channels onto reference speakers by maximizing the
/// summed Pearson correlation of matched activity columns. Returns `m` such
/// that hypothesis column `m[s]` speaks for reference speaker `s`; ties break
/// toward the identity.
pub fn resolve_permutation(hypothesis: &Mat, reference: &Mat) -> Result<Vec<usize>> {
    if hypothesis.nrows() != reference.nrows() || hypothesis.ncols() != reference.ncols() {
        return Err(Error::RejectedInput(format!(
            "activity shapes differ: hypothesis {:?} vs reference {:?}",
            hypothesis.dim(),
            reference.dim()
        )));
    }
    let s = reference.ncols();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mapping in permutations(s) {
        let score: f64 = (0..s)
            .map(|r| pearson(reference.column(r), hypothesis.column(mapping[r])))
            .sum();
        // permutations() is sorted, so the identity comes first and wins ties
        if best.as_ref().map_or(true, |(b, _)| score > *b + 1e-12) {
            best = Some((score, mapping));
        }
    }
    Ok(best.expect("non-empty permutation set").1)
}

// ---------------------------------------------------------------------------
// Common-silence chunking
// ---------------------------------------------------------------------------

/// Runs of frames where no speaker is active, as half-open intervals.
pub fn silence_runs(activity: &SpeakerActivity) -> Vec<(usize, usize)> {
    let n = activity.num_frames();
    let mut runs = Vec::new();
    let mut t = 0;
    while t < n {
        let silent = (0..activity.num_speakers()).all(|s| !activity.active(t, s));
        if silent {
            let start = t;
            while t < n {
                let still = (0..activity.num_speakers()).all(|s| !activity.active(t, s));
                if !still {
                    break;
                }
                t += 1;
            }
            runs.push((start, t));
        } else {
            t += 1;
        }
    }
    runs
}

/// Split `[0, total_frames)` at the midpoints of silences common to the
/// reference and the hypothesis that last at least `min_gap` frames. With no
/// qualifying common silence the whole recording is a single chunk.
pub fn form_scoring_chunks(
    ref_silence: &[(usize, usize)],
    hyp_silence: &[(usize, usize)],
    min_gap: usize,
    total_frames: usize,
) -> Vec<(usize, usize)> {
    let mut cuts = Vec::new();
    for &(a0, a1) in ref_silence {
        for &(b0, b1) in hyp_silence {
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if hi > lo && hi - lo >= min_gap {
                cuts.push((lo + hi) / 2);
            }
        }
    }
    cuts.sort_unstable();
    cuts.dedup();
    cuts.retain(|&c| c > 0 && c < total_frames);

    let mut chunks = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for c in cuts {
        chunks.push((start, c));
        start = c;
    }
    chunks.push((start, total_frames));
    chunks
}

// ---------------------------------------------------------------------------
// Word error rate
// ---------------------------------------------------------------------------

/// Edit-operation counts for one reference/hypothesis pair (or their sum).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// WER percentage; `None` when the reference is empty (undefined).
    pub fn wer_pct(&self) -> Option<f64> {
        if self.ref_words == 0 {
            if self.errors() == 0 {
                Some(0.0)
            } else {
                None
            }
        } else {
            Some(100.0 * self.errors() as f64 / self.ref_words as f64)
        }
    }

    pub fn add(&mut self, other: &WerCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_words += other.ref_words;
    }
}

/// Levenshtein alignment with unit costs. Ties prefer substitution over an
/// insertion+deletion pair, then deletion over insertion, so counts are
/// deterministic.
pub fn compute_wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> WerCounts {
    let n = reference.len();
    let m = hypothesis.len();
    // dist[i][j]: edit distance between reference[..i] and hypothesis[..j]
    let mut dist = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dist[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dist[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dist[i - 1][j] + 1;
            let ins = dist[i][j - 1] + 1;
            dist[i][j] = sub.min(del).min(ins);
        }
    }
    // backtrace: prefer diagonal, then deletion, then insertion
    let mut counts = WerCounts { ref_words: n, ..WerCounts::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dist[i][j] == dist[i - 1][j - 1] + sub_cost {
                counts.substitutions += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[i][j] == dist[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Pipeline scoring
// ---------------------------------------------------------------------------

/// Hypothesis artifacts for one conversation.
#[derive(Clone, Debug)]
pub struct ConversationHypothesis {
    /// Binary diarization output, N x 2.
    pub activity: SpeakerActivity,
    /// Decoded tokens per hypothesis channel, with frame spans.
    pub tokens: [Vec<TokenInstance>; 2],
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub collar_secs: f64,
    pub include_overlap: bool,
    /// Minimum common-silence length (frames) that splits a scoring chunk.
    pub chunk_min_gap_frames: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { collar_secs: 0.25, include_overlap: true, chunk_min_gap_frames: 50 }
    }
}

/// Combined diarization + transcription report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoringReport {
    pub der: DerReport,
    pub per_speaker: Vec<WerCounts>,
    pub aggregate: WerCounts,
}

impl ScoringReport {
    pub fn aggregate_wer_pct(&self) -> Option<f64> {
        self.aggregate.wer_pct()
    }
}

/// Score a set of conversations: resolve each hypothesis's speaker
/// permutation by maximum correlation, split on common silences, align the
/// concatenated per-chunk token streams per speaker, and merge DER times
/// across conversations before taking percentages.
pub fn score_pipeline(
    pairs: &[(&Conversation, &ConversationHypothesis)],
    cfg: &ScoringConfig,
) -> Result<ScoringReport> {
    if pairs.is_empty() {
        return Err(Error::RejectedInput("nothing to score".into()));
    }
    let mut der_acc = DerAccumulator::default();
    let mut per_speaker = vec![WerCounts::default(); 2];

    let mut ordered: Vec<&(&Conversation, &ConversationHypothesis)> = pairs.iter().collect();
    ordered.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    for (conv, hyp) in ordered {
        let n = conv.num_frames();
        if hyp.activity.num_frames() != n {
            return Err(Error::RejectedInput(format!(
                "{}: hypothesis covers {} frames, reference {}",
                conv.id,
                hyp.activity.num_frames(),
                n
            )));
        }
        der_acc.add(&accumulate_der(
            &conv.activity,
            &hyp.activity,
            cfg.collar_secs,
            cfg.include_overlap,
        )?);

        let mapping = resolve_permutation(&hyp.activity.matrix, &conv.activity.matrix)?;
        let chunks = form_scoring_chunks(
            &silence_runs(&conv.activity),
            &silence_runs(&hyp.activity),
            cfg.chunk_min_gap_frames,
            n,
        );
        for s in 0..2 {
            let hyp_tokens = &hyp.tokens[mapping[s]];
            for &(c0, c1) in &chunks {
                let in_chunk = |t: &&TokenInstance| t.start_frame >= c0 && t.start_frame < c1;
                let ref_chunk: Vec<usize> =
                    conv.ref_tokens[s].iter().filter(in_chunk).map(|t| t.token).collect();
                let hyp_chunk: Vec<usize> =
                    hyp_tokens.iter().filter(in_chunk).map(|t| t.token).collect();
                per_speaker[s].add(&compute_wer(&ref_chunk, &hyp_chunk));
            }
        }
    }

    let mut aggregate = WerCounts::default();
    for c in &per_speaker {
        aggregate.add(c);
    }
    Ok(ScoringReport {
        der: der_acc.report(cfg.include_overlap)?,
        per_speaker,
        aggregate,
    })
}

// ---------------------------------------------------------------------------
// Report formatting
// ---------------------------------------------------------------------------

pub(crate) fn fmt_pct(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.1}"),
        None => "n/a".into(),
    }
}

/// CSV with one row per labelled DER report.
pub fn der_csv(rows: &[(String, DerReport)]) -> String {
    let mut out = String::from("system,overlap,miss_pct,fa_pct,spkerr_pct,der_pct,scored_time_s\n");
    for (label, r) in rows {
        out.push_str(&format!(
            "{label},{},{:.4},{:.4},{:.4},{:.4},{:.3}\n",
            if r.overlap_included { "with" } else { "without" },
            r.miss_pct,
            r.fa_pct,
            r.spkerr_pct,
            r.der_pct,
            r.scored_time
        ));
    }
    out
}

/// Aligned text table of DER reports (percentages to 1 decimal).
pub fn der_table(rows: &[(String, DerReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>8} {:>6} {:>6} {:>6} {:>6}\n",
        "system", "overlap", "Miss", "FA", "SE", "DER"
    ));
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<24} {:>8} {:>6} {:>6} {:>6} {:>6}\n",
            label,
            if r.overlap_included { "with" } else { "without" },
            fmt_pct(Some(r.miss_pct)),
            fmt_pct(Some(r.fa_pct)),
            fmt_pct(Some(r.spkerr_pct)),
            fmt_pct(Some(r.der_pct)),
        ));
    }
    out
}

/// CSV with one row per labelled WER report (per-speaker and aggregate).
pub fn wer_csv(rows: &[(String, ScoringReport)]) -> String {
    let mut out =
        String::from("system,speaker,substitutions,deletions,insertions,ref_words,wer_pct\n");
    for (label, r) in rows {
        for (s, c) in r.per_speaker.iter().enumerate() {
            out.push_str(&format!(
                "{label},spk{s},{},{},{},{},{}\n",
                c.substitutions,
                c.deletions,
                c.insertions,
                c.ref_words,
                fmt_pct(c.wer_pct())
            ));
        }
        let a = &r.aggregate;
        out.push_str(&format!(
            "{label},all,{},{},{},{},{}\n",
            a.substitutions,
            a.deletions,
            a.insertions,
            a.ref_words,
            fmt_pct(a.wer_pct())
        ));
    }
    out
}

/// Aligned text table of WER reports.
pub fn wer_table(rows: &[(String, ScoringReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>8} {:>8} {:>8} {:>6}\n",
        "system", "spk0", "spk1", "overall", "DER"
    ));
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<24} {:>8} {:>8} {:>8} {:>6}\n",
            label,
            fmt_pct(r.per_speaker[0].wer_pct()),
            fmt_pct(r.per_speaker[1].wer_pct()),
            fmt_pct(r.aggregate.wer_pct()),
            fmt_pct(Some(r.der.der_pct)),
        ));
    }
    out
}
