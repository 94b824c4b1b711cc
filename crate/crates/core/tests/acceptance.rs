//! Acceptance gate for the toolkit.
//!
//! Eleven checks cover the exact-oracle components (PIT loss, DER, WER,
//! Viterbi), gradient correctness of every trainable architecture,
//! full-scale tensor shapes, directional quality comparisons between the
//! conditioned models and the mixture baseline on a freshly trained toy
//! setup, and bit-reproducibility of a complete pipeline run.
//!
//! The suite runs without the libtest harness so that every criterion prints
//! exactly one verdict line, in order, and the heavyweight shared training
//! step runs exactly once. The process exits nonzero if any criterion fails.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crosstalk_core::acoustic::{
    embedding_cross_correlation, frame_accuracy, train_am, AcousticModel, AmConfig, AmExample,
    AmKind, AmTrainConfig, Conditioning,
};
use crosstalk_core::corpus::{
    augment_overlap, build_senone_targets, derive_seed, extract_segment, form_segments,
    synth_toy_corpus, Conversation, Lexicon, MixtureParams, SegmentKind, SpeakerActivity,
    ToyCorpusSpec, MIN_AUGMENT_FRAMES,
};
use crosstalk_core::decode::{
    decode_conversation, log_posteriors, viterbi_decode, DecoderConfig, ToyLm,
};
use crosstalk_core::diarization::{
    pit_bce_loss, train_diarizer, Diarizer, DiarizerConfig, DiarizerTrainConfig, DiarizerWindow,
};
use crosstalk_core::evaluate::{
    compute_der, compute_wer, score_pipeline, ConversationHypothesis, DerAccumulator, DerReport,
    ScoringConfig,
};
use crosstalk_core::experiment::{
    build_am_examples, cmd_plot, cmd_score, cmd_synth, cmd_train, cmd_transcribe, train_lm,
    ExperimentConfig, PlotKind, TrainStage,
};
use crosstalk_core::features::{compute_mfcc, FeatureConfig, Waveform};
use crosstalk_core::nn::Mat;
use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// Pinned tolerances and budgets
// ---------------------------------------------------------------------------

/// Criterion 1: random PIT instances and the time budget for all of them.
const PIT_INSTANCES: usize = 1_000;
const PIT_TIME_BUDGET_SECS: f64 = 5.0;

/// Criterion 2: random DER instances, frame count, field tolerance against
/// the brute force, and the additivity slack for miss + fa + spkerr = DER.
const DER_INSTANCES: usize = 500;
const DER_FRAMES: usize = 200;
const DER_TOL: f64 = 1e-9;
const DER_ADDITIVITY_TOL: f64 = 0.05;

/// Criterion 3: relative gradient tolerance and the minimum number of
/// sampled parameter entries per architecture.
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_MIN_SAMPLES: usize = 20;
const GRAD_FRAMES: usize = 30;

/// Criterion 4: frame count for the full-scale shape probes.
const SHAPE_FRAMES: usize = 25;

/// Criteria 5-7: directional quality requirements on the shared toy setup.
const TRAIN_BUDGET_SECS: f64 = 1_800.0;
const MIN_CORPUS_CONVERSATIONS: usize = 200;
const MIN_OVERLAP_PCT: f64 = 30.0;
const OVERLAP_ACC_MARGIN_PTS: f64 = 5.0;
const WER_ORDER_MIN_SEEDS: usize = 2;
const DIAR_WER_SLACK_PTS: f64 = 5.0;
const LOO_MIN_ACCURACY: f64 = 0.90;
const XCORR_LIMIT: f64 = 0.5;
const XCORR_MIN_FRACTION: f64 = 0.80;

/// Criterion 8: random decode instances and the score tolerance against
/// exhaustive path enumeration.
const VITERBI_INSTANCES: usize = 200;
const VITERBI_TOL: f64 = 1e-9;

/// Criterion 9: alphabet and maximum length for the exhaustive WER check.
const WER_ALPHABET: usize = 3;
const WER_MAX_LEN: usize = 8;

/// Criterion 10: draws and the Kolmogorov-Smirnov critical value at
/// significance 0.01 (1.62762 / sqrt(n) for large n).
const KS_DRAWS: usize = 1_000;
const KS_COEFF_AT_001: f64 = 1.62762;

fn main() {
    install_panic_capture();
    let mut gate = Gate::new();

    gate.check(1, "PIT loss equals exhaustive permutation enumeration", c01_pit_oracle);
    gate.check(2, "DER matches a frame-level brute force and stays additive", c02_der_oracle);
    gate.check(3, "training gradients match finite differences", c03_gradients);
    gate.check(4, "full-scale forward passes have the contracted shapes", c04_full_scale_shapes);

    let trained: Result<Trained, String> = if gate.selected(5) || gate.selected(6) || gate.selected(7) {
        println!("[setup] training shared toy models for criteria 5-7 (the long step)...");
        let t0 = Instant::now();
        let result = catch_unwind(build_trained)
            .map_err(|p| format!("shared training failed: {}", panic_text(p.as_ref())));
        println!("[setup] shared toy models ready in {:.0} s", t0.elapsed().as_secs_f64());
        result
    } else {
        Err("criteria 5-7 filtered out".into())
    };

    gate.check(5, "conditioned models beat the mixture baseline on overlap and WER order", || {
        c05_directional(trained.as_ref().map_err(String::clone).unwrap())
    });
    gate.check(6, "replacing oracle activity with the trained diarizer costs little WER", || {
        c06_diarizer_wer(trained.as_ref().map_err(String::clone).unwrap())
    });
    gate.check(7, "speaker embeddings separate the two speakers in overlap", || {
        c07_embeddings(trained.as_ref().map_err(String::clone).unwrap())
    });

    gate.check(8, "Viterbi decoding equals exhaustive path enumeration", c08_viterbi_oracle);
    gate.check(9, "WER counts equal brute-force edit distance on all short pairs", c09_wer_oracle);
    gate.check(10, "augmentation overlap ratios are uniform on [0.3, 0.7]", c10_overlap_uniformity);
    gate.check(11, "a same-seed rerun reproduces every artifact byte for byte", c11_determinism);

    gate.finish();
}

// ---------------------------------------------------------------------------
// Verdict plumbing
// ---------------------------------------------------------------------------

thread_local! {
    static LAST_PANIC: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Route panic reports into a thread-local so the verdict line can carry the
/// message (with location) instead of the default stderr dump.
fn install_panic_capture() {
    std::panic::set_hook(Box::new(|info| {
        LAST_PANIC.with(|c| *c.borrow_mut() = Some(info.to_string()));
    }));
}

fn panic_text(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

struct Gate {
    failures: Vec<usize>,
    /// Development aid: `ACCEPTANCE_ONLY=1,9` runs a subset. Unset (the
    /// normal case, and CI) runs everything.
    only: Option<Vec<usize>>,
}

impl Gate {
    fn new() -> Self {
        let only = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| {
            v.split(',').filter_map(|s| s.trim().parse().ok()).collect()
        });
        Gate { failures: Vec::new(), only }
    }

    fn selected(&self, num: usize) -> bool {
        self.only.as_ref().map_or(true, |o| o.contains(&num))
    }

    fn check<F: FnOnce()>(&mut self, num: usize, what: &str, f: F) {
        if !self.selected(num) {
            return;
        }
        LAST_PANIC.with(|c| *c.borrow_mut() = None);
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(()) => println!("[criterion {num:02}] PASS - {what}"),
            Err(payload) => {
                let detail = LAST_PANIC
                    .with(|c| c.borrow_mut().take())
                    .unwrap_or_else(|| panic_text(payload.as_ref()));
                println!("[criterion {num:02}] FAIL - {what}");
                println!("    {detail}");
                self.failures.push(num);
            }
        }
    }

    fn finish(self) {
        if self.failures.is_empty() {
            match self.only {
                None => println!("acceptance: all 11 criteria passed"),
                Some(o) => println!("acceptance: selected criteria passed ({o:?})"),
            }
        } else {
            println!("acceptance: {} criteria failed: {:?}", self.failures.len(), self.failures);
            std::process::exit(1);
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: PIT loss against exhaustive permutation enumeration
// ---------------------------------------------------------------------------

fn c01_pit_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(0x0AC1);
    let started = Instant::now();
    for _ in 0..PIT_INSTANCES {
        let n = rng.random_range(1..=10);
        let post = Mat::from_shape_fn((n, 2), |_| rng.random::<f64>());
        let labels = Mat::from_shape_fn((n, 2), |_| f64::from(rng.random_bool(0.5)));
        let (loss, perm) = pit_bce_loss(&post, &labels).unwrap();

        // independent column-pair BCE with the same clamp and summation order
        let bce = |p: ArrayView1<f64>, t: ArrayView1<f64>| -> f64 {
            let mut acc = 0.0;
            for (&p, &t) in p.iter().zip(t.iter()) {
                let p = p.clamp(1e-7, 1.0 - 1e-7);
                acc += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            }
            acc / n as f64
        };
        let mut pair = [[0.0f64; 2]; 2];
        for (p, row) in pair.iter_mut().enumerate() {
            for (l, cell) in row.iter_mut().enumerate() {
                *cell = bce(post.column(p), labels.column(l));
            }
        }
        let identity = (pair[0][0] + pair[1][1]) / 2.0;
        let swapped = (pair[1][0] + pair[0][1]) / 2.0;
        let expected = identity.min(swapped);
        assert_eq!(loss, expected, "PIT loss differs from the enumerated minimum");
        let perm_loss = (pair[perm[0]][0] + pair[perm[1]][1]) / 2.0;
        assert_eq!(perm_loss, expected, "returned permutation is not a minimizer");
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(
        secs < PIT_TIME_BUDGET_SECS,
        "{PIT_INSTANCES} PIT instances took {secs:.2} s (budget {PIT_TIME_BUDGET_SECS} s)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: DER against a frame-level brute force
// ---------------------------------------------------------------------------

/// Random two-speaker activity built from alternating runs, so that collars
/// around boundaries leave scored material behind.
fn random_activity(rng: &mut ChaCha12Rng, n: usize, shift: f64) -> SpeakerActivity {
    let mut m = Mat::zeros((n, 2));
    for s in 0..2 {
        let mut t = 0;
        let mut on = rng.random_bool(0.5);
        while t < n {
            let run = rng.random_range(5..40).min(n - t);
            if on {
                for f in t..t + run {
                    m[[f, s]] = 1.0;
                }
            }
            t += run;
            on = !on;
        }
    }
    SpeakerActivity::new(m, shift)
}

/// Frame-level replication of the scoring rules: collar exclusion around
/// reference boundaries, optional overlap exclusion, and the
/// error-minimizing channel mapping. Returns `None` where DER is undefined
/// (errors present but no scored reference speech).
fn brute_force_der(
    reference: &SpeakerActivity,
    hypothesis: &SpeakerActivity,
    collar_secs: f64,
    include_overlap: bool,
) -> Option<DerReport> {
    let n = reference.num_frames();
    let shift = reference.frame_shift;
    let collar = (collar_secs / shift).round() as usize;

    let mut scored = vec![true; n];
    for s in 0..2 {
        for t in 0..=n {
            let prev = t > 0 && reference.active(t - 1, s);
            let cur = t < n && reference.active(t, s);
            if prev != cur {
                let lo = t.saturating_sub(collar);
                let hi = (t + collar).min(n);
                for m in &mut scored[lo..hi] {
                    *m = false;
                }
            }
        }
    }
    if !include_overlap {
        for (t, m) in scored.iter_mut().enumerate() {
            if reference.active(t, 0) && reference.active(t, 1) {
                *m = false;
            }
        }
    }

    let mut best: Option<(f64, [f64; 4])> = None;
    for mapping in [[0usize, 1], [1, 0]] {
        let (mut miss, mut fa, mut se, mut reft) = (0.0, 0.0, 0.0, 0.0);
        for t in 0..n {
            if !scored[t] {
                continue;
            }
            let n_ref = usize::from(reference.active(t, 0)) + usize::from(reference.active(t, 1));
            let n_hyp =
                usize::from(hypothesis.active(t, 0)) + usize::from(hypothesis.active(t, 1));
            let n_correct = (0..2)
                .filter(|&s| reference.active(t, s) && hypothesis.active(t, mapping[s]))
                .count();
            reft += n_ref as f64 * shift;
            miss += n_ref.saturating_sub(n_hyp) as f64 * shift;
            fa += n_hyp.saturating_sub(n_ref) as f64 * shift;
            se += (n_ref.min(n_hyp) - n_correct.min(n_ref.min(n_hyp))) as f64 * shift;
        }
        let err = miss + fa + se;
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, [miss, fa, se, reft]));
        }
    }
    let (_, [miss, fa, se, reft]) = best.unwrap();
    if reft <= 0.0 {
        if miss + fa + se > 0.0 {
            return None;
        }
        return Some(DerReport {
            miss_pct: 0.0,
            fa_pct: 0.0,
            spkerr_pct: 0.0,
            der_pct: 0.0,
            scored_time: 0.0,
            overlap_included: include_overlap,
        });
    }
    Some(DerReport {
        miss_pct: 100.0 * miss / reft,
        fa_pct: 100.0 * fa / reft,
        spkerr_pct: 100.0 * se / reft,
        der_pct: 100.0 * (miss + fa + se) / reft,
        scored_time: reft,
        overlap_included: include_overlap,
    })
}

fn assert_additive(r: &DerReport) {
    assert!(
        (r.miss_pct + r.fa_pct + r.spkerr_pct - r.der_pct).abs() <= DER_ADDITIVITY_TOL,
        "components {} + {} + {} do not add up to DER {}",
        r.miss_pct,
        r.fa_pct,
        r.spkerr_pct,
        r.der_pct
    );
}

fn c02_der_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(0x0AC2);
    let shift = 0.01;
    for i in 0..DER_INSTANCES {
        let reference = random_activity(&mut rng, DER_FRAMES, shift);
        let hypothesis = random_activity(&mut rng, DER_FRAMES, shift);
        let collar = [0.0, 0.05, 0.1][i % 3];
        let include_overlap = i % 2 == 0;

        let got = compute_der(&reference, &hypothesis, collar, include_overlap);
        let want = brute_force_der(&reference, &hypothesis, collar, include_overlap);
        match (got, want) {
            (Ok(g), Some(w)) => {
                assert!(
                    (g.miss_pct - w.miss_pct).abs() <= DER_TOL
                        && (g.fa_pct - w.fa_pct).abs() <= DER_TOL
                        && (g.spkerr_pct - w.spkerr_pct).abs() <= DER_TOL
                        && (g.der_pct - w.der_pct).abs() <= DER_TOL,
                    "instance {i}: {g:?} vs brute force {w:?}"
                );
                assert_additive(&g);
            }
            (Err(_), None) => {} // both sides agree DER is undefined
            (g, w) => panic!("instance {i}: definedness mismatch: {g:?} vs {w:?}"),
        }
    }

    // A representative full-scale operating point for this kind of system
    // must stay additive once routed through the report type.
    let point = DerAccumulator {
        miss_time: 13.3,
        fa_time: 2.4,
        spkerr_time: 1.7,
        ref_time: 100.0,
    };
    let report = point.report(true).unwrap();
    assert!((report.der_pct - 17.42).abs() <= DER_ADDITIVITY_TOL);
    assert_additive(&report);
}

// ---------------------------------------------------------------------------
// Criterion 3: analytic gradients against finite differences
// ---------------------------------------------------------------------------

fn c03_gradients() {
    let am_cfg = AmConfig {
        input_dim: 20,
        tdnn_dim: 12,
        tdnn_context: 3,
        embedding_dim: 8,
        blstm_units: 10,
        main_blstm_layers: 2,
        gfam_pre_layers: 1,
        gfam_post_layers: 1,
        num_senones: 9,
        train_inactive_as_class0: true,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(0x0AC3);
    let example = AmExample {
        features: Mat::from_shape_fn((GRAD_FRAMES, 20), |_| rng.random::<f64>() * 2.0 - 1.0),
        activity: (0..GRAD_FRAMES).map(|_| f64::from(rng.random_bool(0.6))).collect(),
        labels: (0..GRAD_FRAMES).map(|_| rng.random_range(0..9)).collect(),
    };
    let active = example.activity.iter().sum::<f64>();
    assert!(active > 0.0 && active < GRAD_FRAMES as f64, "need a mixed activity pattern");

    // ICAM exercises the weighted-average-pooling path, GFAM the sigmoid
    // gating path; both are trained through the same loss graph.
    for kind in [AmKind::Icam, AmKind::Gfam] {
        let report = crosstalk_core::acoustic::verify_training_gradients(
            kind,
            &am_cfg,
            &example,
            2,
            GRAD_REL_TOL,
            0x0AC3 + kind as u64,
        )
        .unwrap();
        assert!(
            report.checked >= GRAD_MIN_SAMPLES,
            "{}: only {} entries sampled",
            kind.label(),
            report.checked
        );
        assert!(report.max_rel_err <= GRAD_REL_TOL, "{}: {}", kind.label(), report.worst);
    }

    let d_cfg = DiarizerConfig {
        input_dim: 20,
        encoder_blocks: 1,
        model_dim: 16,
        attention_heads: 2,
        feedforward_dim: 32,
        attractor_hidden_dim: 16,
        ..DiarizerConfig::default()
    };
    let window = DiarizerWindow {
        features: Mat::from_shape_fn((GRAD_FRAMES, 20), |_| rng.random::<f64>() * 2.0 - 1.0),
        labels: Mat::from_shape_fn((GRAD_FRAMES, 2), |_| f64::from(rng.random_bool(0.5))),
    };
    let report = crosstalk_core::diarization::verify_training_gradients(
        &d_cfg,
        &window,
        0.3,
        2,
        GRAD_REL_TOL,
        0x0AC3,
    )
    .unwrap();
    assert!(report.checked >= GRAD_MIN_SAMPLES, "diarizer: only {} sampled", report.checked);
    assert!(report.max_rel_err <= GRAD_REL_TOL, "diarizer: {}", report.worst);
}

// ---------------------------------------------------------------------------
// Criterion 4: full-scale forward shapes
// ---------------------------------------------------------------------------

fn c04_full_scale_shapes() {
    let cfg = AmConfig {
        input_dim: 200,
        tdnn_dim: 64,
        tdnn_context: 3,
        embedding_dim: 100,
        blstm_units: 512,
        main_blstm_layers: 6,
        gfam_pre_layers: 2,
        gfam_post_layers: 4,
        num_senones: 8776,
        train_inactive_as_class0: true,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(0x0AC4);
    let x = Mat::from_shape_fn((SHAPE_FRAMES, 200), |_| rng.random::<f64>() * 2.0 - 1.0);
    let activity: Vec<f64> =
        (0..SHAPE_FRAMES).map(|t| f64::from(t % 3 != 0)).collect();

    // Built and dropped one at a time: each model holds tens of millions of
    // f64 parameters at this scale.
    {
        let icam = AcousticModel::new(AmKind::Icam, cfg, 0x0AC4).unwrap();
        let s = icam.forward_shapes(&x, &Conditioning::Activity(&activity)).unwrap();
        assert_eq!(s.concat_input, (SHAPE_FRAMES, 300), "ICAM concatenated input");
        assert_eq!(s.hidden, (SHAPE_FRAMES, 1024), "ICAM BLSTM output");
        assert_eq!(s.mask, None, "ICAM has no gating path");
        assert_eq!(s.posteriors, (SHAPE_FRAMES, 8776), "ICAM posteriors");
    }
    {
        let gfam = AcousticModel::new(AmKind::Gfam, cfg, 0x0AC5).unwrap();
        let s = gfam.forward_shapes(&x, &Conditioning::Activity(&activity)).unwrap();
        assert_eq!(s.hidden, (SHAPE_FRAMES, 1024), "GFAM hidden states H");
        assert_eq!(s.mask, Some((SHAPE_FRAMES, 1024)), "GFAM gate mask M");
        assert_eq!(s.posteriors, (SHAPE_FRAMES, 8776), "GFAM posteriors");
    }
}

// ---------------------------------------------------------------------------
// Shared toy training for criteria 5-7
// ---------------------------------------------------------------------------

const EVAL_CONVERSATIONS: usize = 30;
const TOY_SEEDS: [u64; 3] = [4242, 4243, 4244];
const AM_SEED_TAG: u64 = 100;
const DIAR_SEED_TAG: u64 = 200;
const KINDS: [AmKind; 3] = [AmKind::Icam, AmKind::Gfam, AmKind::BlstmMix];

fn toy_corpus_spec() -> ToyCorpusSpec {
    ToyCorpusSpec {
        num_conversations: 200,
        num_senones: 24,
        vocab_size: 10,
        utterances_per_conversation: (7, 9),
        tokens_per_utterance: (1, 2),
        state_duration_frames: (5, 8),
        mixture: MixtureParams {
            gap_mean_secs: 0.3,
            overlap_prob: 0.7,
            overlap_range: (0.5, 0.8),
            same_speaker_repeat_prob: 0.05,
        },
        feature: FeatureConfig { num_mels: 24, num_ceps: 16, ..FeatureConfig::default() },
        ..ToyCorpusSpec::default()
    }
}

fn toy_config(seed: u64, kind: AmKind) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        output_dir: "unused".into(),
        eval_conversations: EVAL_CONVERSATIONS,
        am_kind: kind,
        lm_add_k: 1.0,
        augment_per_conversation: 1,
        corpus: toy_corpus_spec(),
        diarizer: DiarizerConfig {
            input_dim: 80,
            encoder_blocks: 2,
            model_dim: 32,
            attention_heads: 4,
            feedforward_dim: 64,
            attractor_hidden_dim: 32,
            subsample: 4,
            median_window: 5,
            ..DiarizerConfig::default()
        },
        diarizer_train: DiarizerTrainConfig {
            epochs: 8,
            learning_rate: 1e-3,
            window_frames: 100,
            min_window_frames: 20,
            ..DiarizerTrainConfig::default()
        },
        am: AmConfig {
            input_dim: 80,
            tdnn_dim: 24,
            tdnn_context: 3,
            embedding_dim: 100,
            blstm_units: 24,
            main_blstm_layers: 2,
            gfam_pre_layers: 1,
            gfam_post_layers: 1,
            num_senones: 24,
            train_inactive_as_class0: true,
        },
        am_train: AmTrainConfig { epochs: 3, learning_rate: 1e-3 },
        decoder: DecoderConfig::default(),
        scoring: ScoringConfig::default(),
    }
}

struct SeedRun {
    lexicon: Lexicon,
    train: Vec<Conversation>,
    eval: Vec<Conversation>,
}

struct Trained {
    /// (total frames, voiced frames, overlapped frames) per seed corpus.
    corpus_stats: [(usize, usize, usize); 3],
    /// Pooled overlapped-frame senone accuracy, seed 0 eval split.
    overlap_acc_icam: f64,
    overlap_acc_mix: f64,
    /// Oracle-activity WER (percent) indexed [seed][kind in KINDS order].
    gts_wer: [[f64; 3]; 3],
    /// ICAM on seed 0 with oracle activity vs the trained diarizer.
    icam_wer_gts: f64,
    icam_wer_diar: f64,
    /// Embedding checks on seed 0: nearest-neighbor accuracy over overlap
    /// segments of the best held-out conversation, the silence behavior, and
    /// per-conversation mean-embedding cross-correlations.
    loo_points: usize,
    loo_accuracy: f64,
    silence_is_zero: bool,
    xcorr_below_limit: usize,
    xcorr_total: usize,
    build_secs: f64,
}

fn synth_seed(seed: u64) -> SeedRun {
    let (lexicon, mut convs) = synth_toy_corpus(&toy_corpus_spec(), seed).unwrap();
    let eval = convs.split_off(convs.len() - EVAL_CONVERSATIONS);
    SeedRun { lexicon, train: convs, eval }
}

/// Decode the eval split with the given model; oracle activity when
/// `diarizer` is `None`, otherwise the diarizer's estimate.
fn transcribe_eval(
    cfg: &ExperimentConfig,
    model: &AcousticModel,
    diarizer: Option<&Diarizer>,
    run: &SeedRun,
) -> Vec<ConversationHypothesis> {
    let lm = train_lm(&run.train, &run.lexicon, cfg.lm_add_k).unwrap();
    let feat = &cfg.corpus.feature;
    run.eval
        .par_iter()
        .map(|conv| {
            let x = compute_mfcc(&conv.audio, feat).unwrap().stacked().clone();
            let activity = match diarizer {
                None => conv.activity.clone(),
                Some(d) => d.forward(&x, feat.frame_shift_secs()).unwrap().binary_activity,
            };
            let mut logs: Vec<Mat> = Vec::with_capacity(2);
            for s in 0..2 {
                let col = activity.matrix.column(s).to_vec();
                let post = model.posteriors(&x, &Conditioning::Activity(&col)).unwrap();
                logs.push(log_posteriors(&post));
            }
            let logs: [Mat; 2] = [logs.remove(0), logs.remove(0)];
            let lattice =
                decode_conversation(&conv.id, &logs, &activity, &run.lexicon, &lm, &cfg.decoder)
                    .unwrap();
            ConversationHypothesis {
                activity,
                tokens: [
                    lattice.speakers[0].tokens.clone(),
                    lattice.speakers[1].tokens.clone(),
                ],
            }
        })
        .collect()
}

fn eval_wer_pct(cfg: &ExperimentConfig, run: &SeedRun, hyps: &[ConversationHypothesis]) -> f64 {
    let pairs: Vec<(&Conversation, &ConversationHypothesis)> =
        run.eval.iter().zip(hyps.iter()).collect();
    let report = score_pipeline(&pairs, &cfg.scoring).unwrap();
    report.aggregate_wer_pct().expect("eval references are never empty")
}

/// Pooled senone accuracy restricted to frames where both speakers talk.
fn overlapped_accuracy(cfg: &ExperimentConfig, model: &AcousticModel, run: &SeedRun) -> f64 {
    let feat = &cfg.corpus.feature;
    let per_channel: Vec<(f64, usize)> = run
        .eval
        .par_iter()
        .flat_map(|conv| {
            let x = compute_mfcc(&conv.audio, feat).unwrap().stacked().clone();
            let targets = build_senone_targets(conv).unwrap();
            let overlapped: Vec<bool> = (0..conv.num_frames())
                .map(|t| conv.activity.active(t, 0) && conv.activity.active(t, 1))
                .collect();
            let n_over = overlapped.iter().filter(|&&b| b).count();
            let mut out = Vec::new();
            if n_over > 0 {
                for s in 0..2 {
                    let col = conv.activity.matrix.column(s).to_vec();
                    let post = model.posteriors(&x, &Conditioning::Activity(&col)).unwrap();
                    let labels: Vec<usize> = targets.labels.column(s).to_vec();
                    out.push((frame_accuracy(&post, &labels, Some(&overlapped)), n_over));
                }
            }
            out
        })
        .collect();
    let total: usize = per_channel.iter().map(|&(_, n)| n).sum();
    let hits: f64 = per_channel.iter().map(|&(acc, n)| acc * n as f64).sum();
    100.0 * hits / total as f64
}

/// Embedding of one segment channel, or `None` for an all-silent channel.
fn segment_embedding(
    model: &AcousticModel,
    conv: &Conversation,
    seg: &crosstalk_core::corpus::Segment,
    feat: &FeatureConfig,
    speaker: usize,
) -> Option<Vec<f64>> {
    let data = extract_segment(conv, seg, feat);
    let wave = Waveform::new(data.audio, feat.sample_rate).unwrap();
    let fs = compute_mfcc(&wave, feat).unwrap();
    let x = fs.stacked().slice(ndarray::s![..data.frames, ..]).to_owned();
    let act: Vec<f64> = data.activity.column(speaker).to_vec();
    let emb = model.speaker_embedding(&x, &act).unwrap();
    if emb.is_silence() {
        None
    } else {
        Some(emb.vector)
    }
}

fn build_trained() -> Trained {
    let started = Instant::now();
    let runs: Vec<SeedRun> = TOY_SEEDS.par_iter().map(|&s| synth_seed(s)).collect();

    let mut corpus_stats = [(0usize, 0usize, 0usize); 3];
    for (si, run) in runs.iter().enumerate() {
        for conv in run.train.iter().chain(&run.eval) {
            corpus_stats[si].0 += conv.num_frames();
            corpus_stats[si].1 += conv.activity.voiced_frames();
            corpus_stats[si].2 += conv.activity.overlapped_frames();
        }
    }

    // Nine acoustic models (three kinds x three seeds) plus one diarizer for
    // seed 0, all independently seeded so the parallelism cannot change any
    // result.
    let mut tasks: Vec<(usize, AmKind)> = Vec::new();
    for si in 0..TOY_SEEDS.len() {
        for &k in &KINDS {
            tasks.push((si, k));
        }
    }
    let diar_handle = std::thread::spawn({
        let train0 = runs[0].train.clone();
        move || {
            let cfg = toy_config(TOY_SEEDS[0], AmKind::Icam);
            train_diarizer(
                &train0,
                &cfg.corpus.feature,
                &cfg.diarizer,
                &cfg.diarizer_train,
                derive_seed(cfg.seed, DIAR_SEED_TAG),
                None,
            )
            .unwrap()
            .0
        }
    });
    let models: Vec<((usize, AmKind), AcousticModel)> = tasks
        .par_iter()
        .map(|&(si, kind)| {
            let cfg = toy_config(TOY_SEEDS[si], kind);
            let examples = build_am_examples(&cfg, &runs[si].train).unwrap();
            let (model, _) = train_am(
                &examples,
                kind,
                &cfg.am,
                &cfg.am_train,
                derive_seed(cfg.seed, AM_SEED_TAG + kind as u64),
                None,
            )
            .unwrap();
            ((si, kind), model)
        })
        .collect();
    let diarizer = diar_handle.join().expect("diarizer training thread");
    let model = |si: usize, kind: AmKind| -> &AcousticModel {
        &models.iter().find(|((s, k), _)| *s == si && *k == kind).unwrap().1
    };

    let cfg0 = toy_config(TOY_SEEDS[0], AmKind::Icam);
    let overlap_acc_icam = overlapped_accuracy(&cfg0, model(0, AmKind::Icam), &runs[0]);
    let overlap_acc_mix = overlapped_accuracy(&cfg0, model(0, AmKind::BlstmMix), &runs[0]);

    let mut gts_wer = [[0.0f64; 3]; 3];
    for si in 0..TOY_SEEDS.len() {
        for (ki, &kind) in KINDS.iter().enumerate() {
            let cfg = toy_config(TOY_SEEDS[si], kind);
            let hyps = transcribe_eval(&cfg, model(si, kind), None, &runs[si]);
            gts_wer[si][ki] = eval_wer_pct(&cfg, &runs[si], &hyps);
        }
    }

    let hyps_diar = transcribe_eval(&cfg0, model(0, AmKind::Icam), Some(&diarizer), &runs[0]);
    let icam_wer_diar = eval_wer_pct(&cfg0, &runs[0], &hyps_diar);
    let icam_wer_gts = gts_wer[0][0];

    // Embedding probes use the seed-0 ICAM model on its eval split.
    let feat = &cfg0.corpus.feature;
    let icam = model(0, AmKind::Icam);

    // Nearest-neighbor test on the eval conversation with the most
    // overlap-bearing segments.
    let overlap_segments = |conv: &Conversation| -> Vec<crosstalk_core::corpus::Segment> {
        form_segments(&conv.activity)
            .unwrap()
            .into_iter()
            .filter(|s| s.kind == SegmentKind::C && s.len() >= MIN_AUGMENT_FRAMES)
            .collect()
    };
    let held_out = runs[0]
        .eval
        .iter()
        .max_by_key(|conv| overlap_segments(conv).len())
        .expect("nonempty eval split");
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for seg in overlap_segments(held_out) {
        for s in 0..2 {
            if let Some(v) = segment_embedding(icam, held_out, &seg, feat, s) {
                points.push(v);
                labels.push(s);
            }
        }
    }
    let mut hits = 0usize;
    for i in 0..points.len() {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..points.len() {
            if j == i {
                continue;
            }
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        hits += usize::from(best.1 != usize::MAX && labels[best.1] == labels[i]);
    }
    let loo_points = points.len();
    let loo_accuracy = if loo_points == 0 { 0.0 } else { hits as f64 / loo_points as f64 };

    // Pooling over an all-silent channel must give the zero embedding.
    let x0 = compute_mfcc(&held_out.audio, feat).unwrap().stacked().clone();
    let silence = icam.speaker_embedding(&x0, &vec![0.0; x0.nrows()]).unwrap();
    let silence_is_zero = silence.is_silence();

    // Cross-correlation of the two speakers' mean embeddings, one pair per
    // eval conversation.
    let mut xcorr_below_limit = 0usize;
    let mut xcorr_total = 0usize;
    for conv in &runs[0].eval {
        let mut sums = [vec![0.0f64; 100], vec![0.0f64; 100]];
        let mut counts = [0usize; 2];
        for seg in form_segments(&conv.activity).unwrap() {
            if seg.len() < MIN_AUGMENT_FRAMES {
                continue;
            }
            for &s in seg.speakers() {
                if let Some(v) = segment_embedding(icam, conv, &seg, feat, s) {
                    for (acc, x) in sums[s].iter_mut().zip(&v) {
                        *acc += x;
                    }
                    counts[s] += 1;
                }
            }
        }
        if counts[0] == 0 || counts[1] == 0 {
            continue;
        }
        let m0: Vec<f64> = sums[0].iter().map(|v| v / counts[0] as f64).collect();
        let m1: Vec<f64> = sums[1].iter().map(|v| v / counts[1] as f64).collect();
        let c = embedding_cross_correlation(&m0, &m1).unwrap();
        xcorr_total += 1;
        xcorr_below_limit += usize::from(c.abs() < XCORR_LIMIT);
    }

    Trained {
        corpus_stats,
        overlap_acc_icam,
        overlap_acc_mix,
        gts_wer,
        icam_wer_gts,
        icam_wer_diar,
        loo_points,
        loo_accuracy,
        silence_is_zero,
        xcorr_below_limit,
        xcorr_total,
        build_secs: started.elapsed().as_secs_f64(),
    }
}

// ---------------------------------------------------------------------------
// Criteria 5-7: directional checks on the shared toy setup
// ---------------------------------------------------------------------------

fn c05_directional(t: &Trained) {
    assert!(
        t.build_secs < TRAIN_BUDGET_SECS,
        "shared training took {:.0} s (budget {TRAIN_BUDGET_SECS} s)",
        t.build_secs
    );
    let spec = toy_corpus_spec();
    assert!(spec.num_conversations >= MIN_CORPUS_CONVERSATIONS);
    for (si, &(_, voiced, overlapped)) in t.corpus_stats.iter().enumerate() {
        let pct = 100.0 * overlapped as f64 / voiced as f64;
        assert!(
            pct >= MIN_OVERLAP_PCT,
            "seed {si}: only {pct:.1}% of voiced frames are overlapped"
        );
    }

    assert!(
        t.overlap_acc_icam >= t.overlap_acc_mix + OVERLAP_ACC_MARGIN_PTS,
        "overlapped senone accuracy: ICAM {:.1} vs mixture baseline {:.1} (need +{} pts)",
        t.overlap_acc_icam,
        t.overlap_acc_mix,
        OVERLAP_ACC_MARGIN_PTS
    );

    let mut ordered = 0usize;
    for wer in &t.gts_wer {
        let (icam, gfam, mix) = (wer[0], wer[1], wer[2]);
        if icam <= gfam && gfam < mix {
            ordered += 1;
        }
    }
    assert!(
        ordered >= WER_ORDER_MIN_SEEDS,
        "WER order ICAM <= GFAM < mixture holds on {ordered}/3 seeds: {:?}",
        t.gts_wer
    );
}

fn c06_diarizer_wer(t: &Trained) {
    assert!(
        t.icam_wer_diar - t.icam_wer_gts <= DIAR_WER_SLACK_PTS,
        "diarizer-driven WER {:.2} vs oracle-activity WER {:.2} exceeds {} pts",
        t.icam_wer_diar,
        t.icam_wer_gts,
        DIAR_WER_SLACK_PTS
    );
}

fn c07_embeddings(t: &Trained) {
    assert!(t.silence_is_zero, "an all-silent channel must embed to the zero vector");
    assert!(t.loo_points >= 6, "only {} overlap embedding points to test", t.loo_points);
    assert!(
        t.loo_accuracy >= LOO_MIN_ACCURACY,
        "leave-one-out nearest neighbor {:.1}% over {} points",
        100.0 * t.loo_accuracy,
        t.loo_points
    );
    let needed = (XCORR_MIN_FRACTION * t.xcorr_total as f64).ceil() as usize;
    assert!(
        t.xcorr_total > 0 && t.xcorr_below_limit >= needed,
        "mean-embedding cross-correlation below {XCORR_LIMIT} on {}/{} conversations",
        t.xcorr_below_limit,
        t.xcorr_total
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: Viterbi against exhaustive path enumeration
// ---------------------------------------------------------------------------

/// Best achievable score for a fixed token sequence, with the same additive
/// expressions as the decoder so scores agree to the last bit where paths
/// coincide.
fn align_score(
    seq: &[usize],
    log_post: &Mat,
    lexicon: &Lexicon,
    lm: &ToyLm,
    cfg: &DecoderConfig,
) -> Option<f64> {
    let n = log_post.nrows();
    // concatenated chain states; entry[k] is Some(token index in seq) where
    // state k starts a new token
    let mut senones = Vec::new();
    let mut entry = Vec::new();
    for (i, &tok) in seq.iter().enumerate() {
        for (j, &s) in lexicon.tokens[tok].iter().enumerate() {
            senones.push(s);
            entry.push((j == 0).then_some(i));
        }
    }
    let m = senones.len();
    if m > n {
        return None;
    }
    const NEG: f64 = f64::NEG_INFINITY;
    let mut delta = vec![NEG; m];
    delta[0] = cfg.lm_weight * lm.start_logp(seq[0]) - cfg.insertion_penalty
        + log_post[[0, senones[0]]];
    for f in 1..n {
        let mut next = vec![NEG; m];
        for k in 0..m {
            let mut best = delta[k];
            if k > 0 {
                match entry[k] {
                    None => best = best.max(delta[k - 1]),
                    Some(i) => {
                        let cand = delta[k - 1]
                            + cfg.lm_weight * lm.bigram_logp(seq[i - 1], seq[i])
                            - cfg.insertion_penalty;
                        if cand > best {
                            best = cand;
                        }
                    }
                }
            }
            if best > NEG {
                next[k] = best + log_post[[f, senones[k]]];
            }
        }
        delta = next;
    }
    (delta[m - 1] > NEG).then_some(delta[m - 1])
}

/// Exhaustively score every token sequence short enough to fit the segment.
fn enumerate_best(
    log_post: &Mat,
    lexicon: &Lexicon,
    lm: &ToyLm,
    cfg: &DecoderConfig,
) -> Option<f64> {
    let n = log_post.nrows();
    let vocab = lexicon.tokens.len();
    let min_chain = lexicon.tokens.iter().map(Vec::len).min().unwrap();
    let max_len = n / min_chain;
    let mut best: Option<f64> = None;
    for len in 1..=max_len {
        for code in 0..vocab.pow(len as u32) {
            let mut seq = Vec::with_capacity(len);
            let mut c = code;
            for _ in 0..len {
                seq.push(c % vocab);
                c /= vocab;
            }
            if let Some(score) = align_score(&seq, log_post, lexicon, lm, cfg) {
                if best.map_or(true, |b| score > b) {
                    best = Some(score);
                }
            }
        }
    }
    best
}

fn c08_viterbi_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(0x0AC8);
    for i in 0..VITERBI_INSTANCES {
        let num_senones = rng.random_range(4..=6);
        let vocab = rng.random_range(2..=3);
        let lexicon = Lexicon {
            num_senones,
            tokens: (0..vocab)
                .map(|_| {
                    (0..rng.random_range(3..=5))
                        .map(|_| rng.random_range(0..num_senones))
                        .collect()
                })
                .collect(),
        };
        let streams: Vec<Vec<usize>> = (0..3)
            .map(|_| (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..vocab)).collect())
            .collect();
        let lm = ToyLm::train(&streams, vocab, 0.5).unwrap();
        let cfg = DecoderConfig {
            lm_weight: [0.6, 1.0, 1.4][i % 3],
            insertion_penalty: [0.0, 0.4, 0.8][(i / 3) % 3],
            ..DecoderConfig::default()
        };
        // short segments keep the optimum within four tokens; a few are too
        // short for any chain and must decode to the empty transcript
        let n = rng.random_range(1..=12);
        let log_post =
            Mat::from_shape_fn((n, num_senones), |_| -(rng.random::<f64>() * 4.0 + 0.1));

        let got = viterbi_decode(&log_post, &lexicon, &lm, &cfg).unwrap();
        match enumerate_best(&log_post, &lexicon, &lm, &cfg) {
            None => {
                assert!(got.tokens.is_empty(), "instance {i}: expected an empty decode");
                assert_eq!(got.score, 0.0, "instance {i}: empty decode carries no score");
            }
            Some(best) => {
                assert!(
                    (got.score - best).abs() <= VITERBI_TOL,
                    "instance {i}: decoded score {} vs enumerated best {best}",
                    got.score
                );
                // the reported token sequence must itself achieve that score
                let seq: Vec<usize> = got.tokens.iter().map(|t| t.token).collect();
                let rescored = align_score(&seq, &log_post, &lexicon, &lm, &cfg)
                    .expect("decoded sequence must be feasible");
                assert!(
                    (rescored - got.score).abs() <= VITERBI_TOL,
                    "instance {i}: decoded sequence rescoring {rescored} vs {}",
                    got.score
                );
                // spans must tile the segment in order
                let mut cursor = 0;
                for tok in &got.tokens {
                    assert_eq!(tok.start_frame, cursor, "instance {i}: gap in token spans");
                    assert!(tok.end_frame > tok.start_frame);
                    assert!(tok.end_frame - tok.start_frame >= lexicon.tokens[tok.token].len());
                    cursor = tok.end_frame;
                }
                assert_eq!(cursor, n, "instance {i}: spans must cover the segment");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 9: WER against brute-force edit distance
// ---------------------------------------------------------------------------

/// Plain Levenshtein distance with reusable buffers.
fn edit_distance(a: &[u8], b: &[u8], prev: &mut Vec<usize>, cur: &mut Vec<usize>) -> usize {
    prev.clear();
    prev.extend(0..=b.len());
    for (i, &ca) in a.iter().enumerate() {
        cur.clear();
        cur.push(i + 1);
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur.push(sub.min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        std::mem::swap(prev, cur);
    }
    prev[b.len()]
}

fn c09_wer_oracle() {
    // every sequence of length 0..=8 over a three-symbol alphabet
    let mut seqs: Vec<Vec<u8>> = vec![Vec::new()];
    let mut frontier: Vec<Vec<u8>> = vec![Vec::new()];
    for _ in 0..WER_MAX_LEN {
        let mut next = Vec::with_capacity(frontier.len() * WER_ALPHABET);
        for base in &frontier {
            for sym in 0..WER_ALPHABET as u8 {
                let mut s = base.clone();
                s.push(sym);
                next.push(s);
            }
        }
        seqs.extend(next.iter().cloned());
        frontier = next;
    }
    assert_eq!(seqs.len(), (usize::pow(3, 9) - 1) / 2); // 9841 sequences

    let mismatches: usize = seqs
        .par_iter()
        .map(|r| {
            let mut prev = Vec::with_capacity(WER_MAX_LEN + 1);
            let mut cur = Vec::with_capacity(WER_MAX_LEN + 1);
            let mut bad = 0usize;
            for h in &seqs {
                let counts = compute_wer(r, h);
                let distance = edit_distance(r, h, &mut prev, &mut cur);
                if counts.errors() != distance || counts.ref_words != r.len() {
                    bad += 1;
                }
            }
            bad
        })
        .sum();
    assert_eq!(mismatches, 0, "some pairs disagree with the brute-force distance");

    // hand-checked example: one substitution and one insertion over three
    // reference words is 66.7% WER
    let counts = compute_wer(&["a", "b", "c"], &["a", "x", "c", "d"]);
    assert_eq!(
        (counts.substitutions, counts.deletions, counts.insertions),
        (1, 0, 1),
        "hand-checked alignment"
    );
    assert!((counts.wer_pct().unwrap() - 200.0 / 3.0).abs() < 0.05);
}

// ---------------------------------------------------------------------------
// Criterion 10: augmentation overlap ratios are uniform
// ---------------------------------------------------------------------------

fn c10_overlap_uniformity() {
    let spec = ToyCorpusSpec {
        num_conversations: 12,
        mixture: MixtureParams { overlap_prob: 0.5, ..ToyCorpusSpec::default().mixture },
        ..ToyCorpusSpec::default()
    };
    let (_, convs) = synth_toy_corpus(&spec, 0x0ACA).unwrap();
    let feat = &spec.feature;

    // pools are pre-filtered to the minimum length so no draw is rejected
    // (rejections would bias the retained ratios)
    let mut pool_a = Vec::new();
    let mut pool_b = Vec::new();
    for conv in &convs {
        for seg in form_segments(&conv.activity).unwrap() {
            if seg.len() < MIN_AUGMENT_FRAMES {
                continue;
            }
            match seg.kind {
                SegmentKind::A => pool_a.push(extract_segment(conv, &seg, feat)),
                SegmentKind::B => pool_b.push(extract_segment(conv, &seg, feat)),
                SegmentKind::C => {}
            }
        }
    }
    assert!(pool_a.len() >= 10 && pool_b.len() >= 10, "solo segment pools are too small");

    let mut rng = ChaCha12Rng::seed_from_u64(0x0ACB);
    let mut draws = Vec::with_capacity(KS_DRAWS);
    for _ in 0..KS_DRAWS {
        let a = &pool_a[rng.random_range(0..pool_a.len())];
        let b = &pool_b[rng.random_range(0..pool_b.len())];
        let aug = augment_overlap(a, b, (0.3, 0.7), feat, &mut rng)
            .expect("pre-filtered pools never reject");
        assert!((0.3..0.7).contains(&aug.overlap_u));
        assert!(aug.overlap_frames >= 1);
        draws.push(aug.overlap_u);
    }

    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = draws.len() as f64;
    let mut d_stat = 0.0f64;
    for (i, &u) in draws.iter().enumerate() {
        let cdf = (u - 0.3) / 0.4;
        d_stat = d_stat.max(((i + 1) as f64 / n - cdf).abs());
        d_stat = d_stat.max((cdf - i as f64 / n).abs());
    }
    let critical = KS_COEFF_AT_001 / n.sqrt();
    assert!(
        d_stat < critical,
        "KS statistic {d_stat:.4} exceeds the 1% critical value {critical:.4}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: byte-for-byte reproducibility
// ---------------------------------------------------------------------------

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn c11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = ExperimentConfig {
        seed: 20_260_815,
        output_dir: out_dir.clone(),
        eval_conversations: 2,
        am_kind: AmKind::Icam,
        lm_add_k: 1.0,
        augment_per_conversation: 1,
        corpus: ToyCorpusSpec {
            num_conversations: 6,
            num_senones: 10,
            vocab_size: 6,
            utterances_per_conversation: (3, 5),
            tokens_per_utterance: (1, 2),
            state_duration_frames: (4, 6),
            mixture: MixtureParams {
                gap_mean_secs: 0.3,
                overlap_prob: 0.5,
                overlap_range: (0.3, 0.7),
                same_speaker_repeat_prob: 0.2,
            },
            feature: FeatureConfig { num_mels: 24, num_ceps: 16, ..FeatureConfig::default() },
            ..ToyCorpusSpec::default()
        },
        diarizer: DiarizerConfig {
            input_dim: 80,
            encoder_blocks: 1,
            model_dim: 16,
            attention_heads: 2,
            feedforward_dim: 32,
            attractor_hidden_dim: 16,
            median_window: 5,
            subsample: 2,
            ..DiarizerConfig::default()
        },
        diarizer_train: DiarizerTrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            window_frames: 50,
            min_window_frames: 10,
            ..DiarizerTrainConfig::default()
        },
        am: AmConfig {
            input_dim: 80,
            tdnn_dim: 12,
            tdnn_context: 3,
            embedding_dim: 8,
            blstm_units: 10,
            main_blstm_layers: 2,
            gfam_pre_layers: 1,
            gfam_post_layers: 1,
            num_senones: 10,
            train_inactive_as_class0: true,
        },
        am_train: AmTrainConfig { epochs: 2, learning_rate: 1e-3 },
        decoder: DecoderConfig { min_segment_frames: 3, ..DecoderConfig::default() },
        scoring: ScoringConfig::default(),
    };

    let run_all = |cfg: &ExperimentConfig| {
        cmd_synth(cfg, true).unwrap();
        cmd_train(cfg, TrainStage::Diarizer, false, None).unwrap();
        cmd_train(cfg, TrainStage::Acoustic, false, None).unwrap();
        cmd_transcribe(cfg, true).unwrap();
        cmd_transcribe(cfg, false).unwrap();
        cmd_score(cfg, None, None).unwrap();
        cmd_plot(cfg, PlotKind::Loss, None).unwrap();
        cmd_plot(cfg, PlotKind::Senones, None).unwrap();
        cmd_plot(cfg, PlotKind::Embeddings, None).unwrap();
    };

    run_all(&cfg);
    let first = snapshot(&out_dir);
    assert!(first.len() > 20, "expected a full artifact tree, found {} files", first.len());

    std::fs::remove_dir_all(&out_dir).unwrap();
    run_all(&cfg);
    let second = snapshot(&out_dir);

    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>(),
        "the two runs produced different artifact sets"
    );
    for (path, bytes) in &first {
        assert_eq!(
            bytes,
            &second[path],
            "artifact {} differs between identical runs",
            path.display()
        );
    }
}
