//! Waveform handling, channel mixdown, MFCC extraction and context stacking.
//!
//! This module produces the N x 200 input tensor consumed by both the
//! diarizer and the acoustic models: 40 MFCCs per 10 ms frame, stacked with
//! a +/-2 frame context.

use std::path::Path;
use std::sync::OnceLock;

use ndarray::s;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mat;

/// Mono audio at a fixed sample rate, amplitudes nominally in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::RejectedInput("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::RejectedInput("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Per-sample mean of two equal-rate waveforms; the shorter is zero-padded.
pub fn mix_channels(a: &Waveform, b: &Waveform) -> Result<Waveform> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::RejectedInput(format!(
            "cannot mix waveforms with sample rates {} and {}",
            a.sample_rate, b.sample_rate
        )));
    }
    let n = a.len().max(b.len());
    let mut samples = Vec::with_capacity(n);
    for t in 0..n {
        let xa = a.samples.get(t).copied().unwrap_or(0.0);
        let xb = b.samples.get(t).copied().unwrap_or(0.0);
        samples.push((xa + xb) / 2.0);
    }
    Ok(Waveform { samples, sample_rate: a.sample_rate })
}

/// Read a PCM16 WAV file; returns one waveform per channel.
pub fn read_wav(path: &Path) -> Result<Vec<Waveform>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::RejectedInput(format!(
            "{}: only 16-bit PCM WAV is supported",
            path.display()
        )));
    }
    let channels = spec.channels as usize;
    let mut per_channel: Vec<Vec<f64>> = vec![Vec::new(); channels];
    for (i, s) in reader.samples::<i16>().enumerate() {
        per_channel[i % channels].push(s? as f64 / 32768.0);
    }
    Ok(per_channel
        .into_iter()
        .map(|samples| Waveform { samples, sample_rate: spec.sample_rate })
        .collect())
}

/// Write a mono waveform as PCM16, clamping to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &x in &w.samples {
        let v = (x.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

/// MFCC extraction settings. The defaults are the tested recipe: 25 ms
/// Hamming window, 10 ms hop, 40 mel filters over 64-3800 Hz at 8 kHz,
/// log-energy floor 1e-10, orthonormal DCT-II, all 40 cepstra retained.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// Analysis window length in samples.
    pub window: usize,
    /// Hop between frame starts in samples.
    pub hop: usize,
    pub num_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub num_ceps: usize,
    pub log_floor: f64,
    /// Subtract the per-conversation mean from each coefficient.
    pub mean_normalize: bool,
    /// Frames of context appended on each side when stacking.
    pub context_radius: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 8000,
            window: 200,
            hop: 80,
            num_mels: 40,
            fmin_hz: 64.0,
            fmax_hz: 3800.0,
            num_ceps: 40,
            log_floor: 1e-10,
            mean_normalize: false,
            context_radius: 2,
        }
    }
}

impl FeatureConfig {
    pub fn frame_shift_secs(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    /// Frames produced for a waveform of `len` samples (0 if below a window).
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            1 + (len - self.window) / self.hop
        }
    }

    /// Samples required to produce exactly `n` frames.
    pub fn num_samples(&self, n: usize) -> usize {
        self.window + (n - 1) * self.hop
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 || self.num_mels == 0 || self.num_ceps == 0 {
            return Err(Error::Config("window, hop, mel and cepstrum counts must be positive".into()));
        }
        if self.num_ceps > self.num_mels {
            return Err(Error::Config(format!(
                "cannot keep {} cepstra from {} mel bands",
                self.num_ceps, self.num_mels
            )));
        }
        if !(0.0 <= self.fmin_hz && self.fmin_hz < self.fmax_hz) {
            return Err(Error::Config("need 0 <= fmin < fmax".into()));
        }
        if self.fmax_hz > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "fmax {} Hz exceeds Nyquist for {} Hz audio",
                self.fmax_hz, self.sample_rate
            )));
        }
        Ok(())
    }
}

/// MFCC frames plus the lazily derived context-stacked view.
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    pub frames: Mat,
    pub frame_shift: f64,
    context_radius: usize,
    stacked: OnceLock<Mat>,
}

impl FeatureSequence {
    pub fn new(frames: Mat, frame_shift: f64, context_radius: usize) -> Self {
        FeatureSequence { frames, frame_shift, context_radius, stacked: OnceLock::new() }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Context-stacked frames (computed on first use).
    pub fn stacked(&self) -> &Mat {
        self.stacked.get_or_init(|| stack_context(&self.frames, self.context_radius))
    }
}

/// Row t of the result is the concatenation of rows t-c..=t+c of `frames`,
/// with edge rows replicated at the boundaries.
pub fn stack_context(frames: &Mat, c: usize) -> Mat {
    let (n, d) = frames.dim();
    assert!(n >= 1, "cannot stack an empty feature matrix");
    let mut out = Mat::zeros((n, d * (2 * c + 1)));
    for t in 0..n {
        for (k, off) in (-(c as isize)..=c as isize).enumerate() {
            let src = (t as isize + off).clamp(0, n as isize - 1) as usize;
            out.slice_mut(s![t, k * d..(k + 1) * d]).assign(&frames.row(src));
        }
    }
    out
}

/// Extract MFCCs. Fails if the waveform is shorter than one analysis window
/// or the sample rate disagrees with the config.
pub fn compute_mfcc(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::RejectedInput(format!(
            "waveform at {} Hz but features configured for {} Hz",
            w.sample_rate, cfg.sample_rate
        )));
    }
    if w.len() < cfg.window {
        return Err(Error::RejectedInput(format!(
            "waveform of {} samples is shorter than one {}-sample window",
            w.len(),
            cfg.window
        )));
    }

    let n = cfg.num_frames(w.len());
    let nfft = cfg.window.next_power_of_two();
    let half = nfft / 2 + 1;
    let hamming = hamming_window(cfg.window);
    let filters = mel_filterbank(cfg, nfft);
    let dct = dct_ii_orthonormal(cfg.num_ceps, cfg.num_mels);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];

    let mut out = Mat::zeros((n, cfg.num_ceps));
    let mut power = vec![0.0f64; half];
    let mut logmel = vec![0.0f64; cfg.num_mels];
    for t in 0..n {
        let start = t * cfg.hop;
        for i in 0..nfft {
            let x = if i < cfg.window { w.samples[start + i] * hamming[i] } else { 0.0 };
            buf[i] = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (m, f) in filters.iter().enumerate() {
            let e: f64 = f.iter().map(|&(k, wgt)| wgt * power[k]).sum();
            logmel[m] = e.max(cfg.log_floor).ln();
        }
        for j in 0..cfg.num_ceps {
            out[[t, j]] = (0..cfg.num_mels).map(|m| dct[[j, m]] * logmel[m]).sum();
        }
    }

    if cfg.mean_normalize {
        let mean = out.mean_axis(ndarray::Axis(0)).expect("non-empty");
        out -= &mean;
    }
    Ok(FeatureSequence::new(out, cfg.frame_shift_secs(), cfg.context_radius))
}

fn hamming_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos())
        .collect()
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters as sparse (bin, weight) lists over the one-sided
/// spectrum of an `nfft`-point FFT.
fn mel_filterbank(cfg: &FeatureConfig, nfft: usize) -> Vec<Vec<(usize, f64)>> {
    let half = nfft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax_hz);
    let edges: Vec<f64> = (0..cfg.num_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.num_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / nfft as f64;
    (0..cfg.num_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut taps = Vec::new();
            for k in 0..half {
                let f = bin_hz(k);
                let wgt = if f > lo && f < mid {
                    (f - lo) / (mid - lo)
                } else if (mid..hi).contains(&f) {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if wgt > 0.0 {
                    taps.push((k, wgt));
                }
            }
            taps
        })
        .collect()
}

/// Orthonormal DCT-II matrix, `num_ceps` x `num_mels`.
fn dct_ii_orthonormal(num_ceps: usize, num_mels: usize) -> Mat {
    let m = num_mels as f64;
    Mat::from_shape_fn((num_ceps, num_mels), |(j, i)| {
        let norm = if j == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
        norm * (std::f64::consts::PI * j as f64 * (i as f64 + 0.5) / m).cos()
    })
}
