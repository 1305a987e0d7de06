//! Log-mel filterbank frontend: pre-emphasis, framing, Hann-windowed power
//! spectrum and an HTK-scale triangular filterbank.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fft_size: usize,
    pub preemphasis: f64,
    pub log_floor: f64,
    pub mel_fmin: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub mel_fmax: Option<f64>,
    /// Per-utterance mean/variance normalization of each mel band.
    pub normalize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_len_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 40,
            fft_size: 512,
            preemphasis: 0.97,
            log_floor: 1e-10,
            mel_fmin: 0.0,
            mel_fmax: None,
            normalize: false,
        }
    }
}

impl FrontendConfig {
    pub fn frame_len_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_len_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fmax(&self) -> f64 {
        self.mel_fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if self.frame_len_samples() == 0 || self.hop_samples() == 0 {
            return bad(format!(
                "frame ({} ms) and hop ({} ms) must each cover at least one sample",
                self.frame_len_ms, self.hop_ms
            ));
        }
        if self.fft_size < self.frame_len_samples() {
            return bad(format!(
                "fft_size {} is shorter than the frame ({} samples)",
                self.fft_size,
                self.frame_len_samples()
            ));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad(format!("preemphasis {} outside [0, 1)", self.preemphasis));
        }
        if !(self.log_floor > 0.0) {
            return bad(format!("log_floor {} must be positive", self.log_floor));
        }
        let fmax = self.fmax();
        if !(self.mel_fmin >= 0.0 && self.mel_fmin < fmax && fmax <= self.sample_rate as f64 / 2.0) {
            return bad(format!("mel range [{}, {fmax}] invalid", self.mel_fmin));
        }
        Ok(())
    }
}

/// `1 + floor((n - frame_len) / hop)` when at least one frame fits, else 0.
pub fn frame_count(n: usize, frame_len: usize, hop: usize) -> usize {
    if n < frame_len {
        0
    } else {
        1 + (n - frame_len) / hop
    }
}

/// Log-mel features of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<f64>,
    n_mels: usize,
    frame_times: Vec<f64>,
    source_id: String,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f64>, n_mels: usize, frame_times: Vec<f64>, source_id: impl Into<String>) -> Result<Self> {
        if n_mels == 0 || frames.len() != n_mels * frame_times.len() {
            return Err(Error::Shape(format!(
                "{} feature values for {} frames of {n_mels} bands",
                frames.len(),
                frame_times.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self {
            frames,
            n_mels,
            frame_times,
            source_id: source_id.into(),
        })
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.frame_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_times.is_empty()
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Row-major `T × n_mels` values.
    pub fn values(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame_times(&self) -> &[f64] {
        &self.frame_times
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.len(), self.n_mels],
            self.frames.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("feature matrix shape is consistent by construction")
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters, `n_mels` rows by `fft_size/2 + 1` bins.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.fmax()));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let rising = (f - left) / (center - left);
                    let falling = (right - f) / (right - center);
                    rising.min(falling).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Pre-emphasized, hop-spaced frames of `w`.
///
/// A signal shorter than one frame yields no frames.
pub fn frame_signal(w: &Waveform, cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    check_rate(w, cfg)?;
    let (len, hop) = (cfg.frame_len_samples(), cfg.hop_samples());
    let x = w.samples();
    let mut y = Vec::with_capacity(x.len());
    for (n, &s) in x.iter().enumerate() {
        y.push(if n == 0 { s } else { s - cfg.preemphasis * x[n - 1] });
    }
    Ok((0..frame_count(y.len(), len, hop))
        .map(|t| y[t * hop..t * hop + len].to_vec())
        .collect())
}

fn check_rate(w: &Waveform, cfg: &FrontendConfig) -> Result<()> {
    if w.sample_rate() != cfg.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "waveform is {} Hz but the frontend expects {} Hz (resample first)",
            w.sample_rate(),
            cfg.sample_rate
        )));
    }
    Ok(())
}

/// Reusable log-mel analyzer holding the window, filterbank and FFT plan.
pub struct LogMel {
    cfg: FrontendConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMel {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_len_samples();
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            window,
            filters: mel_filterbank(cfg),
            fft,
        })
    }

    pub fn filterbank(&self) -> &[Vec<f64>] {
        &self.filters
    }

    /// Periodic Hann window of frame length.
    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// `|FFT|²` of the windowed, zero-padded frame, bins `0..=fft_size/2`.
    pub fn power_spectrum(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.window.len() {
            return Err(Error::InvalidArgument(format!(
                "frame has {} samples, expected {}",
                frame.len(),
                self.window.len()
            )));
        }
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = s * w;
        }
        self.fft.process(&mut buf);
        Ok(buf[..self.cfg.fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect())
    }

    pub fn logmel(&self, frame: &[f64]) -> Result<Vec<f64>> {
        let power = self.power_spectrum(frame)?;
        Ok(self
            .filters
            .iter()
            .map(|row| {
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(self.cfg.log_floor).ln()
            })
            .collect())
    }
}

/// Log-mel vector of a single frame.
pub fn logmel(frame: &[f64], cfg: &FrontendConfig) -> Result<Vec<f64>> {
    LogMel::new(cfg)?.logmel(frame)
}

/// Frames `w` and computes its log-mel features.
pub fn featurize(w: &Waveform, cfg: &FrontendConfig, source_id: &str) -> Result<FeatureSequence> {
    let frames = frame_signal(w, cfg)?;
    let analyzer = LogMel::new(cfg)?;
    let mut values = Vec::with_capacity(frames.len() * cfg.n_mels);
    for f in &frames {
        values.extend(analyzer.logmel(f)?);
    }
    if cfg.normalize {
        normalize_bands(&mut values, cfg.n_mels);
    }
    let times = (0..frames.len()).map(|t| t as f64 * cfg.hop_ms / 1000.0).collect();
    FeatureSequence::new(values, cfg.n_mels, times, source_id)
}

fn normalize_bands(values: &mut [f64], n_mels: usize) {
    let t = values.len() / n_mels;
    if t == 0 {
        return;
    }
    for b in 0..n_mels {
        let mean = (0..t).map(|i| values[i * n_mels + b]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (values[i * n_mels + b] - mean).powi(2)).sum::<f64>() / t as f64;
        let scale = if var > 1e-12 { var.sqrt().recip() } else { 1.0 };
        for i in 0..t {
            let v = &mut values[i * n_mels + b];
            *v = (*v - mean) * scale;
        }
    }
}
