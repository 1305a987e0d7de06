//! Labeled data: silence padding, noise mixing at a target SNR, per-frame
//! labels, a synthetic corpus generator and the on-disk manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{featurize, frame_count, FeatureSequence, FrontendConfig, Waveform};
use crate::wav;

const PEAK_LIMIT: f64 = 0.99;

/// Features with one binary label per frame (1 = speech).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledUtterance {
    pub features: FeatureSequence,
    pub labels: Vec<u8>,
    pub source_id: String,
}

impl LabeledUtterance {
    pub fn new(features: FeatureSequence, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != features.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} frames",
                labels.len(),
                features.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        let source_id = features.source_id().to_string();
        Ok(Self {
            features,
            labels,
            source_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub silence_pad_s: f64,
    pub seed: u64,
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            snr_db_min: -5.0,
            snr_db_max: 20.0,
            silence_pad_s: 2.0,
            seed: 0,
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_db_min <= self.snr_db_max) {
            return Err(Error::InvalidArgument(format!(
                "snr range [{}, {}] is empty",
                self.snr_db_min, self.snr_db_max
            )));
        }
        if !(self.silence_pad_s >= 0.0) {
            return Err(Error::InvalidArgument("silence_pad_s must be >= 0".into()));
        }
        Ok(())
    }
}

/// Surrounds `w` with `silence_pad_s` seconds of zeros on both sides.
///
/// The returned mask is 0 over the pads and `mask` (or all ones) in between.
pub fn pad_silence(w: &Waveform, mask: Option<&[u8]>, spec: &MixSpec) -> Result<(Waveform, Vec<u8>)> {
    spec.validate()?;
    if let Some(m) = mask {
        if m.len() != w.len() {
            return Err(Error::Shape(format!("mask of {} for {} samples", m.len(), w.len())));
        }
    }
    let pad = (spec.silence_pad_s * w.sample_rate() as f64).round() as usize;
    let mut samples = vec![0.0; pad];
    samples.extend_from_slice(w.samples());
    samples.resize(samples.len() + pad, 0.0);
    let mut out_mask = vec![0u8; pad];
    match mask {
        Some(m) => out_mask.extend_from_slice(m),
        None => out_mask.resize(pad + w.len(), 1),
    }
    out_mask.resize(out_mask.len() + pad, 0);
    Ok((Waveform::new(samples, w.sample_rate())?, out_mask))
}

/// Result of [`mix_noise`]: `mixed = rescale · (clean + gain · noise)`.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub mixed: Waveform,
    pub gain: f64,
    pub rescale: f64,
}

/// Mean squared amplitude over the samples selected by `active` (all if `None`).
fn region_power(x: &[f64], active: Option<&[u8]>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (i, &v) in x.iter().enumerate() {
        if active.is_none_or(|m| m[i] == 1) {
            sum += v * v;
            n += 1;
        }
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, n)
}

/// `10·log10(P_signal / P_noise)` over the active region.
pub fn measure_snr_db(signal: &[f64], noise: &[f64], active: Option<&[u8]>) -> f64 {
    let (ps, _) = region_power(signal, active);
    let (pn, _) = region_power(noise, active);
    10.0 * (ps / pn).log10()
}

/// Adds `noise` to `clean` scaled so the speech-region SNR equals `snr_db`.
///
/// Noise shorter than `clean` is tiled. Powers are measured over the samples
/// where `active` is 1 (the whole signal when `None`). If the sum would
/// exceed the peak limit, both components are attenuated together.
pub fn mix_noise(clean: &Waveform, noise: &Waveform, snr_db: f64, active: Option<&[u8]>) -> Result<Mixture> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::InvalidArgument(format!(
            "clean is {} Hz, noise is {} Hz",
            clean.sample_rate(),
            noise.sample_rate()
        )));
    }
    if noise.is_empty() {
        return Err(Error::InvalidArgument("noise is empty".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr {snr_db} dB is not finite")));
    }
    if let Some(m) = active {
        if m.len() != clean.len() {
            return Err(Error::Shape(format!("mask of {} for {} samples", m.len(), clean.len())));
        }
    }
    let noise: Vec<f64> = noise.samples().iter().copied().cycle().take(clean.len()).collect();
    let (p_clean, n_active) = region_power(clean.samples(), active);
    let (p_noise, _) = region_power(&noise, active);
    if n_active == 0 || p_clean <= 0.0 {
        return Err(Error::InvalidArgument("clean signal has zero power over the speech region".into()));
    }
    if p_noise <= 0.0 {
        return Err(Error::InvalidArgument("noise has zero power over the speech region".into()));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut mixed: Vec<f64> = clean.samples().iter().zip(&noise).map(|(c, n)| c + gain * n).collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rescale = if peak > PEAK_LIMIT { PEAK_LIMIT / peak } else { 1.0 };
    if rescale != 1.0 {
        mixed.iter_mut().for_each(|v| *v *= rescale);
    }
    Ok(Mixture {
        mixed: Waveform::new(mixed, clean.sample_rate())?,
        gain,
        rescale,
    })
}

/// Frame `t` is speech iff strictly more than half its samples are speech.
pub fn label_frames(speech_mask: &[u8], cfg: &FrontendConfig) -> Vec<u8> {
    let (len, hop) = (cfg.frame_len_samples(), cfg.hop_samples());
    let t = frame_count(speech_mask.len(), len, hop);
    if t == 0 {
        return Vec::new();
    }
    // prefix sums make every frame O(1)
    let mut prefix = Vec::with_capacity(speech_mask.len() + 1);
    prefix.push(0usize);
    for &m in speech_mask {
        prefix.push(prefix.last().unwrap() + (m == 1) as usize);
    }
    (0..t)
        .map(|i| {
            let ones = prefix[i * hop + len] - prefix[i * hop];
            (2 * ones > len) as u8
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
        }
    }
}

/// One synthetic recording before featurization.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub id: String,
    pub wave: Waveform,
    pub mask: Vec<u8>,
    pub snr_db: f64,
    pub noise: NoiseKind,
}

/// Harmonic tone with slow amplitude modulation standing in for voiced speech.
pub fn speech_surrogate<R: Rng>(rng: &mut R, n: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let f0 = rng.random_range(80.0..300.0);
    let n_harm = rng.random_range(3..=5);
    let am_rate = rng.random_range(2.0..8.0);
    let am_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let level = rng.random_range(0.2..0.5);
    let partials: Vec<(f64, f64, f64)> = (1..=n_harm)
        .map(|k| {
            let amp = rng.random_range(0.7..1.3) / k as f64;
            (k as f64 * f0, amp, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .filter(|(f, _, _)| *f < sr / 2.0)
        .collect();
    let norm: f64 = partials.iter().map(|p| p.1).sum();
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.6 + 0.4 * (std::f64::consts::TAU * am_rate * t + am_phase).sin();
            let s: f64 = partials
                .iter()
                .map(|&(f, a, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum();
            level * env * s / norm
        })
        .collect()
}

/// White, pink or babble-like (band-limited, syllable-rate modulated) noise.
pub fn noise_surrogate<R: Rng>(rng: &mut R, kind: NoiseKind, n: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .iter()
                .map(|&w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Babble => {
            let one_pole = |fc: f64| 1.0 - (-std::f64::consts::TAU * fc / sr).exp();
            let (a_lo, a_hi) = (one_pole(3400.0), one_pole(300.0));
            let rate = rng.random_range(3.0..6.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let (mut lp, mut hp_state) = (0.0, 0.0);
            white
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    lp += a_lo * (w - lp);
                    hp_state += a_hi * (lp - hp_state);
                    let band = lp - hp_state;
                    let t = i as f64 / sr;
                    band * (0.55 + 0.45 * (std::f64::consts::TAU * rate * t + phase).sin())
                })
                .collect()
        }
    }
}

fn utterance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates utterance `index` of the corpus defined by `spec`.
pub fn synth_utterance(index: usize, spec: &MixSpec, sample_rate: u32) -> Result<SynthUtterance> {
    spec.validate()?;
    let mut rng = utterance_rng(spec.seed, index as u64);
    let dur = rng.random_range(0.5..3.0);
    let n = (dur * sample_rate as f64).round() as usize;
    let speech = Waveform::new(speech_surrogate(&mut rng, n, sample_rate), sample_rate)?;
    let (padded, mask) = pad_silence(&speech, None, spec)?;
    let kind = match rng.random_range(0..3) {
        0 => NoiseKind::White,
        1 => NoiseKind::Pink,
        _ => NoiseKind::Babble,
    };
    let noise = Waveform::new(noise_surrogate(&mut rng, kind, padded.len(), sample_rate), sample_rate)?;
    let snr_db = if spec.snr_db_max > spec.snr_db_min {
        rng.random_range(spec.snr_db_min..spec.snr_db_max)
    } else {
        spec.snr_db_min
    };
    let mix = mix_noise(&padded, &noise, snr_db, Some(&mask))?;
    Ok(SynthUtterance {
        id: format!("utt{:05}", index),
        wave: mix.mixed,
        mask,
        snr_db,
        noise: kind,
    })
}

/// `n` synthetic waveforms; identical for identical `spec`.
pub fn synth_waveforms(n: usize, spec: &MixSpec, sample_rate: u32) -> Result<Vec<SynthUtterance>> {
    (0..n).into_par_iter().map(|i| synth_utterance(i, spec, sample_rate)).collect()
}

/// Featurizes and labels a waveform with its per-sample speech mask.
pub fn label_utterance(wave: &Waveform, mask: &[u8], id: &str, cfg: &FrontendConfig) -> Result<LabeledUtterance> {
    if mask.len() != wave.len() {
        return Err(Error::Shape(format!("mask of {} for {} samples", mask.len(), wave.len())));
    }
    let features = featurize(wave, cfg, id)?;
    LabeledUtterance::new(features, label_frames(mask, cfg))
}

/// Synthetic labeled corpus of `n_utts` utterances, deterministic in `spec.seed`.
pub fn synth_corpus(n_utts: usize, spec: &MixSpec, cfg: &FrontendConfig) -> Result<Vec<LabeledUtterance>> {
    if n_utts == 0 {
        return Err(Error::InvalidArgument("corpus needs at least one utterance".into()));
    }
    (0..n_utts)
        .into_par_iter()
        .map(|i| {
            let u = synth_utterance(i, spec, cfg.sample_rate)?;
            label_utterance(&u.wave, &u.mask, &u.id, cfg)
        })
        .collect()
}

/// Shuffles `0..n` with `seed` and splits it `train_frac` / rest.
pub fn split_train_dev(n: usize, train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d));
    let n_train = ((n as f64 * train_frac).round() as usize).min(n);
    let dev = idx.split_off(n_train);
    (idx, dev)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// One manifest row; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub wav: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub snr_db: Option<f64>,
}

pub const MANIFEST_HEADER: &str = "id\twav\tmask\tsplit\tsnr_db";

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        let snr = r.snr_db.map_or_else(|| "-".to_string(), |s| format!("{s:.4}"));
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.id,
            r.wav.display(),
            r.mask.display(),
            r.split,
            snr
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format("manifest", path, "missing header line"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::format("manifest", path, format!("line {}: expected 5 columns", i + 2)));
            }
            let snr_db = match cols[4] {
                "-" => None,
                s => Some(s.parse::<f64>().map_err(|e| {
                    Error::format("manifest", path, format!("line {}: snr `{s}`: {e}", i + 2))
                })?),
            };
            Ok(ManifestRecord {
                id: cols[0].to_string(),
                wav: PathBuf::from(cols[1]),
                mask: PathBuf::from(cols[2]),
                split: cols[3].parse()?,
                snr_db,
            })
        })
        .collect()
}

/// Writes a 0/1 mask as `value count` runs, one per line.
pub fn write_mask(path: &Path, mask: &[u8]) -> Result<()> {
    let mut out = String::new();
    let mut i = 0;
    while i < mask.len() {
        let v = mask[i];
        let run = mask[i..].iter().take_while(|&&m| m == v).count();
        out.push_str(&format!("{v} {run}\n"));
        i += run;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut mask = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::format("mask", path, format!("line {}: expected `<0|1> <count>`", i + 1));
        let mut parts = line.split_whitespace();
        let v: u8 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let n: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if v > 1 || parts.next().is_some() {
            return Err(bad());
        }
        mask.resize(mask.len() + n, v);
    }
    Ok(mask)
}

/// Loads and labels one manifest record relative to `base_dir`.
pub fn load_record(record: &ManifestRecord, base_dir: &Path, cfg: &FrontendConfig) -> Result<LabeledUtterance> {
    let wave = wav::read_wav(&base_dir.join(&record.wav))?;
    let mask = read_mask(&base_dir.join(&record.mask))?;
    label_utterance(&wave, &mask, &record.id, cfg)
}
