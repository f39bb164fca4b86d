//! F0 extraction (YIN family), log-F0 statistics, distribution shifting,
//! quantization for the pitch embedding, and per-sample upsampling for the
//! excitation source.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Per-frame F0 in Hz, 0 on unvoiced frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F0Contour {
    pub f0_hz: Vec<f32>,
    pub voiced: Vec<bool>,
    /// Samples per frame on the model grid.
    pub hop: usize,
    pub sample_rate: u32,
}

impl F0Contour {
    /// Builds a contour from raw values; any value `<= 0` is unvoiced.
    pub fn from_hz(f0_hz: Vec<f32>, hop: usize, sample_rate: u32) -> Self {
        let f0_hz: Vec<f32> = f0_hz.into_iter().map(|f| if f > 0.0 { f } else { 0.0 }).collect();
        let voiced = f0_hz.iter().map(|&f| f > 0.0).collect();
        Self {
            f0_hz,
            voiced,
            hop,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn voiced_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.f0_hz
            .iter()
            .zip(&self.voiced)
            .filter(|(_, &v)| v)
            .map(|(&f, _)| f)
    }

    pub fn n_voiced(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }

    /// Frames `[start, start + len)`, zero-padded past the end.
    pub fn slice(&self, start: usize, len: usize) -> F0Contour {
        let f0 = (start..start + len)
            .map(|i| self.f0_hz.get(i).copied().unwrap_or(0.0))
            .collect();
        F0Contour::from_hz(f0, self.hop, self.sample_rate)
    }

    const MAGIC: &'static [u8; 4] = b"F0C1";

    /// Little-endian sidecar: magic `F0C1`, u32 frame count, u32 hop,
    /// u32 sample rate, then one f32 per frame (0 = unvoiced).
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.hop as u32).to_le_bytes())?;
        w.write_all(&self.sample_rate.to_le_bytes())?;
        for &f in &self.f0_hz {
            w.write_all(&f.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        let bad = |e: std::io::Error| Error::Format(format!("F0 sidecar: {e}"));
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("F0 sidecar: bad magic".into()));
        }
        let mut word = [0u8; 4];
        let mut next = |r: &mut dyn Read| -> Result<[u8; 4]> {
            r.read_exact(&mut word).map_err(bad)?;
            Ok(word)
        };
        let n = u32::from_le_bytes(next(&mut r)?) as usize;
        let hop = u32::from_le_bytes(next(&mut r)?) as usize;
        let sample_rate = u32::from_le_bytes(next(&mut r)?);
        let mut f0 = Vec::with_capacity(n);
        for _ in 0..n {
            let v = f32::from_le_bytes(next(&mut r)?);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Format(format!("F0 sidecar: invalid value {v}")));
            }
            f0.push(v);
        }
        Ok(F0Contour::from_hz(f0, hop, sample_rate))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(16 + 4 * self.len());
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        crate::util::write_atomic(path, &buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&bytes[..])
    }
}

/// Mean and standard deviation of log-F0 over voiced frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F0Stats {
    pub mean_logf0: f64,
    pub std_logf0: f64,
}

/// Quantized F0, bin 0 reserved for unvoiced frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedF0 {
    pub bins: Vec<u32>,
    pub n_bins: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ShiftDomain {
    #[default]
    Log,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Match mean and standard deviation.
    #[default]
    MeanVariance,
    /// Match the mean only.
    MeanOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchConfig {
    pub fmin: f32,
    pub fmax: f32,
    pub n_bins: u32,
    /// Cumulative-mean-normalized difference threshold for voicing.
    pub yin_threshold: f32,
    pub f0_shift_domain: ShiftDomain,
    pub f0_shift_mode: ShiftMode,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            fmin: 50.0,
            fmax: 1100.0,
            n_bins: 256,
            yin_threshold: 0.15,
            f0_shift_domain: ShiftDomain::Log,
            f0_shift_mode: ShiftMode::MeanVariance,
        }
    }
}

/// Anything that turns a waveform into a contour on the model frame grid.
/// The native YIN tracker is the default; an external PYIN can plug in here.
pub trait PitchExtractor: Send + Sync {
    fn extract(&self, w: &Waveform, hop: usize) -> Result<F0Contour>;
}

#[derive(Debug, Clone, Copy)]
pub struct YinExtractor {
    pub fmin: f32,
    pub fmax: f32,
    pub threshold: f32,
}

impl YinExtractor {
    pub fn from_config(cfg: &PitchConfig) -> Self {
        Self {
            fmin: cfg.fmin,
            fmax: cfg.fmax,
            threshold: cfg.yin_threshold,
        }
    }
}

impl PitchExtractor for YinExtractor {
    fn extract(&self, w: &Waveform, hop: usize) -> Result<F0Contour> {
        extract_f0(w, hop, self.fmin, self.fmax, self.threshold)
    }
}

/// Frames below this RMS are unvoiced without running the lag search.
const SILENCE_RMS: f32 = 1e-4;

/// YIN: difference function, cumulative-mean normalization, absolute
/// threshold, parabolic refinement. One estimate per frame centered at
/// `t * hop`.
pub fn extract_f0(
    w: &Waveform,
    hop: usize,
    fmin: f32,
    fmax: f32,
    threshold: f32,
) -> Result<F0Contour> {
    let sr = w.sample_rate as f32;
    if !(fmin > 0.0 && fmin < fmax && fmax <= sr / 2.0) {
        return Err(Error::Config(format!(
            "F0 range [{fmin}, {fmax}] invalid for {} Hz audio",
            w.sample_rate
        )));
    }
    if hop == 0 {
        return Err(Error::Config("hop must be positive".into()));
    }
    let max_lag = (sr / fmin).ceil() as usize;
    let min_lag = ((sr / fmax).floor() as usize).max(2);
    // Integration window spans one period of the lowest admissible F0.
    let win = max_lag;
    let span = win + max_lag;
    if w.len() < win {
        return Err(Error::EmptyInput(format!(
            "{} samples is shorter than the {win}-sample analysis window",
            w.len()
        )));
    }
    let n_frames = w.len() / hop + 1;
    let x = &w.samples;
    let mut frame = vec![0.0f32; span + 1];
    let mut diff = vec![0.0f32; max_lag + 2];
    let mut f0 = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = (t * hop) as isize - (span / 2) as isize;
        for (i, slot) in frame.iter_mut().enumerate() {
            let idx = start + i as isize;
            *slot = if idx >= 0 && (idx as usize) < x.len() {
                x[idx as usize]
            } else {
                0.0
            };
        }
        let energy: f32 = frame.iter().map(|v| v * v).sum::<f32>() / frame.len() as f32;
        if energy.sqrt() < SILENCE_RMS {
            f0.push(0.0);
            continue;
        }
        let lag_est = yin_lag(&frame, win, min_lag, max_lag, threshold, &mut diff);
        f0.push(match lag_est {
            Some(lag) => {
                let hz = sr / lag;
                if hz >= fmin && hz <= fmax {
                    hz
                } else {
                    0.0
                }
            }
            None => 0.0,
        });
    }
    Ok(F0Contour::from_hz(f0, hop, w.sample_rate))
}

fn yin_lag(
    frame: &[f32],
    win: usize,
    min_lag: usize,
    max_lag: usize,
    threshold: f32,
    diff: &mut [f32],
) -> Option<f32> {
    diff[0] = 0.0;
    for tau in 1..=max_lag + 1 {
        let mut d = 0.0f32;
        for j in 0..win {
            let e = frame[j] - frame[j + tau];
            d += e * e;
        }
        diff[tau] = d;
    }
    // Cumulative mean normalized difference, in place.
    let mut running = 0.0f32;
    diff[0] = 1.0;
    for tau in 1..=max_lag + 1 {
        running += diff[tau];
        diff[tau] = if running > 0.0 {
            diff[tau] * tau as f32 / running
        } else {
            1.0
        };
    }
    let mut tau = min_lag;
    while tau <= max_lag {
        if diff[tau] < threshold {
            while tau < max_lag && diff[tau + 1] < diff[tau] {
                tau += 1;
            }
            let (a, b, c) = (diff[tau - 1], diff[tau], diff[tau + 1]);
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 1e-12 {
                (0.5 * (a - c) / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            return Some(tau as f32 + shift);
        }
        tau += 1;
    }
    None
}

pub fn f0_statistics(c: &F0Contour) -> Result<F0Stats> {
    pooled_statistics(std::iter::once(c))
}

/// Statistics over the voiced frames of several contours pooled together.
pub fn pooled_statistics<'a>(contours: impl IntoIterator<Item = &'a F0Contour>) -> Result<F0Stats> {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for c in contours {
        for f in c.voiced_values() {
            let l = (f as f64).ln();
            n += 1;
            sum += l;
            sum_sq += l * l;
        }
    }
    if n == 0 {
        return Err(Error::NoVoicedFrames);
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    Ok(F0Stats {
        mean_logf0: mean,
        std_logf0: var.sqrt(),
    })
}

/// Result of [`shift_f0`]; `mean_only_fallback` is set when the source had
/// zero spread and only the mean could be matched.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedF0 {
    pub contour: F0Contour,
    pub mean_only_fallback: bool,
}

/// Moves the voiced part of `c` from the `src` distribution to `tgt`.
/// A zero-spread source is an error in strict mode; use
/// [`shift_f0_with_fallback`] to degrade to a mean-only shift instead.
pub fn shift_f0(c: &F0Contour, src: &F0Stats, tgt: &F0Stats, cfg: &PitchConfig) -> Result<F0Contour> {
    if cfg.f0_shift_mode == ShiftMode::MeanVariance && src.std_logf0 <= 0.0 && tgt.std_logf0 > 0.0 {
        return Err(Error::DegenerateStats(
            "source F0 has zero spread but target does not".into(),
        ));
    }
    Ok(apply_shift(c, src, tgt, cfg, cfg.f0_shift_mode))
}

pub fn shift_f0_with_fallback(c: &F0Contour, src: &F0Stats, tgt: &F0Stats, cfg: &PitchConfig) -> ShiftedF0 {
    match shift_f0(c, src, tgt, cfg) {
        Ok(contour) => ShiftedF0 {
            contour,
            mean_only_fallback: false,
        },
        Err(_) => ShiftedF0 {
            contour: apply_shift(c, src, tgt, cfg, ShiftMode::MeanOnly),
            mean_only_fallback: true,
        },
    }
}

fn apply_shift(c: &F0Contour, src: &F0Stats, tgt: &F0Stats, cfg: &PitchConfig, mode: ShiftMode) -> F0Contour {
    if src == tgt {
        let f0 = c
            .f0_hz
            .iter()
            .zip(&c.voiced)
            .map(|(&f, &v)| if v { f.clamp(cfg.fmin, cfg.fmax) } else { 0.0 })
            .collect();
        return F0Contour::from_hz(f0, c.hop, c.sample_rate);
    }
    let scale = match mode {
        ShiftMode::MeanOnly => 1.0,
        ShiftMode::MeanVariance if src.std_logf0 > 0.0 => tgt.std_logf0 / src.std_logf0,
        ShiftMode::MeanVariance => 1.0,
    };
    let map = |f: f32| -> f32 {
        let f = f as f64;
        let out = match cfg.f0_shift_domain {
            ShiftDomain::Log => (tgt.mean_logf0 + (f.ln() - src.mean_logf0) * scale).exp(),
            ShiftDomain::Linear => {
                // Stats are log-domain; linear mode maps moments of exp(mean).
                let (sm, tm) = (src.mean_logf0.exp(), tgt.mean_logf0.exp());
                let lin_scale = if mode == ShiftMode::MeanOnly { 1.0 } else { scale * tm / sm };
                tm + (f - sm) * lin_scale
            }
        };
        (out as f32).clamp(cfg.fmin, cfg.fmax)
    };
    let f0 = c
        .f0_hz
        .iter()
        .zip(&c.voiced)
        .map(|(&f, &v)| if v { map(f) } else { 0.0 })
        .collect();
    F0Contour::from_hz(f0, c.hop, c.sample_rate)
}

/// Bin for a single F0 value; 0 for unvoiced, log-uniform `[1, L-1]` otherwise.
pub fn quantize_value(f0: f32, n_bins: u32, fmin: f32, fmax: f32) -> u32 {
    if f0 <= 0.0 {
        return 0;
    }
    let rel = ((f0 as f64).ln() - (fmin as f64).ln()) / ((fmax as f64).ln() - (fmin as f64).ln());
    let raw = 1.0 + ((n_bins - 1) as f64 * rel).floor();
    raw.clamp(1.0, (n_bins - 1) as f64) as u32
}

pub fn quantize_f0(c: &F0Contour, n_bins: u32, fmin: f32, fmax: f32) -> Result<QuantizedF0> {
    if n_bins < 2 {
        return Err(Error::Config(format!("need at least 2 F0 bins, got {n_bins}")));
    }
    if !(fmin > 0.0 && fmin < fmax) {
        return Err(Error::Config(format!("invalid F0 range [{fmin}, {fmax}]")));
    }
    let bins = c
        .f0_hz
        .iter()
        .zip(&c.voiced)
        .map(|(&f, &v)| if v { quantize_value(f, n_bins, fmin, fmax) } else { 0 })
        .collect();
    Ok(QuantizedF0 { bins, n_bins })
}

/// Per-sample F0 of length `T * hop`: linear interpolation toward the next
/// frame inside a voiced run, hold on the last voiced frame of a run, and
/// zeros on unvoiced frames.
pub fn upsample_f0(c: &F0Contour) -> Vec<f32> {
    let hop = c.hop;
    let mut out = Vec::with_capacity(c.len() * hop);
    for t in 0..c.len() {
        if !c.voiced[t] {
            out.extend(std::iter::repeat(0.0).take(hop));
            continue;
        }
        let cur = c.f0_hz[t];
        let next = if t + 1 < c.len() && c.voiced[t + 1] {
            c.f0_hz[t + 1]
        } else {
            cur
        };
        out.extend((0..hop).map(|j| cur + (next - cur) * j as f32 / hop as f32));
    }
    out
}
