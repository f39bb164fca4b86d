use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::Waveform;

pub use rustfft::num_complex::Complex32;

/// Floor applied before the mel log compression.
pub const MEL_LOG_FLOOR: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 240,
            win: 1024,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft == 0 || self.hop == 0 || self.win == 0 {
            return Err(Error::Config("STFT sizes must be positive".into()));
        }
        if self.hop > self.win {
            return Err(Error::Config(format!(
                "hop {} exceeds window {}",
                self.hop, self.win
            )));
        }
        if self.win > self.n_fft {
            return Err(Error::Config(format!(
                "window {} exceeds n_fft {}",
                self.win, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count under center padding.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples / self.hop + 1
    }

    /// Periodic Hann window of length `win`, zero-padded and centered in `n_fft`.
    pub fn window(&self) -> Vec<f32> {
        let mut w = vec![0.0f32; self.n_fft];
        let offset = (self.n_fft - self.win) / 2;
        for i in 0..self.win {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / self.win as f64;
            w[offset + i] = (0.5 - 0.5 * phase.cos()) as f32;
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f32,
    pub fmax: f32,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            fmin: 0.0,
            fmax: 12_000.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return Err(Error::Config(format!(
                "mel range [{}, {}] is empty",
                self.fmin, self.fmax
            )));
        }
        if self.fmax > sample_rate as f32 / 2.0 {
            return Err(Error::Config(format!(
                "mel fmax {} above Nyquist {}",
                self.fmax,
                sample_rate as f32 / 2.0
            )));
        }
        Ok(())
    }
}

/// Magnitude STFT frames (`T × (n_fft/2 + 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpectrogram {
    pub frames: Matrix,
    pub config: StftConfig,
}

/// Log-compressed mel frames (`T × n_mels`).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Matrix,
    pub mel: MelConfig,
}

impl LinearSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f32>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    }
}

/// Complex STFT with `n_fft / 2` zeros of padding on both sides.
pub fn stft(samples: &[f32], cfg: &StftConfig) -> Result<Vec<Vec<Complex32>>> {
    cfg.validate()?;
    let window = cfg.window();
    let pad = cfg.n_fft / 2;
    let n_frames = cfg.n_frames(samples.len());
    let fft = plan(cfg.n_fft, false);
    let mut buf = vec![Complex32::new(0.0, 0.0); cfg.n_fft];
    let mut out = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = (t * cfg.hop) as isize - pad as isize;
        for (m, slot) in buf.iter_mut().enumerate() {
            let idx = start + m as isize;
            let x = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize]
            } else {
                0.0
            };
            *slot = Complex32::new(x * window[m], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..cfg.n_bins()].to_vec());
    }
    Ok(out)
}

/// Weighted overlap-add inverse of [`stft`], normalized by the summed
/// squared window so that `istft(stft(x)) == x` wherever the window covers.
pub fn istft(frames: &[Vec<Complex32>], cfg: &StftConfig, out_len: usize) -> Result<Vec<f32>> {
    cfg.validate()?;
    let window = cfg.window();
    let pad = cfg.n_fft / 2;
    let ifft = plan(cfg.n_fft, true);
    let mut acc = vec![0.0f64; out_len + cfg.n_fft];
    let mut norm = vec![0.0f64; out_len + cfg.n_fft];
    let mut buf = vec![Complex32::new(0.0, 0.0); cfg.n_fft];
    let n_bins = cfg.n_bins();
    for (t, frame) in frames.iter().enumerate() {
        if frame.len() != n_bins {
            return Err(Error::Contract(format!(
                "STFT frame has {} bins, expected {n_bins}",
                frame.len()
            )));
        }
        buf[..n_bins].copy_from_slice(frame);
        for k in n_bins..cfg.n_fft {
            buf[k] = frame[cfg.n_fft - k].conj();
        }
        ifft.process(&mut buf);
        let scale = 1.0 / cfg.n_fft as f32;
        for m in 0..cfg.n_fft {
            let idx = (t * cfg.hop + m) as isize - pad as isize;
            if idx < 0 || idx as usize >= out_len {
                continue;
            }
            let w = window[m] as f64;
            acc[idx as usize] += (buf[m].re * scale) as f64 * w;
            norm[idx as usize] += w * w;
        }
    }
    Ok((0..out_len)
        .map(|i| {
            if norm[i] > 1e-8 {
                (acc[i] / norm[i]) as f32
            } else {
                0.0
            }
        })
        .collect())
}

pub fn linear_spectrogram(w: &Waveform, cfg: &StftConfig) -> Result<LinearSpectrogram> {
    cfg.validate()?;
    if w.len() < cfg.win {
        return Err(Error::EmptyInput(format!(
            "waveform of {} samples is shorter than the {}-sample window",
            w.len(),
            cfg.win
        )));
    }
    let spec = stft(&w.samples, cfg)?;
    let rows: Vec<Vec<f32>> = spec
        .into_iter()
        .map(|frame| frame.into_iter().map(|c| c.norm()).collect())
        .collect();
    Ok(LinearSpectrogram {
        frames: Matrix::from_rows(&rows),
        config: *cfg,
    })
}

pub fn mel_spectrogram(
    w: &Waveform,
    cfg: &StftConfig,
    mel: &MelConfig,
) -> Result<MelSpectrogram> {
    mel.validate(w.sample_rate)?;
    let lin = linear_spectrogram(w, cfg)?;
    let fb = mel_filterbank(w.sample_rate, cfg.n_fft, mel);
    let mut frames = Matrix::zeros(lin.n_frames(), mel.n_mels);
    for t in 0..lin.n_frames() {
        let mag = lin.frames.row(t);
        for m in 0..mel.n_mels {
            let e: f32 = fb.row(m).iter().zip(mag).map(|(a, b)| a * b).sum();
            frames.set(t, m, e.max(MEL_LOG_FLOOR).ln());
        }
    }
    Ok(MelSpectrogram { frames, mel: *mel })
}

fn hz_to_mel(f: f64) -> f64 {
    // Slaney scale: linear below 1 kHz, logarithmic above.
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

/// Slaney-normalized triangular mel filters, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, mel: &MelConfig) -> Matrix {
    let n_bins = n_fft / 2 + 1;
    let lo = hz_to_mel(mel.fmin as f64);
    let hi = hz_to_mel(mel.fmax as f64);
    let points: Vec<f64> = (0..mel.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (mel.n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    let mut fb = Matrix::zeros(mel.n_mels, n_bins);
    for m in 0..mel.n_mels {
        let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
        let enorm = 2.0 / (r - l);
        for (k, &f) in bin_hz.iter().enumerate() {
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            let v = up.min(down).max(0.0) * enorm;
            fb.set(m, k, v as f32);
        }
    }
    fb
}
