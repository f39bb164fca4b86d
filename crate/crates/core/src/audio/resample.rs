//! Band-limited resampling by windowed-sinc interpolation (Kaiser window).

use crate::error::{Error, Result};

use super::Waveform;

const ZERO_CROSSINGS: f64 = 32.0;
const KAISER_BETA: f64 = 8.6;
// Passband edge relative to the lower Nyquist frequency.
const ROLLOFF: f64 = 0.94;

/// Output length for a rate change `in_rate -> out_rate`.
pub fn resampled_len(len: usize, in_rate: f64, out_rate: f64) -> usize {
    (len as f64 * out_rate / in_rate).round() as usize
}

pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    Ok(Waveform {
        samples: resample_by_ratio(&w.samples, ratio),
        sample_rate: target_rate,
    })
}

/// Resamples `x` so that the output has `round(len * ratio)` samples; output
/// sample `n` sits at input position `n / ratio`.
pub fn resample_by_ratio(x: &[f32], ratio: f64) -> Vec<f32> {
    assert!(ratio > 0.0 && ratio.is_finite(), "resample ratio must be positive");
    if ratio == 1.0 {
        return x.to_vec();
    }
    let out_len = (x.len() as f64 * ratio).round() as usize;
    let cutoff = ROLLOFF * ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let window = KaiserTable::new();
    let n_in = x.len() as isize;

    (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(n_in - 1);
            let mut acc = 0.0f64;
            for k in lo..=hi {
                let d = t - k as f64;
                let win = window.at((d / half_width).abs());
                acc += x[k as usize] as f64 * cutoff * sinc(cutoff * d) * win;
            }
            acc as f32
        })
        .collect()
}

/// Kaiser window over `|r| <= 1`, tabulated and linearly interpolated.
struct KaiserTable {
    values: Vec<f64>,
}

impl KaiserTable {
    const SIZE: usize = 8192;

    fn new() -> Self {
        let i0_beta = bessel_i0(KAISER_BETA);
        let values = (0..=Self::SIZE)
            .map(|i| {
                let r = i as f64 / Self::SIZE as f64;
                bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta
            })
            .collect();
        Self { values }
    }

    fn at(&self, r: f64) -> f64 {
        if r >= 1.0 {
            return 0.0;
        }
        let pos = r * Self::SIZE as f64;
        let i = pos as usize;
        let frac = pos - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}
