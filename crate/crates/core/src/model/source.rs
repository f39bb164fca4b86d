use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample excitation driving the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationSignal {
    pub samples: Vec<f32>,
}

impl ExcitationSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub sample_rate: u32,
    /// Sine amplitude in voiced regions.
    pub amplitude: f32,
    /// Standard deviation of `n_t`; zero disables the noise.
    pub noise_std: f32,
    /// Multiplier on `n_t` in unvoiced regions.
    pub unvoiced_gain: f32,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24000,
            amplitude: 0.1,
            noise_std: 0.003,
            unvoiced_gain: 100.0,
        }
    }
}

/// Sine-plus-noise excitation from a per-sample F0 track.
///
/// Voiced: `a * sin(sum_{k<=t} 2 pi f_k / N_s + phi) + n_t`. Unvoiced:
/// `unvoiced_gain * n_t`. `phi` is drawn once per call in `[-pi, pi]`.
pub fn source_module<R: Rng + ?Sized>(f0: &[f32], cfg: &SourceConfig, rng: &mut R) -> Result<ExcitationSignal> {
    let phi = rng.random_range(-std::f64::consts::PI..=std::f64::consts::PI);
    source_module_with_phase(f0, cfg, phi, rng)
}

pub fn source_module_with_phase<R: Rng + ?Sized>(
    f0: &[f32],
    cfg: &SourceConfig,
    phi: f64,
    rng: &mut R,
) -> Result<ExcitationSignal> {
    if let Some(bad) = f0.iter().find(|f| !(**f >= 0.0) || !f.is_finite()) {
        return Err(Error::Contract(format!("excitation F0 must be finite and >= 0, got {bad}")));
    }
    let noise = if cfg.noise_std > 0.0 {
        Some(Normal::new(0.0f64, cfg.noise_std as f64).expect("positive std"))
    } else {
        None
    };
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut phase = 0.0f64;
    let samples = f0
        .iter()
        .map(|&f| {
            phase = (phase + f as f64 / cfg.sample_rate as f64).fract();
            let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            let e = if f > 0.0 {
                cfg.amplitude as f64 * (two_pi * phase + phi).sin() + n
            } else {
                cfg.unvoiced_gain as f64 * n
            };
            e as f32
        })
        .collect();
    Ok(ExcitationSignal { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unvoiced_std_is_point_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = source_module(&vec![0.0; 100_000], &SourceConfig::default(), &mut rng).unwrap();
        let n = e.len() as f64;
        let mean = e.samples.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = e.samples.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.3).abs() < 0.015, "{}", var.sqrt());
    }

    #[test]
    fn quarter_rate_tone_is_period_four() {
        let cfg = SourceConfig {
            noise_std: 0.0,
            ..SourceConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = source_module_with_phase(&vec![6000.0; 16], &cfg, 0.0, &mut rng).unwrap();
        let pattern = [0.1f32, 0.0, -0.1, 0.0];
        for (t, &v) in e.samples.iter().enumerate() {
            assert!((v - pattern[t % 4]).abs() < 1e-6, "t={t}: {v}");
        }
    }

    #[test]
    fn doubling_f0_doubles_zero_crossings() {
        let cfg = SourceConfig {
            noise_std: 0.0,
            ..SourceConfig::default()
        };
        let crossings = |f: f32| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let e = source_module_with_phase(&vec![f; 24000], &cfg, 0.3, &mut rng).unwrap();
            e.samples.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count() as f64
        };
        let ratio = crossings(440.0) / crossings(220.0);
        assert!((ratio - 2.0).abs() < 0.04, "{ratio}");
    }

    #[test]
    fn negative_f0_rejected_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(source_module(&[100.0, -1.0], &SourceConfig::default(), &mut rng).is_err());
        let f0 = vec![220.0; 500];
        let a = source_module(&f0, &SourceConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = source_module(&f0, &SourceConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}
