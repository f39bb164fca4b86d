//! Signal perturbations: the random pitch perturbation applied before
//! content-feature extraction, and the four adaptation-time augmentations
//! (formant shifting, pitch randomization, random parametric EQ, speed).

use rand::Rng;
use rustfft::num_complex::Complex32;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{istft, resample_by_ratio, stft, StftConfig, Waveform};
use crate::error::{Error, Result};

/// STFT used by the phase vocoder and the envelope warper.
const PV_STFT: StftConfig = StftConfig {
    n_fft: 1024,
    hop: 256,
    win: 1024,
};

/// Low-quefrency cutoff (in cepstral bins) of the spectral envelope.
const ENVELOPE_LIFTER: usize = 24;

/// Exclusive bounds for every ratio-valued parameter.
const RATIO_BOUNDS: (f32, f32) = (0.5, 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f32,
    pub hi: f32,
}

impl Interval {
    pub const fn new(lo: f32, hi: f32) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f32) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f32) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f32 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn sample_log<R: Rng + ?Sized>(&self, rng: &mut R) -> f32 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo.ln()..=self.hi.ln()).exp()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub formant_shift_range: Interval,
    pub pitch_shift_range: Interval,
    pub peq_band_count: usize,
    pub peq_gain_range_db: Interval,
    pub speed_range: Interval,
    pub enable_formant: bool,
    pub enable_pitch: bool,
    pub enable_peq: bool,
    pub enable_speed: bool,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            formant_shift_range: Interval::new(1.0 / 1.4, 1.4),
            pitch_shift_range: Interval::new(-12.0, 12.0),
            peq_band_count: 8,
            peq_gain_range_db: Interval::new(-12.0, 12.0),
            speed_range: Interval::new(0.8, 1.25),
            enable_formant: true,
            enable_pitch: true,
            enable_peq: true,
            enable_speed: true,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    /// Every range collapsed to its identity value.
    pub fn identity() -> Self {
        Self {
            formant_shift_range: Interval::point(1.0),
            pitch_shift_range: Interval::point(0.0),
            peq_gain_range_db: Interval::point(0.0),
            speed_range: Interval::point(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, iv: &Interval, identity: f32| -> Result<()> {
            if !(iv.lo <= iv.hi) || !iv.contains(identity) {
                return Err(Error::Config(format!(
                    "{name} [{}, {}] must be ordered and contain {identity}",
                    iv.lo, iv.hi
                )));
            }
            Ok(())
        };
        check("formant_shift_range", &self.formant_shift_range, 1.0)?;
        check("pitch_shift_range", &self.pitch_shift_range, 0.0)?;
        check("peq_gain_range_db", &self.peq_gain_range_db, 0.0)?;
        check("speed_range", &self.speed_range, 1.0)?;
        for (name, iv) in [
            ("formant_shift_range", &self.formant_shift_range),
            ("speed_range", &self.speed_range),
        ] {
            check_ratio(name, iv.lo)?;
            check_ratio(name, iv.hi)?;
        }
        Ok(())
    }
}

fn check_ratio(name: &str, ratio: f32) -> Result<()> {
    if !(ratio > RATIO_BOUNDS.0 && ratio < RATIO_BOUNDS.1) {
        return Err(Error::Config(format!(
            "{name} ratio {ratio} outside ({}, {})",
            RATIO_BOUNDS.0, RATIO_BOUNDS.1
        )));
    }
    Ok(())
}

/// One peaking-EQ section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeqBand {
    pub center_hz: f32,
    pub gain_db: f32,
    pub q: f32,
}

/// Parameters drawn by [`augment`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub formant_ratio: Option<f32>,
    pub pitch_semitones: Option<f32>,
    pub peq_bands: Option<Vec<PeqBand>>,
    pub speed_ratio: Option<f32>,
}

/// Random pitch perturbation with the semitone offset drawn uniformly from
/// `range`. Returns the perturbed clip and the drawn offset.
pub fn pitch_perturb<R: Rng + ?Sized>(
    w: &Waveform,
    range: Interval,
    rng: &mut R,
) -> Result<(Waveform, f32)> {
    if w.is_empty() {
        return Err(Error::EmptyInput("cannot perturb an empty waveform".into()));
    }
    let semitones = range.sample(rng);
    Ok((pitch_shift_semitones(w, semitones), semitones))
}

/// Formant-preserving pitch shift by `semitones`; duration is unchanged.
pub fn pitch_randomize(w: &Waveform, semitones: f32) -> Result<Waveform> {
    if !semitones.is_finite() || semitones.abs() > 24.0 {
        return Err(Error::Config(format!("pitch shift {semitones} semitones out of range")));
    }
    Ok(pitch_shift_semitones(w, semitones))
}

fn pitch_shift_semitones(w: &Waveform, semitones: f32) -> Waveform {
    let ratio = 2f64.powf(semitones as f64 / 12.0);
    let stretched = time_stretch(&w.samples, ratio);
    let mut shifted = resample_by_ratio(&stretched, 1.0 / ratio);
    shifted.resize(w.len(), 0.0);
    // The resample moved the envelope along with the harmonics; move it back.
    let samples = warp_envelope(&shifted, (1.0 / ratio) as f32);
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Moves the spectral envelope by `ratio` while keeping harmonic positions.
pub fn formant_shift(w: &Waveform, ratio: f32) -> Result<Waveform> {
    check_ratio("formant shift", ratio)?;
    Ok(Waveform {
        samples: warp_envelope(&w.samples, ratio),
        sample_rate: w.sample_rate,
    })
}

/// Naive speed change: resampled so duration scales by `1 / ratio` and
/// pitch by `ratio`.
pub fn speed_adjust(w: &Waveform, ratio: f32) -> Result<Waveform> {
    check_ratio("speed", ratio)?;
    Ok(Waveform {
        samples: resample_by_ratio(&w.samples, 1.0 / ratio as f64),
        sample_rate: w.sample_rate,
    })
}

pub fn random_peq<R: Rng + ?Sized>(
    w: &Waveform,
    band_count: usize,
    gain_range_db: Interval,
    rng: &mut R,
) -> (Waveform, Vec<PeqBand>) {
    let nyq = w.sample_rate as f32 / 2.0;
    let freq = Interval::new(60.0, 0.9 * nyq);
    let q = Interval::new(2.0, 5.0);
    let bands: Vec<PeqBand> = (0..band_count)
        .map(|_| PeqBand {
            center_hz: freq.sample_log(rng),
            gain_db: gain_range_db.sample(rng),
            q: q.sample_log(rng),
        })
        .collect();
    (apply_peq(w, &bands), bands)
}

/// Cascade of RBJ peaking biquads.
pub fn apply_peq(w: &Waveform, bands: &[PeqBand]) -> Waveform {
    let mut x: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
    for band in bands {
        let a = 10f64.powf(band.gain_db as f64 / 40.0);
        let w0 = 2.0 * std::f64::consts::PI * band.center_hz as f64 / w.sample_rate as f64;
        let alpha = w0.sin() / (2.0 * band.q as f64);
        let cos = w0.cos();
        let a0 = 1.0 + alpha / a;
        let b = [(1.0 + alpha * a) / a0, -2.0 * cos / a0, (1.0 - alpha * a) / a0];
        let den = [-2.0 * cos / a0, (1.0 - alpha / a) / a0];
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let y = b[0] * *v + b[1] * x1 + b[2] * x2 - den[0] * y1 - den[1] * y2;
            x2 = x1;
            x1 = *v;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
    Waveform {
        samples: x.into_iter().map(|v| v as f32).collect(),
        sample_rate: w.sample_rate,
    }
}

/// Applies an independently drawn instance of every enabled augmentation,
/// in the order formant, pitch, PEQ, speed.
pub fn augment<R: Rng + ?Sized>(
    w: &Waveform,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<(Waveform, AugmentationRecord)> {
    spec.validate()?;
    if w.is_empty() {
        return Err(Error::EmptyInput("cannot augment an empty waveform".into()));
    }
    let mut record = AugmentationRecord::default();
    let mut out = w.clone();
    if spec.enable_formant {
        let r = spec.formant_shift_range.sample_log(rng);
        out = formant_shift(&out, r)?;
        record.formant_ratio = Some(r);
    }
    if spec.enable_pitch {
        let s = spec.pitch_shift_range.sample(rng);
        out = pitch_randomize(&out, s)?;
        record.pitch_semitones = Some(s);
    }
    if spec.enable_peq {
        let (o, bands) = random_peq(&out, spec.peq_band_count, spec.peq_gain_range_db, rng);
        out = o;
        record.peq_bands = Some(bands);
    }
    if spec.enable_speed {
        let r = spec.speed_range.sample(rng);
        out = speed_adjust(&out, r)?;
        record.speed_ratio = Some(r);
    }
    Ok((out, record))
}

fn princarg(phase: f32) -> f32 {
    let two_pi = 2.0 * std::f32::consts::PI;
    phase - two_pi * (phase / two_pi).round()
}

/// Phase-vocoder time stretch to `round(len * factor)` samples at constant
/// pitch. Analysis frames sit at integer positions `round(k * hop / factor)`.
fn time_stretch(x: &[f32], factor: f64) -> Vec<f32> {
    let out_len = (x.len() as f64 * factor).round() as usize;
    let cfg = PV_STFT;
    let n_bins = cfg.n_bins();
    let n_syn = cfg.n_frames(out_len);
    let window = cfg.window();
    let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let pad = (cfg.n_fft / 2) as isize;

    let analyze = |center: isize, buf: &mut Vec<Complex32>| {
        buf.clear();
        for m in 0..cfg.n_fft {
            let idx = center - pad + m as isize;
            let v = if idx >= 0 && (idx as usize) < x.len() {
                x[idx as usize]
            } else {
                0.0
            };
            buf.push(Complex32::new(v * window[m], 0.0));
        }
        fft.process(buf);
    };

    let omega: Vec<f32> = (0..n_bins)
        .map(|k| 2.0 * std::f32::consts::PI * k as f32 / cfg.n_fft as f32)
        .collect();
    let mut frames = Vec::with_capacity(n_syn);
    let mut buf = Vec::with_capacity(cfg.n_fft);
    let mut prev_phase = vec![0.0f32; n_bins];
    let mut syn_phase = vec![0.0f32; n_bins];
    let mut prev_pos = 0isize;
    for k in 0..n_syn {
        let pos = ((k * cfg.hop) as f64 / factor).round() as isize;
        analyze(pos, &mut buf);
        let mut frame = Vec::with_capacity(n_bins);
        for b in 0..n_bins {
            let c = buf[b];
            let phase = c.arg();
            if k == 0 {
                syn_phase[b] = phase;
            } else {
                let da = (pos - prev_pos).max(1) as f32;
                let dev = princarg(phase - prev_phase[b] - omega[b] * da);
                let true_freq = omega[b] + dev / da;
                syn_phase[b] = princarg(syn_phase[b] + true_freq * cfg.hop as f32);
            }
            prev_phase[b] = phase;
            frame.push(Complex32::from_polar(c.norm(), syn_phase[b]));
        }
        prev_pos = pos;
        frames.push(frame);
    }
    istft(&frames, &cfg, out_len).expect("static STFT config is valid")
}

/// Cepstrally smoothed log-magnitude envelope of one spectrum.
fn log_envelope(mag: &[f32], n_fft: usize, planner: &mut FftPlanner<f32>) -> Vec<f32> {
    let n_bins = mag.len();
    let mut buf: Vec<Complex32> = (0..n_fft)
        .map(|k| {
            let m = if k < n_bins { mag[k] } else { mag[n_fft - k] };
            Complex32::new((m + 1e-6).ln(), 0.0)
        })
        .collect();
    planner.plan_fft_inverse(n_fft).process(&mut buf);
    for (q, c) in buf.iter_mut().enumerate() {
        let keep = q <= ENVELOPE_LIFTER || q >= n_fft - ENVELOPE_LIFTER;
        *c = if keep {
            Complex32::new(c.re / n_fft as f32, 0.0)
        } else {
            Complex32::new(0.0, 0.0)
        };
    }
    planner.plan_fft_forward(n_fft).process(&mut buf);
    buf[..n_bins].iter().map(|c| c.re).collect()
}

/// Rescales each STFT frame by `env(k / ratio) / env(k)`: an envelope
/// feature at bin `k` moves to `k * ratio`; harmonics stay put.
fn warp_envelope(x: &[f32], ratio: f32) -> Vec<f32> {
    if x.is_empty() {
        return Vec::new();
    }
    let cfg = PV_STFT;
    let mut frames = stft(x, &cfg).expect("static STFT config is valid");
    let mut planner = FftPlanner::new();
    let n_bins = cfg.n_bins();
    for frame in frames.iter_mut() {
        let mag: Vec<f32> = frame.iter().map(|c| c.norm()).collect();
        let env = log_envelope(&mag, cfg.n_fft, &mut planner);
        for (k, c) in frame.iter_mut().enumerate() {
            let src = (k as f32 / ratio).min((n_bins - 1) as f32);
            let i = src.floor() as usize;
            let frac = src - i as f32;
            let warped = if i + 1 < n_bins {
                env[i] * (1.0 - frac) + env[i + 1] * frac
            } else {
                env[n_bins - 1]
            };
            *c *= (warped - env[k]).exp();
        }
    }
    istft(&frames, &cfg, x.len()).expect("static STFT config is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pitch::{PitchConfig, PitchExtractor, YinExtractor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SR: u32 = 24_000;

    fn tone(f: f32, secs: f32) -> Waveform {
        let n = (SR as f32 * secs) as usize;
        let s = (0..n)
            .map(|i| {
                let t = i as f32 / SR as f32;
                (1..=4)
                    .map(|h| 0.3 / h as f32 * (2.0 * std::f32::consts::PI * f * h as f32 * t).sin())
                    .sum()
            })
            .collect();
        Waveform::new(s, SR).unwrap()
    }

    fn rel_l2(a: &[f32], b: &[f32]) -> f32 {
        let n: f32 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let d: f32 = b.iter().map(|y| y * y).sum();
        (n / d).sqrt()
    }

    fn median_f0(w: &Waveform) -> f32 {
        let c = YinExtractor::from_config(&PitchConfig::default()).extract(w, 240).unwrap();
        let mut v: Vec<f32> = c.voiced_values().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }

    #[test]
    fn identity_parameters_reproduce_input() {
        let w = tone(220.0, 0.5);
        assert!(rel_l2(&formant_shift(&w, 1.0).unwrap().samples, &w.samples) < 1e-3);
        assert!(rel_l2(&pitch_randomize(&w, 0.0).unwrap().samples, &w.samples) < 1e-3);
        assert_eq!(speed_adjust(&w, 1.0).unwrap(), w);
        let flat = [PeqBand {
            center_hz: 1000.0,
            gain_db: 0.0,
            q: 3.0,
        }; 8];
        assert!(rel_l2(&apply_peq(&w, &flat).samples, &w.samples) < 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, s) = pitch_perturb(&w, Interval::point(0.0), &mut rng).unwrap();
        assert_eq!(s, 0.0);
        assert!(rel_l2(&p.samples, &w.samples) < 1e-3);
    }

    #[test]
    fn octave_up_doubles_f0() {
        let w = tone(220.0, 1.0);
        let up = pitch_randomize(&w, 12.0).unwrap();
        assert_eq!(up.len(), w.len());
        let m = median_f0(&up);
        assert!((m / 440.0 - 1.0).abs() < 0.03, "median {m}");
    }

    #[test]
    fn formant_shift_keeps_pitch_and_length() {
        let w = tone(200.0, 0.6);
        for r in [0.75f32, 1.35] {
            let o = formant_shift(&w, r).unwrap();
            assert_eq!(o.len(), w.len());
            assert!((median_f0(&o) / median_f0(&w) - 1.0).abs() < 0.05);
            assert!(rel_l2(&o.samples, &w.samples) > 1e-2, "envelope should move");
        }
    }

    #[test]
    fn speed_scales_duration() {
        let w = tone(200.0, 1.0);
        let o = speed_adjust(&w, 1.25).unwrap();
        assert!((o.len() as i64 - 19_200).abs() <= 240);
        assert!(speed_adjust(&w, 2.5).is_err());
        assert!(formant_shift(&w, 0.4).is_err());
    }

    #[test]
    fn seeded_determinism() {
        let w = tone(180.0, 0.4);
        let spec = AugmentationSpec::default();
        let a = augment(&w, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&w, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let p1 = pitch_perturb(&w, Interval::new(-12.0, 12.0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p2 = pitch_perturb(&w, Interval::new(-12.0, 12.0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn augment_identity_and_speed_law() {
        let w = tone(210.0, 0.5);
        let (o, rec) = augment(&w, &AugmentationSpec::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(rec.speed_ratio, Some(1.0));
        assert!(rel_l2(&o.samples, &w.samples) < 1e-3);

        let (o, rec) = augment(&w, &AugmentationSpec::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let r = rec.speed_ratio.unwrap();
        let expected = w.len() as f32 / r;
        assert!((o.len() as f32 - expected).abs() <= 240.0);
        assert_eq!(rec.peq_bands.unwrap().len(), 8);
    }

    #[test]
    fn spec_validation() {
        let mut spec = AugmentationSpec::default();
        spec.speed_range = Interval::new(1.1, 1.2);
        assert_eq!(spec.validate().unwrap_err().kind(), "config");
        spec.speed_range = Interval::new(0.4, 1.2);
        assert!(spec.validate().is_err());
    }
}
