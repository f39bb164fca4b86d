//! Seeded synthetic voices for smoke training and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;

/// A harmonic tone following a per-sample F0 track. Zero F0 produces
/// low-level noise.
pub fn harmonic_track(f0: &[f32], sample_rate: u32, brightness: f32, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let mut phase = 0.0f64;
    let samples = f0
        .iter()
        .map(|&f| {
            if f <= 0.0 {
                return 0.02 * (rng.random::<f32>() * 2.0 - 1.0);
            }
            phase = (phase + f as f64 / sr).fract();
            let mut acc = 0.0f64;
            let mut k = 1;
            while (k as f64) * f as f64 <= nyquist * 0.9 && k <= 40 {
                let amp = 1.0 / (k as f64).powf(brightness as f64);
                acc += amp * (2.0 * std::f64::consts::PI * k as f64 * phase).sin();
                k += 1;
            }
            (0.25 * acc) as f32
        })
        .collect();
    let mut w = Waveform {
        samples,
        sample_rate,
    };
    normalize(&mut w, 0.5);
    w
}

fn normalize(w: &mut Waveform, peak: f32) {
    let m = w.samples.iter().fold(0.0f32, |a, s| a.max(s.abs()));
    if m > 0.0 {
        w.samples.iter_mut().for_each(|s| *s *= peak / m);
    }
}

/// Sustained notes with vibrato, as in a sung phrase.
pub fn singing_like(seed: u64, sample_rate: u32, seconds: f32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * sample_rate as f32) as usize;
    let base = rng.random_range(180.0f32..400.0);
    let notes = rng.random_range(2..=4);
    let note_len = n.div_ceil(notes);
    let steps: Vec<f32> = (0..notes).map(|_| [0.0, 2.0, 4.0, 5.0, 7.0][rng.random_range(0..5)]).collect();
    let rate = rng.random_range(4.5f32..6.5);
    let depth = rng.random_range(0.2f32..0.5);
    let f0: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f32 / sample_rate as f32;
            let semis = steps[i / note_len] + depth * (2.0 * std::f32::consts::PI * rate * t).sin();
            base * 2f32.powf(semis / 12.0)
        })
        .collect();
    harmonic_track(&f0, sample_rate, 1.0, seed ^ 0x5eed)
}

/// Gliding low-pitch syllables separated by short unvoiced gaps.
pub fn speech_like(seed: u64, sample_rate: u32, seconds: f32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * sample_rate as f32) as usize;
    let syllable = (0.2 * sample_rate as f32) as usize;
    let gap = (0.05 * sample_rate as f32) as usize;
    let mut f0 = Vec::with_capacity(n);
    while f0.len() < n {
        let start = rng.random_range(100.0f32..220.0);
        let end = start * rng.random_range(0.8f32..1.2);
        f0.extend((0..syllable).map(|i| start + (end - start) * i as f32 / syllable as f32));
        f0.extend(std::iter::repeat(0.0).take(gap));
    }
    f0.truncate(n);
    harmonic_track(&f0, sample_rate, 1.4, seed ^ 0x5eec)
}

/// A constant-pitch harmonic tone.
pub fn steady_tone(f0: f32, sample_rate: u32, seconds: f32, seed: u64) -> Waveform {
    let n = (seconds * sample_rate as f32) as usize;
    harmonic_track(&vec![f0; n], sample_rate, 1.0, seed)
}
