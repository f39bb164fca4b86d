//! Waveform container, WAV I/O, resampling and the spectral front-end.

mod resample;
mod stft;

use std::path::Path;

use crate::error::{Error, Result};

pub use resample::{resample, resample_by_ratio, resampled_len};
pub use stft::{
    istft, linear_spectrogram, mel_filterbank, mel_spectrogram, stft, Complex32, LinearSpectrogram,
    MelConfig, MelSpectrogram, StftConfig, MEL_LOG_FLOOR,
};

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    /// Validates finiteness and a positive rate. Values outside `[-1, 1]`
    /// are accepted in memory; they are clipped when written.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Contract(format!("non-finite sample at index {i}")));
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

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn resampled(&self, target_rate: u32) -> Result<Waveform> {
        resample(self, target_rate)
    }
}

/// Reads a PCM (integer or float) WAV file, averages channels to mono and
/// resamples to `target_rate`.
pub fn load_wav(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()?,
    };
    if interleaved.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no samples", path.display())));
    }
    let mono: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    if let Some(v) = mono.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
        return Err(Error::Format(format!(
            "{}: sample {v} outside [-1, 1]",
            path.display()
        )));
    }
    let w = Waveform::new(mono, spec.sample_rate)?;
    resample(&w, target_rate)
}

/// Writes 16-bit PCM mono, clipping to `[-1, 1]`.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f32, rate: u32, secs: f32) -> Vec<f32> {
        let n = (rate as f32 * secs) as usize;
        (0..n)
            .map(|i| 0.5 * (2.0 * std::f32::consts::PI * freq * i as f32 / rate as f32).sin())
            .collect()
    }

    #[test]
    fn stereo_48k_loads_as_mono_24k() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 48_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        let left = sine(440.0, 48_000, 0.5);
        for &s in &left {
            wr.write_sample((s * 32767.0) as i16).unwrap();
            wr.write_sample((-s * 32767.0 * 0.5) as i16).unwrap();
        }
        wr.finalize().unwrap();
        let w = load_wav(&path, 24_000).unwrap();
        assert_eq!(w.sample_rate, 24_000);
        assert!((w.len() as i64 - (left.len() / 2) as i64).abs() <= 1);
    }

    #[test]
    fn same_rate_load_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wav");
        let w = Waveform::new(sine(220.0, 24_000, 0.25), 24_000).unwrap();
        save_wav(&path, &w).unwrap();
        let a = load_wav(&path, 24_000).unwrap();
        let b = load_wav(&path, 24_000).unwrap();
        assert_eq!(a.samples, b.samples);
        let reader = hound::WavReader::open(&path).unwrap();
        let raw: Vec<f32> = reader
            .into_samples::<i16>()
            .map(|s| s.unwrap() as f32 / 32768.0)
            .collect();
        assert_eq!(a.samples, raw);
    }

    #[test]
    fn missing_and_empty_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_wav(dir.path().join("nope.wav"), 24_000).unwrap_err();
        assert_eq!(err.kind(), "io");

        let path = dir.path().join("empty.wav");
        save_wav(&path, &Waveform::silence(0, 24_000)).unwrap();
        assert_eq!(load_wav(&path, 24_000).unwrap_err().kind(), "empty_input");
    }

    #[test]
    fn write_clips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        save_wav(&path, &Waveform::new(vec![2.0, -3.0, 0.5], 24_000).unwrap()).unwrap();
        let w = load_wav(&path, 24_000).unwrap();
        assert!((w.samples[0] - 32767.0 / 32768.0).abs() < 1e-6);
        assert_eq!(w.samples[1], -32767.0 / 32768.0);
    }

    #[test]
    fn rejects_bad_waveforms() {
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f32::NAN], 24_000).is_err());
    }
}
