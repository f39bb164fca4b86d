use candle_core::{DType, Device, Tensor};

use crate::audio::{mel_filterbank, MelConfig, StftConfig, MEL_LOG_FLOOR};
use crate::error::Result;

/// Differentiable magnitude STFT and log-mel on `(B, 1, N)` waveforms, with
/// the same framing as [`crate::audio::linear_spectrogram`]: zero
/// centre-padding and `floor(N / hop) + 1` frames.
#[derive(Debug, Clone)]
pub struct SpectralFrontEnd {
    pub stft: StftConfig,
    basis: Tensor,
    mel: Tensor,
}

impl SpectralFrontEnd {
    pub fn new(stft: StftConfig, mel: MelConfig, sample_rate: u32, dtype: DType) -> Result<Self> {
        stft.validate()?;
        mel.validate(sample_rate)?;
        let bins = stft.n_bins();
        let window = stft.window();
        let n = stft.n_fft;
        let mut data = vec![0.0f64; 2 * bins * n];
        for k in 0..bins {
            for (i, &w) in window.iter().enumerate() {
                let ang = 2.0 * std::f64::consts::PI * (k * i % n) as f64 / n as f64;
                data[k * n + i] = w as f64 * ang.cos();
                data[(bins + k) * n + i] = -(w as f64) * ang.sin();
            }
        }
        let basis = Tensor::from_vec(data, (2 * bins, n), &Device::Cpu)?
            .t()?
            .contiguous()?
            .to_dtype(dtype)?;
        let fb = mel_filterbank(sample_rate, n, &mel);
        let mel = Tensor::from_vec(fb.as_slice().to_vec(), (fb.rows(), fb.cols()), &Device::Cpu)?
            .to_dtype(dtype)?;
        Ok(Self { stft, basis, mel })
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples / self.stft.hop + 1
    }

    /// `(B, 1, N)` → `(B, n_fft/2 + 1, T)` magnitudes.
    pub fn magnitude(&self, y: &Tensor) -> Result<Tensor> {
        let (b, _, n) = y.dims3()?;
        let bins = self.stft.n_bins();
        let n_fft = self.stft.n_fft;
        let t = self.n_frames(n);
        let padded = y.pad_with_zeros(2, n_fft / 2, n_fft / 2)?;
        let frames = (0..t)
            .map(|i| padded.narrow(2, i * self.stft.hop, n_fft))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let frames = Tensor::cat(&frames, 1)?;
        let spec = frames.broadcast_matmul(&self.basis)?.transpose(1, 2)?;
        debug_assert_eq!(spec.dims3()?, (b, 2 * bins, t));
        let re = spec.narrow(1, 0, bins)?;
        let im = spec.narrow(1, bins, bins)?;
        Ok(((re.sqr()? + im.sqr()?)? + 1e-9)?.sqrt()?)
    }

    /// `(B, 1, N)` → `(B, n_mels, T)` natural-log mel with floor.
    pub fn log_mel(&self, y: &Tensor) -> Result<Tensor> {
        let mag = self.magnitude(y)?;
        let (b, _, _) = mag.dims3()?;
        let fb = self.mel.unsqueeze(0)?.repeat((b, 1, 1))?;
        let mel = fb.matmul(&mag)?;
        Ok(mel.maximum(MEL_LOG_FLOOR as f64)?.log()?)
    }
}
