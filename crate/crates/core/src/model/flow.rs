use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv1d, Init, ParamBuilder};

use super::encoders::{all_finite, LatentSequence};
use super::wavenet::WaveNet;

/// Affine coupling: the first half of the channels parameterizes a shift and
/// log-scale applied to the second half.
#[derive(Debug, Clone)]
pub struct AffineCoupling {
    half: usize,
    pre: Conv1d,
    enc: WaveNet,
    pub post: Conv1d,
}

impl AffineCoupling {
    pub fn new(
        b: &ParamBuilder<'_>,
        channels: usize,
        hidden: usize,
        kernel: usize,
        layers: usize,
        gin_channels: usize,
    ) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Config(format!("flow needs an even channel count, got {channels}")));
        }
        let half = channels / 2;
        Ok(Self {
            half,
            pre: Conv1d::new(&b.pp("pre"), half, hidden, 1, 1, None)?,
            enc: WaveNet::new(&b.pp("enc"), hidden, kernel, 1, layers, gin_channels)?,
            post: Conv1d::new(&b.pp("post"), hidden, 2 * half, 1, 1, Some(Init::Zeros))?,
        })
    }

    fn stats(&self, x0: &Tensor, mask: &Tensor, g: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let h = self.pre.forward(x0)?.broadcast_mul(mask)?;
        let h = self.enc.forward(&h, mask, g)?;
        let stats = self.post.forward(&h)?.broadcast_mul(mask)?;
        Ok((stats.narrow(1, 0, self.half)?, stats.narrow(1, self.half, self.half)?))
    }

    /// Returns the transformed tensor and the per-example log-determinant `(B,)`.
    pub fn forward(&self, x: &Tensor, mask: &Tensor, g: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let x0 = x.narrow(1, 0, self.half)?;
        let x1 = x.narrow(1, self.half, self.half)?;
        let (m, logs) = self.stats(&x0, mask, g)?;
        let x1 = (m + (x1 * logs.exp()?)?)?.broadcast_mul(mask)?;
        let logdet = logs.sum((1, 2))?;
        Ok((Tensor::cat(&[&x0, &x1], 1)?, logdet))
    }

    pub fn inverse(&self, x: &Tensor, mask: &Tensor, g: Option<&Tensor>) -> Result<Tensor> {
        let x0 = x.narrow(1, 0, self.half)?;
        let x1 = x.narrow(1, self.half, self.half)?;
        let (m, logs) = self.stats(&x0, mask, g)?;
        let x1 = ((x1 - m)? * logs.neg()?.exp()?)?.broadcast_mul(mask)?;
        Ok(Tensor::cat(&[&x0, &x1], 1)?)
    }
}

fn flip_channels(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let idx: Vec<u32> = (0..c as u32).rev().collect();
    let idx = Tensor::new(idx.as_slice(), x.device())?;
    Ok(x.index_select(&idx, 1)?)
}

/// Coupling layers interleaved with channel reversals.
#[derive(Debug, Clone)]
pub struct Flow {
    pub couplings: Vec<AffineCoupling>,
}

impl Flow {
    pub fn new(
        b: &ParamBuilder<'_>,
        channels: usize,
        hidden: usize,
        kernel: usize,
        layers: usize,
        n_couplings: usize,
        gin_channels: usize,
    ) -> Result<Self> {
        let couplings = (0..n_couplings)
            .map(|i| AffineCoupling::new(&b.pp(format!("coupling.{i}")), channels, hidden, kernel, layers, gin_channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { couplings })
    }

    /// `z -> z'` with the summed log-determinant per example.
    pub fn forward(&self, z: &LatentSequence, mask: &Tensor, g: Option<&Tensor>) -> Result<(LatentSequence, Tensor)> {
        if !all_finite(&z.z)? {
            return Err(Error::Contract("non-finite latent entering the flow".into()));
        }
        let mut x = z.z.clone();
        let mut logdet = Tensor::zeros(x.dim(0)?, x.dtype(), x.device())?;
        for c in &self.couplings {
            let (y, ld) = c.forward(&x, mask, g)?;
            logdet = (logdet + ld)?;
            x = flip_channels(&y)?;
        }
        Ok((LatentSequence { z: x }, logdet))
    }

    pub fn inverse(&self, z: &LatentSequence, mask: &Tensor, g: Option<&Tensor>) -> Result<LatentSequence> {
        if !all_finite(&z.z)? {
            return Err(Error::Contract("non-finite latent entering the flow".into()));
        }
        let mut x = z.z.clone();
        for c in self.couplings.iter().rev() {
            x = c.inverse(&flip_channels(&x)?, mask, g)?;
        }
        Ok(LatentSequence { z: x })
    }
}
