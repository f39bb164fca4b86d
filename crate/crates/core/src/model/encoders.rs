use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Conv1d, LayerNorm, ParamBuilder};

use super::wavenet::WaveNet;

/// Diagonal Gaussian per frame; `mean` and `log_std` are `(B, C, T)`.
#[derive(Debug, Clone)]
pub struct GaussianSequence {
    pub mean: Tensor,
    pub log_std: Tensor,
}

impl GaussianSequence {
    pub fn new(mean: Tensor, log_std: Tensor) -> Result<Self> {
        if mean.shape() != log_std.shape() {
            return Err(Error::Contract(format!(
                "mean {:?} and log_std {:?} disagree",
                mean.shape(),
                log_std.shape()
            )));
        }
        Ok(Self { mean, log_std })
    }

    /// Splits `(B, 2C, T)` statistics into mean and log-std halves.
    pub fn from_stats(stats: &Tensor) -> Result<Self> {
        let c = stats.dim(1)? / 2;
        Self::new(stats.narrow(1, 0, c)?.contiguous()?, stats.narrow(1, c, c)?.contiguous()?)
    }

    pub fn channels(&self) -> usize {
        self.mean.dim(1).unwrap_or(0)
    }

    /// `mean + exp(log_std) * eps`, masked.
    pub fn sample(&self, eps: &Tensor, mask: &Tensor) -> Result<LatentSequence> {
        let z = (&self.mean + (self.log_std.exp()? * eps)?)?.broadcast_mul(mask)?;
        Ok(LatentSequence { z })
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in [("mean", &self.mean), ("log_std", &self.log_std)] {
            if !all_finite(t)? {
                return Err(Error::Contract(format!("non-finite {name} in Gaussian sequence")));
            }
        }
        Ok(())
    }

    /// Batch item `b` as `T x C` matrices `(mean, log_std)`.
    pub fn to_matrices(&self, b: usize) -> Result<(Matrix, Matrix)> {
        Ok((to_frames(&self.mean, b)?, to_frames(&self.log_std, b)?))
    }
}

/// Latent frames `(B, C, T)`.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    pub z: Tensor,
}

impl LatentSequence {
    pub fn to_matrix(&self, b: usize) -> Result<Matrix> {
        to_frames(&self.z, b)
    }
}

pub(crate) fn all_finite(t: &Tensor) -> Result<bool> {
    let v: Vec<f64> = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

fn to_frames(t: &Tensor, b: usize) -> Result<Matrix> {
    let rows: Vec<Vec<f32>> = t.get(b)?.t()?.to_dtype(DType::F32)?.to_vec2()?;
    Ok(Matrix::from_rows(&rows))
}

/// WaveNet encoder for `q(z | y)` over linear-spectrogram frames.
#[derive(Debug, Clone)]
pub struct PosteriorEncoder {
    in_channels: usize,
    pre: Conv1d,
    enc: WaveNet,
    pub proj: Conv1d,
}

impl PosteriorEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &ParamBuilder<'_>,
        in_channels: usize,
        out_channels: usize,
        hidden: usize,
        kernel: usize,
        dilation_rate: usize,
        layers: usize,
        gin_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            in_channels,
            pre: Conv1d::new(&b.pp("pre"), in_channels, hidden, 1, 1, None)?,
            enc: WaveNet::new(&b.pp("enc"), hidden, kernel, dilation_rate, layers, gin_channels)?,
            proj: Conv1d::new(&b.pp("proj"), hidden, 2 * out_channels, 1, 1, None)?,
        })
    }

    /// `spec: (B, F, T)` magnitudes.
    pub fn forward(&self, spec: &Tensor, mask: &Tensor, g: Option<&Tensor>) -> Result<GaussianSequence> {
        let c = spec.dim(1)?;
        if c != self.in_channels {
            return Err(Error::Contract(format!(
                "posterior expects {} spectrogram bins, got {c}",
                self.in_channels
            )));
        }
        let x = self.pre.forward(spec)?.broadcast_mul(mask)?;
        let x = self.enc.forward(&x, mask, g)?;
        let stats = self.proj.forward(&x)?.broadcast_mul(mask)?;
        GaussianSequence::from_stats(&stats)
    }
}

/// Numerically stable softmax along the last axis.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub(crate) fn sinusoidal_positions(channels: usize, t: usize, dtype: DType) -> Result<Tensor> {
    let half = channels / 2;
    let mut data = vec![0.0f64; channels * t];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        for p in 0..t {
            data[i * t + p] = (p as f64 * freq).sin();
            data[(half + i) * t + p] = (p as f64 * freq).cos();
        }
    }
    Ok(Tensor::from_vec(data, (1, channels, t), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct Attention {
    heads: usize,
    q: Conv1d,
    k: Conv1d,
    v: Conv1d,
    o: Conv1d,
}

impl Attention {
    fn new(b: &ParamBuilder<'_>, hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Config(format!("{hidden} channels do not split into {heads} heads")));
        }
        Ok(Self {
            heads,
            q: Conv1d::new(&b.pp("q"), hidden, hidden, 1, 1, None)?,
            k: Conv1d::new(&b.pp("k"), hidden, hidden, 1, 1, None)?,
            v: Conv1d::new(&b.pp("v"), hidden, hidden, 1, 1, None)?,
            o: Conv1d::new(&b.pp("o"), hidden, hidden, 1, 1, None)?,
        })
    }

    /// `attn_mask: (B * heads, T, T)` of ones and zeros.
    fn forward(&self, x: &Tensor, attn_mask: &Tensor) -> Result<Tensor> {
        let (b, h, t) = x.dims3()?;
        let dk = h / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b * self.heads, dk, t))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (dk as f64).sqrt())?;
        let scores = ((scores * attn_mask)? + ((attn_mask - 1.0)? * 1e4)?)?;
        let p = softmax_last(&scores)?;
        let out = p.matmul(&v)?.transpose(1, 2)?.reshape((b, h, t))?;
        Ok(self.o.forward(&out)?)
    }
}

#[derive(Debug, Clone)]
struct TransformerLayer {
    attn: Attention,
    norm1: LayerNorm,
    ffn1: Conv1d,
    ffn2: Conv1d,
    norm2: LayerNorm,
}

impl TransformerLayer {
    fn forward(&self, x: &Tensor, mask: &Tensor, attn_mask: &Tensor) -> Result<Tensor> {
        let y = self.attn.forward(x, attn_mask)?;
        let x = self.norm1.forward(&(x + y)?)?;
        let y = self.ffn1.forward(&x.broadcast_mul(mask)?)?.relu()?;
        let y = self.ffn2.forward(&y.broadcast_mul(mask)?)?.broadcast_mul(mask)?;
        Ok(self.norm2.forward(&(x + y)?)?)
    }
}

/// Transformer encoder for `p(z | c_bnf, c_f0, speaker)`.
#[derive(Debug, Clone)]
pub struct PriorEncoder {
    bnf_dim: usize,
    hidden: usize,
    heads: usize,
    bnf_proj: Conv1d,
    spk_proj: Option<Conv1d>,
    layers: Vec<TransformerLayer>,
    pub proj: Conv1d,
}

impl PriorEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &ParamBuilder<'_>,
        bnf_dim: usize,
        out_channels: usize,
        hidden: usize,
        filter: usize,
        heads: usize,
        n_layers: usize,
        kernel: usize,
        gin_channels: usize,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let lb = b.pp(format!("layers.{i}"));
            layers.push(TransformerLayer {
                attn: Attention::new(&lb.pp("attn"), hidden, heads)?,
                norm1: LayerNorm::new(&lb.pp("norm1"), hidden)?,
                ffn1: Conv1d::new(&lb.pp("ffn1"), hidden, filter, kernel, 1, None)?,
                ffn2: Conv1d::new(&lb.pp("ffn2"), filter, hidden, kernel, 1, None)?,
                norm2: LayerNorm::new(&lb.pp("norm2"), hidden)?,
            });
        }
        let spk_proj = if gin_channels > 0 {
            Some(Conv1d::new(&b.pp("spk_proj"), gin_channels, hidden, 1, 1, None)?)
        } else {
            None
        };
        Ok(Self {
            bnf_dim,
            hidden,
            heads,
            bnf_proj: Conv1d::new(&b.pp("bnf_proj"), bnf_dim, hidden, 1, 1, None)?,
            spk_proj,
            layers,
            proj: Conv1d::new(&b.pp("proj"), hidden, 2 * out_channels, 1, 1, None)?,
        })
    }

    /// `bnf: (B, D, T)`, `pitch: (B, H, T)`, `g: (B, gin, 1)`.
    pub fn forward(
        &self,
        bnf: &Tensor,
        pitch: &Tensor,
        g: Option<&Tensor>,
        mask: &Tensor,
    ) -> Result<GaussianSequence> {
        let (b, d, t) = bnf.dims3()?;
        let (pb, ph, pt) = pitch.dims3()?;
        if d != self.bnf_dim || ph != self.hidden || pb != b || pt != t {
            return Err(Error::Contract(format!(
                "prior inputs disagree: bnf {:?}, pitch {:?} (expected D = {}, H = {})",
                bnf.shape(),
                pitch.shape(),
                self.bnf_dim,
                self.hidden
            )));
        }
        let mut x = (self.bnf_proj.forward(bnf)? + pitch)?;
        if let (Some(p), Some(g)) = (&self.spk_proj, g) {
            x = x.broadcast_add(&p.forward(g)?)?;
        }
        let x0 = x.broadcast_add(&sinusoidal_positions(self.hidden, t, x.dtype())?)?;
        let mut x = x0.broadcast_mul(mask)?;
        let m = mask.transpose(1, 2)?.broadcast_mul(mask)?;
        let attn_mask = m
            .unsqueeze(1)?
            .repeat((1, self.heads, 1, 1))?
            .reshape((b * self.heads, t, t))?;
        for layer in &self.layers {
            x = layer.forward(&x, mask, &attn_mask)?;
        }
        let x = x.broadcast_mul(mask)?;
        let stats = self.proj.forward(&x)?.broadcast_mul(mask)?;
        GaussianSequence::from_stats(&stats)
    }
}
