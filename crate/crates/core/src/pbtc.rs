//! Parallel bank of transposed convolutions: a multi-scale embedding of a
//! quantized F0 stream.
//!
//! `one-hot(L) -> linear(F)` feeds `K` dilated transposed convolutions
//! (stride 1, `F` filters). Branch `k` produces `T + d_k (kernel - 1)`
//! frames, is brought back to `T` frames, projected to `proj_dim` and the
//! branches are summed.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Conv1d, ConvTranspose1d, Init, ParamBuilder, ParamStore};
use crate::pitch::QuantizedF0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeProjection {
    /// Drop `d (kernel - 1) / 2` frames from the front and the rest from the back.
    #[default]
    Truncate,
    /// Resample the `t'` frames to `T` by linear interpolation.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbtcConfig {
    pub n_bins: usize,
    pub branches: usize,
    pub filters: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub proj_dim: usize,
    pub time_project: TimeProjection,
}

impl PbtcConfig {
    /// `K` branches with dilations `1..=K`.
    pub fn new(n_bins: usize, branches: usize, filters: usize, kernel_size: usize, proj_dim: usize) -> Self {
        Self {
            n_bins,
            branches,
            filters,
            kernel_size,
            dilations: (1..=branches).collect(),
            proj_dim,
            time_project: TimeProjection::Truncate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.len() != self.branches {
            return Err(Error::Config(format!(
                "PBTC has {} branches but {} dilations",
                self.branches,
                self.dilations.len()
            )));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::Config("PBTC dilations must be >= 1".into()));
        }
        let mut sorted = self.dilations.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.dilations.len() {
            return Err(Error::Config("PBTC dilations must be distinct".into()));
        }
        if self.n_bins < 2 || self.filters == 0 || self.kernel_size == 0 || self.proj_dim == 0 {
            return Err(Error::Config("PBTC sizes must be positive (and L >= 2)".into()));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let (l, f, k, p) = (self.n_bins, self.filters, self.kernel_size, self.proj_dim);
        l * f + f + self.branches * (f * f * k + f) + self.branches * (f * p + p)
    }

    /// Length of branch `k` before the time projection.
    pub fn branch_len(&self, t: usize, branch: usize) -> usize {
        t + self.dilations[branch] * (self.kernel_size - 1)
    }
}

#[derive(Debug, Clone)]
pub struct Pbtc {
    pub config: PbtcConfig,
    /// Rows of the one-hot projection, `(L, F)`.
    pub embed: Tensor,
    pub embed_bias: Tensor,
    pub convs: Vec<ConvTranspose1d>,
    pub linears: Vec<Conv1d>,
}

impl Pbtc {
    /// Registers parameters under `b` (normally the `pbtc` namespace).
    pub fn new(b: &ParamBuilder<'_>, config: &PbtcConfig) -> Result<Self> {
        config.validate()?;
        let f = config.filters;
        let embed = b.get((config.n_bins, f), "proj.weight", Init::Normal(1.0 / (f as f64).sqrt()))?;
        let embed_bias = b.get(f, "proj.bias", Init::Zeros)?;
        let mut convs = Vec::with_capacity(config.branches);
        let mut linears = Vec::with_capacity(config.branches);
        for (k, &d) in config.dilations.iter().enumerate() {
            let bb = b.pp(format!("branch.{k}"));
            convs.push(ConvTranspose1d::new(&bb.pp("conv"), f, f, config.kernel_size, 1, d, None)?);
            linears.push(Conv1d::new(&bb.pp("linear"), f, config.proj_dim, 1, 1, None)?);
        }
        Ok(Self {
            config: config.clone(),
            embed,
            embed_bias,
            convs,
            linears,
        })
    }

    fn embed_bins(&self, bins: &Tensor) -> Result<Tensor> {
        let (b, t) = bins.dims2()?;
        let flat = bins.flatten_all()?;
        let rows = self.embed.index_select(&flat, 0)?;
        let x = rows
            .reshape((b, t, self.config.filters))?
            .transpose(1, 2)?
            .broadcast_add(&self.embed_bias.reshape((1, (), 1))?)?;
        Ok(x)
    }

    /// Untruncated branch outputs, each `(B, F, T + d_k (kernel - 1))`.
    pub fn branch_outputs_full(&self, bins: &Tensor) -> Result<Vec<Tensor>> {
        self.branch_outputs_masked(bins, None)
    }

    fn branch_outputs_masked(&self, bins: &Tensor, mask: Option<&Tensor>) -> Result<Vec<Tensor>> {
        self.check_bins(bins)?;
        let mut x = self.embed_bins(bins)?;
        if let Some(m) = mask {
            x = x.broadcast_mul(m)?;
        }
        self.convs
            .iter()
            .map(|c| c.forward_full(&x).map_err(Error::from))
            .collect()
    }

    fn check_bins(&self, bins: &Tensor) -> Result<()> {
        if bins.dtype() != DType::U32 {
            return Err(Error::Contract("PBTC input must be u32 bins".into()));
        }
        let max = bins.max_all()?.to_scalar::<u32>()?;
        if max as usize >= self.config.n_bins {
            return Err(Error::Contract(format!(
                "F0 bin {max} out of range for L = {}",
                self.config.n_bins
            )));
        }
        Ok(())
    }

    /// `bins: (B, T)` u32 → `(B, proj_dim, T)`.
    pub fn forward(&self, bins: &Tensor) -> Result<Tensor> {
        self.forward_masked(bins, None)
    }

    /// As [`Pbtc::forward`], with frames outside `mask: (B, 1, T)` silenced
    /// before the branches so padding cannot leak into valid frames.
    pub fn forward_masked(&self, bins: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (_, t) = bins.dims2()?;
        let full = self.branch_outputs_masked(bins, mask)?;
        let mut acc: Option<Tensor> = None;
        for (k, y) in full.into_iter().enumerate() {
            let projected = self.project_time(&y, t, k)?;
            let out = self.linears[k].forward(&projected)?;
            acc = Some(match acc {
                None => out,
                Some(a) => (a + out)?,
            });
        }
        acc.ok_or_else(|| Error::Config("PBTC needs at least one branch".into()))
    }

    fn project_time(&self, y: &Tensor, t: usize, branch: usize) -> Result<Tensor> {
        let full = y.dim(2)?;
        match self.config.time_project {
            TimeProjection::Truncate => {
                let extra = self.config.dilations[branch] * (self.config.kernel_size - 1);
                Ok(y.narrow(2, extra / 2, t)?)
            }
            TimeProjection::Linear => {
                let m = interpolation_matrix(full, t, y.dtype(), y.device())?;
                let (b, c, _) = y.dims3()?;
                Ok(y.reshape((b * c, full))?.matmul(&m)?.reshape((b, c, t))?)
            }
        }
    }
}

/// `(from, to)` matrix of linear-interpolation weights mapping endpoints to endpoints.
fn interpolation_matrix(from: usize, to: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut w = vec![0.0f64; from * to];
    for j in 0..to {
        let pos = if to == 1 {
            0.0
        } else {
            j as f64 * (from - 1) as f64 / (to - 1) as f64
        };
        let i = (pos.floor() as usize).min(from - 1);
        let frac = pos - i as f64;
        w[i * to + j] += 1.0 - frac;
        if i + 1 < from {
            w[(i + 1) * to + j] += frac;
        }
    }
    Ok(Tensor::from_vec(w, (from, to), device)?.to_dtype(dtype)?)
}

/// Per-frame pitch embedding, `T x proj_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchEmbedding {
    pub frames: Matrix,
}

/// Fresh, seeded parameters for a standalone bank under the `pbtc` namespace.
pub fn pbtc_init(config: &PbtcConfig, seed: u64) -> Result<(ParamStore, Pbtc)> {
    let store = ParamStore::new(seed, DType::F32);
    let pbtc = Pbtc::new(&store.root().pp("pbtc"), config)?;
    Ok((store, pbtc))
}

/// Embeds a single contour.
pub fn pbtc_forward(q: &QuantizedF0, pbtc: &Pbtc) -> Result<PitchEmbedding> {
    if q.n_bins as usize != pbtc.config.n_bins {
        return Err(Error::Contract(format!(
            "contour quantized to {} bins, bank expects {}",
            q.n_bins, pbtc.config.n_bins
        )));
    }
    let out = pbtc.forward(&bins_tensor(&[q])?)?;
    let rows: Vec<Vec<f32>> = out.squeeze(0)?.t()?.to_dtype(DType::F32)?.to_vec2()?;
    Ok(PitchEmbedding {
        frames: Matrix::from_rows(&rows),
    })
}

/// Stacks quantized contours of equal length into a `(B, T)` u32 tensor.
pub fn bins_tensor(batch: &[&QuantizedF0]) -> Result<Tensor> {
    let t = batch.first().map_or(0, |q| q.bins.len());
    if batch.iter().any(|q| q.bins.len() != t) {
        return Err(Error::Contract("quantized F0 batch has ragged lengths".into()));
    }
    let data: Vec<u32> = batch.iter().flat_map(|q| q.bins.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (batch.len(), t), &Device::Cpu)?)
}
