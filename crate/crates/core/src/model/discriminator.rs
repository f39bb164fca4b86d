use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv1d, ParamBuilder};

use super::decoder::LRELU_SLOPE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// Output channels of the strided period-discriminator convolutions.
    pub mpd_channels: Vec<usize>,
    pub msd_scales: usize,
    pub msd_channels: Vec<usize>,
    pub msd_kernels: Vec<usize>,
    pub msd_strides: Vec<usize>,
    pub msd_groups: Vec<usize>,
}

impl DiscriminatorConfig {
    pub fn hifigan() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            mpd_channels: vec![32, 128, 512, 1024],
            msd_scales: 3,
            msd_channels: vec![16, 64, 256, 1024, 1024, 1024],
            msd_kernels: vec![15, 41, 41, 41, 41, 5],
            msd_strides: vec![1, 4, 4, 4, 4, 1],
            msd_groups: vec![1, 4, 16, 64, 256, 1],
        }
    }

    pub fn desk() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            mpd_channels: vec![8, 16, 32, 32],
            msd_scales: 3,
            msd_channels: vec![8, 16, 32, 32, 32],
            msd_kernels: vec![15, 41, 41, 41, 5],
            msd_strides: vec![1, 4, 4, 4, 1],
            msd_groups: vec![1, 2, 4, 8, 1],
        }
    }

    pub fn n_discriminators(&self) -> usize {
        self.periods.len() + self.msd_scales
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.msd_channels.len();
        if self.msd_kernels.len() != n || self.msd_strides.len() != n || self.msd_groups.len() != n {
            return Err(Error::Config("scale-discriminator layer lists differ in length".into()));
        }
        if self.mpd_channels.is_empty() || n == 0 {
            return Err(Error::Config("discriminators need at least one layer".into()));
        }
        if self.periods.iter().any(|&p| p == 0) {
            return Err(Error::Config("periods must be >= 1".into()));
        }
        Ok(())
    }
}

/// Score maps and intermediate activations of every sub-discriminator.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub scores: Vec<Tensor>,
    pub features: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
struct PeriodDiscriminator {
    period: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl PeriodDiscriminator {
    fn new(b: &ParamBuilder<'_>, period: usize, channels: &[usize]) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv1d::grouped(&b.pp(format!("convs.{i}")), c_in, c, 5, 3, 2, 1)?);
            c_in = c;
        }
        convs.push(Conv1d::grouped(&b.pp(format!("convs.{}", channels.len())), c_in, c_in, 5, 1, 2, 1)?);
        let post = Conv1d::grouped(&b.pp("post"), c_in, 1, 3, 1, 1, 1)?;
        Ok(Self { period, convs, post })
    }

    /// Folds the waveform into `period` columns, each processed as its own
    /// batch item by a convolution along time.
    fn forward(&self, y: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, _, n) = y.dims3()?;
        let p = self.period;
        let pad = (p - n % p) % p;
        let y = if pad > 0 { y.pad_with_zeros(2, 0, pad)? } else { y.clone() };
        let rows = (n + pad) / p;
        let mut x = y
            .reshape((b, rows, p))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * p, 1, rows))?;
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for c in &self.convs {
            x = leaky_relu(&c.forward(&x)?, LRELU_SLOPE)?;
            features.push(x.clone());
        }
        let x = self.post.forward(&x)?;
        features.push(x.clone());
        let l = x.dim(2)?;
        Ok((x.reshape((b, p * l))?, features))
    }
}

#[derive(Debug, Clone)]
struct ScaleDiscriminator {
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl ScaleDiscriminator {
    fn new(b: &ParamBuilder<'_>, cfg: &DiscriminatorConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for i in 0..cfg.msd_channels.len() {
            let (c, k, s, g) = (cfg.msd_channels[i], cfg.msd_kernels[i], cfg.msd_strides[i], cfg.msd_groups[i]);
            let g = if c_in % g == 0 { g } else { 1 };
            convs.push(Conv1d::grouped(&b.pp(format!("convs.{i}")), c_in, c, k, s, (k - 1) / 2, g)?);
            c_in = c;
        }
        let post = Conv1d::grouped(&b.pp("post"), c_in, 1, 3, 1, 1, 1)?;
        Ok(Self { convs, post })
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut x = y.clone();
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for c in &self.convs {
            x = leaky_relu(&c.forward(&x)?, LRELU_SLOPE)?;
            features.push(x.clone());
        }
        let x = self.post.forward(&x)?;
        features.push(x.clone());
        Ok((x.flatten_from(1)?, features))
    }
}

/// Multi-period plus multi-scale discriminator bank.
#[derive(Debug, Clone)]
pub struct Discriminators {
    pub config: DiscriminatorConfig,
    mpd: Vec<PeriodDiscriminator>,
    msd: Vec<ScaleDiscriminator>,
    pool: Tensor,
}

impl Discriminators {
    pub fn new(b: &ParamBuilder<'_>, config: &DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let mpd = config
            .periods
            .iter()
            .map(|&p| PeriodDiscriminator::new(&b.pp(format!("mpd.{p}")), p, &config.mpd_channels))
            .collect::<Result<Vec<_>>>()?;
        let msd = (0..config.msd_scales)
            .map(|i| ScaleDiscriminator::new(&b.pp(format!("msd.{i}")), config))
            .collect::<Result<Vec<_>>>()?;
        let pool = Tensor::from_vec(vec![0.25f64; 4], (1, 1, 4), &Device::Cpu)?.to_dtype(b.dtype())?;
        Ok(Self {
            config: config.clone(),
            mpd,
            msd,
            pool,
        })
    }

    /// Average pooling with kernel 4, stride 2, padding 2 (padding counted).
    fn downsample(&self, y: &Tensor) -> Result<Tensor> {
        Ok(crate::nn::conv1d(y, &self.pool, 2, 2, 1, 1)?)
    }

    /// `y: (B, 1, N)`; period discriminators come first, then scales 1, 2, 4, ...
    pub fn forward(&self, y: &Tensor) -> Result<DiscriminatorOutput> {
        let mut scores = Vec::with_capacity(self.config.n_discriminators());
        let mut features = Vec::with_capacity(self.config.n_discriminators());
        for d in &self.mpd {
            let (s, f) = d.forward(y)?;
            scores.push(s);
            features.push(f);
        }
        let mut x = y.clone();
        for (i, d) in self.msd.iter().enumerate() {
            if i > 0 {
                x = self.downsample(&x)?;
            }
            let (s, f) = d.forward(&x)?;
            scores.push(s);
            features.push(f);
        }
        Ok(DiscriminatorOutput { scores, features })
    }
}
