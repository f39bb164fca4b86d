//! The conversion networks: posterior and prior encoders, coupling flow,
//! excitation source, neural-filter decoder and waveform discriminators.

mod decoder;
mod discriminator;
mod encoders;
mod flow;
mod frontend;
mod source;
mod speakers;
mod wavenet;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use decoder::{upsample_kernel, Decoder};
pub use discriminator::{DiscriminatorConfig, DiscriminatorOutput, Discriminators};
pub use encoders::{GaussianSequence, LatentSequence, PosteriorEncoder, PriorEncoder};
pub use flow::{AffineCoupling, Flow};
pub use frontend::SpectralFrontEnd;
pub use source::{source_module, source_module_with_phase, ExcitationSignal, SourceConfig};
pub use speakers::{SpeakerRegistry, SpeakerTable};
pub use wavenet::WaveNet;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::pbtc::{Pbtc, PbtcConfig};

/// Parameter namespaces trained with the generator.
pub const GENERATOR_PREFIXES: [&str; 6] = ["posterior.", "prior.", "pbtc.", "flow.", "decoder.", "speakers."];
pub const DISCRIMINATOR_PREFIXES: [&str; 1] = ["disc."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent channels `C`.
    pub inter_channels: usize,
    pub hidden_channels: usize,
    pub filter_channels: usize,
    pub n_heads: usize,
    pub prior_layers: usize,
    pub prior_kernel: usize,
    pub posterior_layers: usize,
    pub posterior_kernel: usize,
    pub posterior_dilation_rate: usize,
    pub flow_couplings: usize,
    pub flow_layers: usize,
    pub flow_kernel: usize,
    pub gin_channels: usize,
    pub max_speakers: usize,
    pub speaker_in_posterior: bool,
    pub speaker_in_flow: bool,
    pub speaker_in_decoder: bool,
    pub upsample_rates: Vec<usize>,
    pub upsample_initial_channel: usize,
    pub resblock_kernel_sizes: Vec<usize>,
    pub resblock_dilations: Vec<Vec<usize>>,
    pub excitation_amplitude: f32,
    pub excitation_noise_std: f32,
    pub prior_temperature: f32,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    pub fn vits() -> Self {
        Self {
            inter_channels: 192,
            hidden_channels: 192,
            filter_channels: 768,
            n_heads: 2,
            prior_layers: 6,
            prior_kernel: 3,
            posterior_layers: 16,
            posterior_kernel: 5,
            posterior_dilation_rate: 1,
            flow_couplings: 4,
            flow_layers: 4,
            flow_kernel: 5,
            gin_channels: 256,
            max_speakers: 256,
            speaker_in_posterior: true,
            speaker_in_flow: true,
            speaker_in_decoder: true,
            upsample_rates: vec![5, 4, 4, 3],
            upsample_initial_channel: 512,
            resblock_kernel_sizes: vec![3, 7, 11],
            resblock_dilations: vec![vec![1, 3, 5]; 3],
            excitation_amplitude: 0.1,
            excitation_noise_std: 0.003,
            prior_temperature: 0.667,
            discriminator: DiscriminatorConfig::hifigan(),
        }
    }

    pub fn desk() -> Self {
        Self {
            inter_channels: 64,
            hidden_channels: 64,
            filter_channels: 128,
            prior_layers: 2,
            posterior_layers: 4,
            flow_layers: 2,
            gin_channels: 32,
            max_speakers: 64,
            upsample_rates: vec![8, 6, 5],
            upsample_initial_channel: 64,
            resblock_kernel_sizes: vec![3, 7],
            resblock_dilations: vec![vec![1, 3]; 2],
            discriminator: DiscriminatorConfig::desk(),
            ..Self::vits()
        }
    }

    /// Minimal sizes for gradient checks and fast unit tests (hop 4).
    pub fn tiny() -> Self {
        Self {
            inter_channels: 4,
            hidden_channels: 8,
            filter_channels: 8,
            n_heads: 2,
            prior_layers: 1,
            prior_kernel: 3,
            posterior_layers: 2,
            posterior_kernel: 3,
            posterior_dilation_rate: 2,
            flow_couplings: 2,
            flow_layers: 2,
            flow_kernel: 3,
            gin_channels: 4,
            max_speakers: 4,
            upsample_rates: vec![2, 2],
            upsample_initial_channel: 8,
            resblock_kernel_sizes: vec![3, 5],
            resblock_dilations: vec![vec![1, 2], vec![1]],
            discriminator: DiscriminatorConfig {
                periods: vec![2, 3, 5, 7, 11],
                mpd_channels: vec![4, 4],
                msd_scales: 3,
                msd_channels: vec![4, 4],
                msd_kernels: vec![5, 5],
                msd_strides: vec![1, 2],
                msd_groups: vec![1, 2],
            },
            ..Self::vits()
        }
    }

    pub fn hop(&self) -> usize {
        self.upsample_rates.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inter_channels % 2 != 0 {
            return Err(Error::Config("inter_channels must be even".into()));
        }
        if self.n_heads == 0 || self.hidden_channels % self.n_heads != 0 {
            return Err(Error::Config("hidden_channels must divide into n_heads".into()));
        }
        if self.upsample_rates.is_empty() || self.upsample_rates.contains(&0) {
            return Err(Error::Config("upsample_rates must be non-empty and positive".into()));
        }
        if self.max_speakers == 0 {
            return Err(Error::Config("max_speakers must be positive".into()));
        }
        if !(self.prior_temperature >= 0.0) {
            return Err(Error::Config("prior_temperature must be >= 0".into()));
        }
        self.discriminator.validate()
    }

    pub fn source_config(&self, sample_rate: u32) -> SourceConfig {
        SourceConfig {
            sample_rate,
            amplitude: self.excitation_amplitude,
            noise_std: self.excitation_noise_std,
            ..SourceConfig::default()
        }
    }
}

/// Sizes fixed by the audio front-end and content encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub spec_channels: usize,
    pub bnf_dim: usize,
    pub hop: usize,
}

/// All networks over one parameter store.
pub struct SvcModel {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub store: ParamStore,
    pub posterior: PosteriorEncoder,
    pub prior: PriorEncoder,
    pub pbtc: Pbtc,
    pub flow: Flow,
    pub decoder: Decoder,
    pub speakers: SpeakerTable,
    pub disc: Discriminators,
}

impl SvcModel {
    pub fn new(store: ParamStore, config: &ModelConfig, pbtc: &PbtcConfig, dims: ModelDims) -> Result<Self> {
        config.validate()?;
        if config.hop() != dims.hop {
            return Err(Error::Config(format!(
                "upsample rates multiply to {}, frame hop is {}",
                config.hop(),
                dims.hop
            )));
        }
        if pbtc.proj_dim != config.hidden_channels {
            return Err(Error::Config(format!(
                "pitch embedding width {} must equal hidden_channels {}",
                pbtc.proj_dim, config.hidden_channels
            )));
        }
        let root = store.root();
        let c = config;
        let gin = c.gin_channels;
        let site = |on: bool| if on { gin } else { 0 };
        let posterior = PosteriorEncoder::new(
            &root.pp("posterior"),
            dims.spec_channels,
            c.inter_channels,
            c.hidden_channels,
            c.posterior_kernel,
            c.posterior_dilation_rate,
            c.posterior_layers,
            site(c.speaker_in_posterior),
        )?;
        let prior = PriorEncoder::new(
            &root.pp("prior"),
            dims.bnf_dim,
            c.inter_channels,
            c.hidden_channels,
            c.filter_channels,
            c.n_heads,
            c.prior_layers,
            c.prior_kernel,
            gin,
        )?;
        let pbtc = Pbtc::new(&root.pp("pbtc"), pbtc)?;
        let flow = Flow::new(
            &root.pp("flow"),
            c.inter_channels,
            c.hidden_channels,
            c.flow_kernel,
            c.flow_layers,
            c.flow_couplings,
            site(c.speaker_in_flow),
        )?;
        let decoder = Decoder::new(
            &root.pp("decoder"),
            c.inter_channels,
            c.upsample_initial_channel,
            &c.upsample_rates,
            &c.resblock_kernel_sizes,
            &c.resblock_dilations,
            site(c.speaker_in_decoder),
        )?;
        let speakers = SpeakerTable::new(&root.pp("speakers"), c.max_speakers, gin)?;
        let disc = Discriminators::new(&root.pp("disc"), &c.discriminator)?;
        Ok(Self {
            config: c.clone(),
            dims,
            store,
            posterior,
            prior,
            pbtc,
            flow,
            decoder,
            speakers,
            disc,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn site<'a>(&self, on: bool, g: &'a Tensor) -> Option<&'a Tensor> {
        on.then_some(g)
    }

    pub fn speaker_embedding(&self, indices: &[u32]) -> Result<Tensor> {
        self.speakers.forward(indices)
    }

    pub fn posterior_encode(&self, spec: &Tensor, mask: &Tensor, g: &Tensor) -> Result<GaussianSequence> {
        self.posterior.forward(spec, mask, self.site(self.config.speaker_in_posterior, g))
    }

    /// `bins: (B, T)` quantized F0.
    pub fn prior_encode(&self, bnf: &Tensor, bins: &Tensor, g: &Tensor, mask: &Tensor) -> Result<GaussianSequence> {
        let pitch = self.pbtc.forward_masked(bins, Some(mask))?;
        self.prior.forward(bnf, &pitch, Some(g), mask)
    }

    pub fn flow_forward(&self, z: &LatentSequence, mask: &Tensor, g: &Tensor) -> Result<(LatentSequence, Tensor)> {
        self.flow.forward(z, mask, self.site(self.config.speaker_in_flow, g))
    }

    pub fn flow_inverse(&self, z: &LatentSequence, mask: &Tensor, g: &Tensor) -> Result<LatentSequence> {
        self.flow.inverse(z, mask, self.site(self.config.speaker_in_flow, g))
    }

    pub fn decode(&self, z: &Tensor, excitation: &Tensor, g: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z, excitation, self.site(self.config.speaker_in_decoder, g))
    }

    pub fn discriminate(&self, y: &Tensor) -> Result<DiscriminatorOutput> {
        self.disc.forward(y)
    }

    pub fn generator_params(&self) -> Vec<(String, candle_core::Var)> {
        self.store.vars_with_prefix(&GENERATOR_PREFIXES)
    }

    pub fn discriminator_params(&self) -> Vec<(String, candle_core::Var)> {
        self.store.vars_with_prefix(&DISCRIMINATOR_PREFIXES)
    }
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize, usize), dtype: DType) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2;
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Excitation samples as a `(B, 1, N)` tensor.
pub fn excitation_tensor(batch: &[ExcitationSignal], dtype: DType) -> Result<Tensor> {
    let n = batch.first().map_or(0, ExcitationSignal::len);
    if batch.iter().any(|e| e.len() != n) {
        return Err(Error::Contract("excitation batch has ragged lengths".into()));
    }
    let data: Vec<f32> = batch.iter().flat_map(|e| e.samples.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (batch.len(), 1, n), &Device::Cpu)?.to_dtype(dtype)?)
}
