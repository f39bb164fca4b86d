//! Any-to-one conversion: content and pitch from the source, timbre and F0
//! range from the target speaker.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{load_wav, save_wav, Waveform};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::content::{align_to_grid, extract_bnf, ContentEncoder, ContentInput};
use crate::model::{excitation_tensor, randn, source_module, GaussianSequence, LatentSequence, SvcModel};
use crate::pbtc::bins_tensor;
use crate::perturb::pitch_perturb;
use crate::pitch::{extract_f0, f0_statistics, pooled_statistics, quantize_f0, shift_f0_with_fallback, upsample_f0, F0Contour, F0Stats, QuantizedF0};
use crate::training::{build_encoder, model_from_checkpoint, read_manifest, FeatureExtractor};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionRequest {
    pub source: PathBuf,
    pub speaker: String,
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub f0_shift: bool,
    pub output: Option<PathBuf>,
}

/// The converted clip plus the intermediate streams it was made from.
#[derive(Debug, Clone)]
pub struct ConversionOutput {
    pub waveform: Waveform,
    /// Content features on the frame grid, as fed to the prior.
    pub bnf: Matrix,
    /// F0 after shifting (or the source F0 when shifting was skipped).
    pub f0: F0Contour,
    pub bins: QuantizedF0,
    pub excitation: Vec<f32>,
    pub warnings: Vec<String>,
}

/// A loaded generator ready for repeated conversions.
pub struct Converter {
    pub meta: CheckpointMeta,
    pub model: SvcModel,
    encoder: Box<dyn ContentEncoder>,
}

impl Converter {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load_generator(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            meta: ck.meta.clone(),
            model: model_from_checkpoint(ck)?,
            encoder: build_encoder(&ck.meta.config),
        })
    }

    /// Converts `req.source`, writing `req.output` when set.
    pub fn convert(&self, req: &ConversionRequest) -> Result<ConversionOutput> {
        let w = load_wav(&req.source, self.meta.config.audio.sample_rate)?;
        let out = self.convert_waveform(&w, Some(&req.source), &req.speaker, req.seed, req.f0_shift)?;
        if let Some(path) = &req.output {
            save_wav(path, &out.waveform)?;
        }
        Ok(out)
    }

    pub fn convert_waveform(
        &self,
        w: &Waveform,
        source: Option<&Path>,
        speaker: &str,
        seed: u64,
        f0_shift: bool,
    ) -> Result<ConversionOutput> {
        let cfg = &self.meta.config;
        let index = self.meta.speakers.index(speaker)?;
        if w.sample_rate != cfg.audio.sample_rate {
            return Err(Error::Contract(format!(
                "source is {} Hz, model runs at {} Hz",
                w.sample_rate, cfg.audio.sample_rate
            )));
        }
        if w.is_empty() {
            return Err(Error::EmptyInput("source clip has no samples".into()));
        }
        let hop = cfg.audio.hop;
        let frames = w.len() / hop + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut warnings = Vec::new();

        let bnf = if cfg.perturb.perturb_at_inference {
            let (p, _) = pitch_perturb(w, cfg.perturb.bnf_pitch_range, &mut rng)?;
            extract_bnf(ContentInput { waveform: &p, source: None }, self.encoder.as_ref())?
        } else {
            extract_bnf(ContentInput { waveform: w, source }, self.encoder.as_ref())?
        };
        let bnf = align_to_grid(&bnf, frames);

        let f0 = extract_f0(w, hop, cfg.pitch.fmin, cfg.pitch.fmax, cfg.pitch.yin_threshold)?;
        let f0 = if f0_shift {
            let target = self
                .meta
                .target_stats
                .get(speaker)
                .ok_or_else(|| Error::Config(format!("checkpoint stores no F0 statistics for `{speaker}`")))?;
            match f0_statistics(&f0) {
                Ok(src) => {
                    let shifted = shift_f0_with_fallback(&f0, &src, target, &cfg.pitch);
                    if shifted.mean_only_fallback {
                        warnings.push("source F0 has zero spread; matched the mean only".to_string());
                    }
                    shifted.contour
                }
                Err(Error::NoVoicedFrames) => {
                    warnings.push("source is fully unvoiced; F0 left unshifted".to_string());
                    f0
                }
                Err(e) => return Err(e),
            }
        } else {
            f0
        };
        for w in &warnings {
            log::warn!("{}", serde_json::json!({ "warning": w, "speaker": speaker }));
        }
        let bins = quantize_f0(&f0, cfg.pitch.n_bins, cfg.pitch.fmin, cfg.pitch.fmax)?;

        let m = &self.model;
        let dev = Device::Cpu;
        let bnf_t = Tensor::from_vec(bnf.transposed().into_vec(), (1, bnf.cols(), frames), &dev)?;
        let mask = Tensor::ones((1, 1, frames), DType::F32, &dev)?;
        let g = m.speaker_embedding(&[index])?;
        let p = m.prior_encode(&bnf_t, &bins_tensor(&[&bins])?, &g, &mask)?;
        let z_p = sample_prior(&p, cfg.model.prior_temperature, &mut rng)?;
        let z = m.flow_inverse(&z_p, &mask, &g)?;
        let excitation = source_module(&upsample_f0(&f0), &cfg.model.source_config(cfg.audio.sample_rate), &mut rng)?;
        let y = m.decode(&z.z, &excitation_tensor(std::slice::from_ref(&excitation), DType::F32)?, &g)?;
        let samples: Vec<f32> = y.flatten_all()?.to_vec1()?;
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Contract("decoder produced non-finite samples".into()));
        }
        Ok(ConversionOutput {
            waveform: Waveform::new(samples, cfg.audio.sample_rate)?,
            bnf,
            f0,
            bins,
            excitation: excitation.samples,
            warnings,
        })
    }
}

/// `mean + temperature * std * eps`; temperature 0 gives the mean.
fn sample_prior(p: &GaussianSequence, temperature: f32, rng: &mut ChaCha8Rng) -> Result<LatentSequence> {
    let eps = randn(rng, p.mean.dims3()?, p.mean.dtype())?;
    let z = (&p.mean + (p.log_std.exp()? * eps)?.affine(temperature as f64, 0.0)?)?;
    Ok(LatentSequence { z })
}

/// Loads the checkpoint and converts one clip.
pub fn convert(req: &ConversionRequest) -> Result<Waveform> {
    Ok(Converter::load(&req.checkpoint)?.convert(req)?.waveform)
}

/// Pooled voiced-frame log-F0 statistics over every clip in `manifest`.
pub fn compute_target_stats(manifest: &Path, cfg: &crate::config::Config) -> Result<F0Stats> {
    let entries = read_manifest(manifest)?;
    let fx = FeatureExtractor::new(cfg);
    let contours = entries
        .iter()
        .map(|e| fx.f0_for(e, &fx.load(&e.wav)?))
        .collect::<Result<Vec<_>>>()?;
    pooled_statistics(&contours)
}
