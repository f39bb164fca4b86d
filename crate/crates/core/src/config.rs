//! Global run configuration: one TOML file with a section per module, laid
//! over a named profile and then over `SVCFORGE_<SECTION>__<KEY>` variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{MelConfig, StftConfig};
use crate::content::EncoderKind;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::pbtc::PbtcConfig;
use crate::perturb::{AugmentationSpec, Interval};
use crate::pitch::PitchConfig;
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "SVCFORGE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Vits,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "vits" => Ok(Profile::Vits),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or vits)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioSection {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub n_mels: usize,
    pub mel_fmin: f32,
    pub mel_fmax: f32,
}

impl Default for AudioSection {
    fn default() -> Self {
        let stft = StftConfig::default();
        let mel = MelConfig::default();
        Self {
            sample_rate: 24_000,
            n_fft: stft.n_fft,
            hop: stft.hop,
            win: stft.win,
            n_mels: mel.n_mels,
            mel_fmin: mel.fmin,
            mel_fmax: mel.fmax,
        }
    }
}

impl AudioSection {
    pub fn stft(&self) -> StftConfig {
        StftConfig {
            n_fft: self.n_fft,
            hop: self.hop,
            win: self.win,
        }
    }

    pub fn mel(&self) -> MelConfig {
        MelConfig {
            n_mels: self.n_mels,
            fmin: self.mel_fmin,
            fmax: self.mel_fmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        self.stft().validate()?;
        self.mel().validate(self.sample_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    /// Semitone range of the pitch perturbation applied before BNF extraction.
    pub bnf_pitch_range: Interval,
    /// Draw the BNF-path perturbation once per utterance instead of per example.
    pub perturb_once: bool,
    pub perturb_at_inference: bool,
    pub augmentation: AugmentationSpec,
}

impl Default for PerturbSection {
    fn default() -> Self {
        Self {
            bnf_pitch_range: Interval::new(-12.0, 12.0),
            perturb_once: false,
            perturb_at_inference: false,
            augmentation: AugmentationSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentSection {
    pub encoder: EncoderKind,
    pub dim: usize,
    pub layer: usize,
    /// External extractor invoked for audio with no sidecar on disk.
    pub tool: Option<PathBuf>,
    pub mock_seed: u64,
}

impl Default for ContentSection {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Mock,
            dim: 1024,
            layer: 20,
            tool: None,
            mock_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub seed: u64,
    pub batch_size: usize,
    /// Crop length; rounded down to whole hops.
    pub segment_samples: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Per-step multiplicative learning-rate decay; 1 disables it.
    pub lr_decay: f64,
    pub warmup_steps: u64,
    pub pretrain_steps: u64,
    pub adapt_steps: u64,
    pub wreg_lambda: f64,
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub reset_discriminator_per_stage: bool,
    pub cache_features: bool,
}

impl TrainingSection {
    pub fn vits() -> Self {
        Self {
            seed: 1234,
            batch_size: 96,
            segment_samples: 32_768,
            learning_rate: 1e-4,
            adam_betas: (0.8, 0.99),
            adam_eps: 1e-9,
            lr_decay: 1.0,
            warmup_steps: 400_000,
            pretrain_steps: 200_000,
            adapt_steps: 50_000,
            wreg_lambda: 1e-3,
            log_every: 100,
            checkpoint_every: 10_000,
            reset_discriminator_per_stage: false,
            cache_features: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            batch_size: 2,
            segment_samples: 8192,
            learning_rate: 3e-3,
            warmup_steps: 50,
            pretrain_steps: 50,
            adapt_steps: 50,
            log_every: 1,
            checkpoint_every: 0,
            ..Self::vits()
        }
    }

    pub fn segment_frames(&self, hop: usize) -> usize {
        self.segment_samples / hop
    }

    pub fn validate(&self, hop: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.segment_frames(hop) == 0 {
            return Err(Error::Config(format!(
                "segment of {} samples is shorter than one hop ({hop})",
                self.segment_samples
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("adam betas ({b1}, {b2}) outside [0, 1)")));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        if !(self.wreg_lambda >= 0.0) {
            return Err(Error::Config("wreg_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub profile: Profile,
    pub audio: AudioSection,
    pub pitch: PitchConfig,
    pub perturb: PerturbSection,
    pub content: ContentSection,
    pub pbtc: PbtcConfig,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub training: TrainingSection,
}

impl Config {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Vits => Self {
                profile,
                audio: AudioSection::default(),
                pitch: PitchConfig::default(),
                perturb: PerturbSection::default(),
                content: ContentSection::default(),
                pbtc: PbtcConfig::new(256, 10, 256, 3, 192),
                model: ModelConfig::vits(),
                losses: LossConfig::vits(),
                training: TrainingSection::vits(),
            },
            Profile::Desk => Self {
                profile,
                audio: AudioSection::default(),
                pitch: PitchConfig::default(),
                perturb: PerturbSection::default(),
                content: ContentSection::default(),
                pbtc: PbtcConfig::new(256, 10, 32, 3, 64),
                model: ModelConfig::desk(),
                losses: LossConfig::desk(),
                training: TrainingSection::desk(),
            },
        }
    }

    /// Profile defaults, then `file`, then the process environment.
    pub fn load(profile: Profile, file: Option<&Path>) -> Result<Self> {
        let text = match file {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(profile, text.as_deref(), std::env::vars())
    }

    /// Layers `text` and `env` over the profile. A `profile` key in the file
    /// selects the base profile when present.
    pub fn resolve(
        profile: Profile,
        text: Option<&str>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let overlay: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| Error::Config(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        let profile = match overlay.get("profile") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            None => profile,
        };
        let mut merged = toml::Table::try_from(Self::profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay, "")?;
        for (key, value) in env {
            if let Some(path) = key.strip_prefix(ENV_PREFIX) {
                apply_env(&mut merged, path, &value)?;
            }
        }
        let cfg: Config = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.perturb.augmentation.validate()?;
        if !self.perturb.bnf_pitch_range.contains(0.0) {
            return Err(Error::Config("bnf_pitch_range must contain 0".into()));
        }
        self.pbtc.validate()?;
        if self.pbtc.n_bins != self.pitch.n_bins as usize {
            return Err(Error::Config(format!(
                "pbtc.n_bins {} differs from pitch.n_bins {}",
                self.pbtc.n_bins, self.pitch.n_bins
            )));
        }
        self.model.validate()?;
        if self.model.hop() != self.audio.hop {
            return Err(Error::Config(format!(
                "decoder upsampling product {} differs from audio hop {}",
                self.model.hop(),
                self.audio.hop
            )));
        }
        if self.pbtc.proj_dim != self.model.hidden_channels {
            return Err(Error::Config(format!(
                "pbtc.proj_dim {} differs from model.hidden_channels {}",
                self.pbtc.proj_dim, self.model.hidden_channels
            )));
        }
        self.losses.validate()?;
        self.training.validate(self.audio.hop)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table, path: &str) -> Result<()> {
    for (key, value) in overlay {
        let here = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &here)?,
            (Some(slot), v) => *slot = v,
            (None, v) if is_optional(&here) => {
                base.insert(key, v);
            }
            (None, _) => return Err(Error::Config(format!("unknown config key `{here}`"))),
        }
    }
    Ok(())
}

/// Keys whose defaults are absent from the serialized profile.
fn is_optional(path: &str) -> bool {
    matches!(path, "content.tool")
}

/// `SVCFORGE_TRAINING__LEARNING_RATE=3e-4` sets `training.learning_rate`.
/// The value is parsed as a TOML literal, falling back to a bare string.
fn apply_env(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<String> = path.split("__").map(|k| k.to_ascii_lowercase()).collect();
    let value = parse_literal(raw);
    let mut overlay = toml::Table::new();
    let mut cursor = &mut overlay;
    for k in &keys[..keys.len() - 1] {
        cursor = cursor
            .entry(k.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("fresh table");
    }
    cursor.insert(keys[keys.len() - 1].clone(), value);
    merge(table, overlay, "").map_err(|e| Error::Config(format!("{ENV_PREFIX}{path}: {e}")))
}

fn parse_literal(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
