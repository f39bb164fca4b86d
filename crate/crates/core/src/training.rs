//! Stage orchestration: data loading, the alternating discriminator and
//! generator updates, checkpoints and the loss log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{linear_spectrogram, load_wav, Waveform};
use crate::checkpoint::{Checkpoint, CheckpointMeta, OptimizerSnapshot, OptimizerState, RngState, FORMAT_VERSION};
use crate::config::Config;
use crate::content::{align_to_grid, extract_bnf, BnfSequence, ContentEncoder, ContentInput, EncoderKind, MockEncoder, SidecarEncoder};
use crate::losses::{adv_d, adv_g, feature_matching, kl_loss, recon_loss, total_g, weight_reg, GeneratorTerms, LossReport};
use crate::model::{
    excitation_tensor, randn, source_module, ModelDims, SpeakerRegistry, SpectralFrontEnd, SvcModel, DISCRIMINATOR_PREFIXES,
};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::pbtc::bins_tensor;
use crate::perturb::{augment, pitch_perturb, AugmentationSpec};
use crate::pitch::{extract_f0, pooled_statistics, quantize_f0, upsample_f0, F0Contour, F0Stats};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Pretrain,
    Adapt,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Pretrain => "pretrain",
            Stage::Adapt => "adapt",
        }
    }

    fn stream(&self) -> u64 {
        match self {
            Stage::Warmup => 1,
            Stage::Pretrain => 2,
            Stage::Adapt => 3,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Stage::Warmup),
            "pretrain" => Ok(Stage::Pretrain),
            "adapt" => Ok(Stage::Adapt),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// One manifest line: `wav<TAB>speaker[<TAB>f0[<TAB>bnf]]`. Empty optional
/// fields and `-` mean "not cached".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub wav: PathBuf,
    pub speaker: String,
    pub f0: Option<PathBuf>,
    pub bnf: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn new(wav: impl Into<PathBuf>, speaker: impl Into<String>) -> Self {
        Self {
            wav: wav.into(),
            speaker: speaker.into(),
            f0: None,
            bnf: None,
        }
    }
}

/// Relative paths resolve against the manifest's directory; `#` starts a
/// comment line.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &str| -> Option<PathBuf> {
        match p.trim() {
            "" | "-" => None,
            p => Some(base.join(p)),
        }
    };
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 4 || fields[1].trim().is_empty() {
            return Err(Error::Format(format!(
                "{}:{}: expected wav<TAB>speaker[<TAB>f0[<TAB>bnf]]",
                path.display(),
                n + 1
            )));
        }
        entries.push(ManifestEntry {
            wav: resolve(fields[0]).ok_or_else(|| Error::Format(format!("{}:{}: empty wav path", path.display(), n + 1)))?,
            speaker: fields[1].trim().to_string(),
            f0: fields.get(2).and_then(|p| resolve(p)),
            bnf: fields.get(3).and_then(|p| resolve(p)),
        });
    }
    if entries.is_empty() {
        return Err(Error::Config(format!("manifest {} lists no clips", path.display())));
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let opt = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", e.wav.display(), e.speaker, opt(&e.f0), opt(&e.bnf)));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: Stage,
    pub manifest: PathBuf,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub augmentation: Option<AugmentationSpec>,
    pub wreg_lambda: f64,
    pub init_from: Option<PathBuf>,
    /// Mid-stage checkpoint of this same stage to continue from.
    pub resume_from: Option<PathBuf>,
    /// Final checkpoint; periodic ones are written next to it.
    pub output: Option<PathBuf>,
    /// Line-delimited JSON loss log, appended to.
    pub log: Option<PathBuf>,
    pub seed: u64,
    pub config: Config,
}

impl StageConfig {
    /// Stage defaults from the global config.
    pub fn new(stage: Stage, manifest: impl Into<PathBuf>, config: &Config) -> Self {
        let t = &config.training;
        let (steps, augmentation, wreg_lambda) = match stage {
            Stage::Warmup => (t.warmup_steps, None, 0.0),
            Stage::Pretrain => (t.pretrain_steps, None, 0.0),
            Stage::Adapt => (t.adapt_steps, Some(config.perturb.augmentation.clone()), t.wreg_lambda),
        };
        Self {
            stage,
            manifest: manifest.into(),
            steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_betas: t.adam_betas,
            augmentation,
            wreg_lambda,
            init_from: None,
            resume_from: None,
            output: None,
            log: None,
            seed: t.seed,
            config: config.clone(),
        }
    }

    pub fn validate(&self, has_init: bool) -> Result<()> {
        if self.stage == Stage::Adapt && !has_init {
            return Err(Error::Config("adapt stage requires init_from".into()));
        }
        if self.wreg_lambda != 0.0 && self.stage != Stage::Adapt {
            return Err(Error::Config(format!(
                "wreg_lambda is only allowed in adapt (got {} in {})",
                self.wreg_lambda, self.stage
            )));
        }
        if !(self.wreg_lambda >= 0.0 && self.wreg_lambda.is_finite()) {
            return Err(Error::Config("wreg_lambda must be finite and non-negative".into()));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        let mut training = self.config.training.clone();
        training.batch_size = self.batch_size;
        training.learning_rate = self.learning_rate;
        training.adam_betas = self.adam_betas;
        training.validate(self.config.audio.hop)?;
        self.config.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.config.training.adam_eps,
            lr_decay: self.config.training.lr_decay,
        }
    }
}

pub fn model_dims(cfg: &Config) -> ModelDims {
    ModelDims {
        spec_channels: cfg.audio.n_fft / 2 + 1,
        bnf_dim: cfg.content.dim,
        hop: cfg.audio.hop,
    }
}

pub fn build_encoder(cfg: &Config) -> Box<dyn ContentEncoder> {
    match cfg.content.encoder {
        EncoderKind::Mock => Box::new(MockEncoder::new(cfg.content.mock_seed, cfg.content.dim)),
        EncoderKind::Sidecar => Box::new(SidecarEncoder::new(cfg.content.dim, cfg.content.layer, cfg.content.tool.clone())),
    }
}

/// Freshly initialized model for `cfg`.
pub fn init_model(cfg: &Config, seed: u64) -> Result<SvcModel> {
    SvcModel::new(ParamStore::new(seed, DType::F32), &cfg.model, &cfg.pbtc, model_dims(cfg))
}

/// Model with every parameter present in `ck` restored; anything absent
/// (the discriminators after a generator-only load) stays freshly initialized.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<SvcModel> {
    let cfg = &ck.meta.config;
    let model = SvcModel::new(ParamStore::new(0, DType::F32), &cfg.model, &cfg.pbtc, ck.meta.dims)?;
    model.store.assign(&ck.params)?;
    Ok(model)
}

/// `||theta - reference||` over the parameters named in `reference`.
pub fn parameter_drift(reference: &BTreeMap<String, Tensor>, store: &ParamStore) -> Result<f64> {
    let mut acc = 0.0f64;
    for (name, r) in reference {
        let v = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))?;
        let d = (v.as_tensor() - r)?.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        acc += d;
    }
    Ok(acc.sqrt())
}

/// Frame-level features of one (possibly augmented) clip.
#[derive(Debug, Clone)]
struct Features {
    f0: F0Contour,
    spec: Matrix,
    /// Content features on the frame grid, when fixed for the clip.
    bnf: Option<Matrix>,
}

struct Utterance {
    entry: ManifestEntry,
    speaker: u32,
    wave: Waveform,
    clean: Features,
}

/// Feature extraction shared by training and target-statistics passes.
pub struct FeatureExtractor {
    cfg: Config,
    encoder: Box<dyn ContentEncoder>,
    segment_samples: usize,
}

impl FeatureExtractor {
    pub fn new(cfg: &Config) -> Self {
        Self {
            cfg: cfg.clone(),
            encoder: build_encoder(cfg),
            segment_samples: cfg.training.segment_frames(cfg.audio.hop) * cfg.audio.hop,
        }
    }

    /// Loads at the model rate and zero-pads to at least one training crop.
    pub fn load(&self, path: &Path) -> Result<Waveform> {
        Ok(self.pad(load_wav(path, self.cfg.audio.sample_rate)?))
    }

    fn pad(&self, mut w: Waveform) -> Waveform {
        let min = self.segment_samples.max(self.cfg.audio.win);
        if w.samples.len() < min {
            w.samples.resize(min, 0.0);
        }
        w
    }

    pub fn f0(&self, w: &Waveform) -> Result<F0Contour> {
        let p = &self.cfg.pitch;
        extract_f0(w, self.cfg.audio.hop, p.fmin, p.fmax, p.yin_threshold)
    }

    /// F0 from the manifest cache when given, otherwise extracted.
    pub fn f0_for(&self, entry: &ManifestEntry, w: &Waveform) -> Result<F0Contour> {
        let frames = w.len() / self.cfg.audio.hop + 1;
        match &entry.f0 {
            Some(p) => {
                let c = F0Contour::load(p)?;
                if c.len() != frames || c.hop != self.cfg.audio.hop {
                    return Err(Error::Contract(format!(
                        "cached F0 {} has {} frames at hop {}, expected {frames} at hop {}",
                        p.display(),
                        c.len(),
                        c.hop,
                        self.cfg.audio.hop
                    )));
                }
                Ok(c)
            }
            None => self.f0(w),
        }
    }

    fn spec(&self, w: &Waveform) -> Result<Matrix> {
        Ok(linear_spectrogram(w, &self.cfg.audio.stft())?.frames)
    }

    /// Whether the encoder can take audio that has no file behind it.
    fn encodes_audio(&self) -> bool {
        self.cfg.content.encoder == EncoderKind::Mock || self.cfg.content.tool.is_some()
    }

    fn bnf(&self, w: &Waveform, source: Option<&Path>, frames: usize) -> Result<Matrix> {
        let seq = extract_bnf(ContentInput { waveform: w, source }, self.encoder.as_ref())?;
        Ok(align_to_grid(&seq, frames))
    }

    fn cached_bnf(&self, entry: &ManifestEntry, w: &Waveform, frames: usize) -> Result<Matrix> {
        match &entry.bnf {
            Some(p) => Ok(align_to_grid(&BnfSequence::load(p, self.encoder.id())?, frames)),
            None => self.bnf(w, Some(&entry.wav), frames),
        }
    }
}

struct Dataset {
    utterances: Vec<Utterance>,
}

impl Dataset {
    fn load(
        entries: Vec<ManifestEntry>,
        fx: &FeatureExtractor,
        registry: &mut SpeakerRegistry,
        capacity: usize,
        seed: u64,
    ) -> Result<Self> {
        let perturb = &fx.cfg.perturb;
        let mut utterances = Vec::with_capacity(entries.len());
        for (i, entry) in entries.into_iter().enumerate() {
            let speaker = registry.register(&entry.speaker, capacity)?;
            let wave = fx.load(&entry.wav)?;
            let f0 = fx.f0_for(&entry, &wave)?;
            let spec = fx.spec(&wave)?;
            let frames = spec.rows();
            let bnf = if !fx.encodes_audio() {
                log::warn!("{}: encoder cannot take perturbed audio; using clean features", entry.wav.display());
                Some(fx.cached_bnf(&entry, &wave, frames)?)
            } else if perturb.perturb_once {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1_000 + i as u64);
                let (p, _) = pitch_perturb(&wave, perturb.bnf_pitch_range, &mut rng)?;
                Some(fx.bnf(&p, None, frames)?)
            } else {
                None
            };
            utterances.push(Utterance {
                entry,
                speaker,
                wave,
                clean: Features { f0, spec, bnf },
            });
        }
        Ok(Self { utterances })
    }

    fn speaker_stats(&self) -> BTreeMap<String, F0Stats> {
        let mut by: BTreeMap<&str, Vec<&F0Contour>> = BTreeMap::new();
        for u in &self.utterances {
            by.entry(&u.entry.speaker).or_default().push(&u.clean.f0);
        }
        by.into_iter()
            .filter_map(|(spk, cs)| match pooled_statistics(cs) {
                Ok(s) => Some((spk.to_string(), s)),
                Err(e) => {
                    log::warn!("speaker {spk}: no F0 statistics ({e})");
                    None
                }
            })
            .collect()
    }
}

/// One cropped training example, channel-major.
struct Example {
    spec: Vec<f32>,
    bnf: Vec<f32>,
    f0: F0Contour,
    y: Vec<f32>,
    speaker: u32,
}

pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub reports: Vec<LossReport>,
}

pub struct Trainer {
    cfg: StageConfig,
    model: SvcModel,
    front: SpectralFrontEnd,
    fx: FeatureExtractor,
    data: Dataset,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    step: u64,
    registry: SpeakerRegistry,
    target_stats: BTreeMap<String, F0Stats>,
    wreg_ref: Option<BTreeMap<String, Tensor>>,
    reports: Vec<LossReport>,
    log: Option<std::fs::File>,
}

impl Trainer {
    /// `init` takes precedence over `cfg.init_from`; `cfg.resume_from` over both.
    pub fn new(cfg: StageConfig, init: Option<Checkpoint>) -> Result<Self> {
        let resume = cfg.resume_from.as_ref().map(Checkpoint::load).transpose()?;
        let init = match (resume.is_some(), init, &cfg.init_from) {
            (true, _, _) => None,
            (false, Some(ck), _) => Some(ck),
            (false, None, Some(p)) => Some(Checkpoint::load(p)?),
            (false, None, None) => None,
        };
        cfg.validate(init.is_some() || resume.is_some())?;
        let config = &cfg.config;
        let dims = model_dims(config);
        let model = init_model(config, cfg.seed)?;
        let mut opt_g = Adam::new(model.generator_params(), cfg.adam());
        let mut opt_d = Adam::new(model.discriminator_params(), cfg.adam());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(cfg.stage.stream());
        let (mut registry, mut target_stats, mut step, mut wreg_ref) = (SpeakerRegistry::new(), BTreeMap::new(), 0, None);

        if let Some(ck) = resume {
            check_compatible(&ck.meta, config, dims)?;
            if ck.meta.stage != Some(cfg.stage) {
                return Err(Error::Config(format!(
                    "cannot resume {} from a {} checkpoint",
                    cfg.stage,
                    ck.meta.stage.map_or("fresh", |s| s.as_str())
                )));
            }
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::Config("resume checkpoint has no optimizer state".into()))?;
            model.store.assign(&ck.params)?;
            opt_g.state = opt.generator.state;
            opt_d.state = opt.discriminator.state;
            rng = ck.meta.rng.ok_or_else(|| Error::Config("resume checkpoint has no RNG state".into()))?.restore();
            registry = ck.meta.speakers;
            target_stats = ck.meta.target_stats;
            step = ck.meta.step;
            wreg_ref = ck.wreg_ref;
        } else if let Some(ck) = init {
            check_compatible(&ck.meta, config, dims)?;
            let keep_disc = !config.training.reset_discriminator_per_stage;
            let params: BTreeMap<String, Tensor> = ck
                .params
                .into_iter()
                .filter(|(k, _)| keep_disc || !DISCRIMINATOR_PREFIXES.iter().any(|p| k.starts_with(p)))
                .collect();
            model.store.assign(&params)?;
            registry = ck.meta.speakers;
            target_stats = ck.meta.target_stats;
        }
        if cfg.stage == Stage::Adapt && wreg_ref.is_none() {
            let scope = config.losses.wreg_prefixes();
            let scope: Vec<&str> = scope.iter().map(String::as_str).collect();
            let snapshot = model.store.snapshot(&scope)?;
            if snapshot.is_empty() {
                return Err(Error::Config("wreg_scope selects no parameters".into()));
            }
            wreg_ref = Some(snapshot);
        }

        let fx = FeatureExtractor::new(config);
        let entries = read_manifest(&cfg.manifest)?;
        let data = Dataset::load(entries, &fx, &mut registry, config.model.max_speakers, cfg.seed)?;
        target_stats.extend(data.speaker_stats());
        let front = SpectralFrontEnd::new(config.audio.stft(), config.audio.mel(), config.audio.sample_rate, DType::F32)?;
        let log = match &cfg.log {
            Some(p) => Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            ),
            None => None,
        };
        Ok(Self {
            cfg,
            model,
            front,
            fx,
            data,
            opt_g,
            opt_d,
            rng,
            step,
            registry,
            target_stats,
            wreg_ref,
            reports: Vec::new(),
            log,
        })
    }

    pub fn model(&self) -> &SvcModel {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn registry(&self) -> &SpeakerRegistry {
        &self.registry
    }

    pub fn wreg_reference(&self) -> Option<&BTreeMap<String, Tensor>> {
        self.wreg_ref.as_ref()
    }

    /// Distance of the current parameters from the regularizer reference.
    pub fn drift(&self) -> Result<f64> {
        match &self.wreg_ref {
            Some(r) => parameter_drift(r, &self.model.store),
            None => Ok(0.0),
        }
    }

    fn segment_frames(&self) -> usize {
        self.cfg.config.training.segment_frames(self.cfg.config.audio.hop)
    }

    fn example(&mut self, index: usize) -> Result<Example> {
        let hop = self.cfg.config.audio.hop;
        let seg = self.segment_frames();
        let utt = &self.data.utterances[index];
        let (wave, feats) = match &self.cfg.augmentation {
            Some(spec) => {
                let (w, _) = augment(&utt.wave, spec, &mut self.rng)?;
                let w = self.fx.pad(w);
                let f0 = self.fx.f0(&w)?;
                let spec = self.fx.spec(&w)?;
                let bnf = match utt.clean.bnf {
                    Some(_) if !self.fx.encodes_audio() => utt.clean.bnf.clone(),
                    _ => None,
                };
                (w, Features { f0, spec, bnf })
            }
            None => (utt.wave.clone(), utt.clean.clone()),
        };
        let frames = feats.spec.rows();
        let bnf = match feats.bnf {
            Some(b) => b,
            None => {
                let (p, _) = pitch_perturb(&wave, self.cfg.config.perturb.bnf_pitch_range, &mut self.rng)?;
                self.fx.bnf(&p, None, frames)?
            }
        };
        let last = wave.len() / hop - seg;
        let s = self.rng.random_range(0..=last);
        Ok(Example {
            spec: channel_major(&feats.spec, s, seg),
            bnf: channel_major(&bnf, s, seg),
            f0: feats.f0.slice(s, seg),
            y: wave.samples[s * hop..(s + seg) * hop].to_vec(),
            speaker: utt.speaker,
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self) -> Result<LossReport> {
        let b = self.cfg.batch_size;
        let seg = self.segment_frames();
        let mut batch = Vec::with_capacity(b);
        for _ in 0..b {
            let i = self.rng.random_range(0..self.data.utterances.len());
            batch.push(self.example(i)?);
        }
        let cfg = &self.cfg.config;
        let dev = Device::Cpu;
        let bins_dim = self.model.dims.spec_channels;
        let cat = |f: &dyn Fn(&Example) -> &[f32]| -> Vec<f32> { batch.iter().flat_map(|e| f(e).iter().copied()).collect() };
        let spec = Tensor::from_vec(cat(&|e| &e.spec), (b, bins_dim, seg), &dev)?;
        let bnf = Tensor::from_vec(cat(&|e| &e.bnf), (b, cfg.content.dim, seg), &dev)?;
        let y = Tensor::from_vec(cat(&|e| &e.y), (b, 1, seg * cfg.audio.hop), &dev)?;
        let quantized = batch
            .iter()
            .map(|e| quantize_f0(&e.f0, cfg.pitch.n_bins, cfg.pitch.fmin, cfg.pitch.fmax))
            .collect::<Result<Vec<_>>>()?;
        let bins = bins_tensor(&quantized.iter().collect::<Vec<_>>())?;
        let source = cfg.model.source_config(cfg.audio.sample_rate);
        let excitation = batch
            .iter()
            .map(|e| source_module(&upsample_f0(&e.f0), &source, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let excitation = excitation_tensor(&excitation, DType::F32)?;
        let speakers: Vec<u32> = batch.iter().map(|e| e.speaker).collect();
        let mask = Tensor::ones((b, 1, seg), DType::F32, &dev)?;

        let m = &self.model;
        let g = m.speaker_embedding(&speakers)?;
        let q = m.posterior_encode(&spec, &mask, &g)?;
        let eps = randn(&mut self.rng, q.mean.dims3()?, DType::F32)?;
        let z = q.sample(&eps, &mask)?;
        let (z_p, logdet) = m.flow_forward(&z, &mask, &g)?;
        let p = m.prior_encode(&bnf, &bins, &g, &mask)?;
        let y_hat = m.decode(&z.z, &excitation, &g)?;

        let real = m.discriminate(&y)?;
        let fake = m.discriminate(&y_hat.detach())?;
        let loss_d = adv_d(&real.scores, &fake.scores)?;
        let d_value = loss_d.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !d_value.is_finite() {
            return Err(self.abort(format!("adv_d = {d_value}")));
        }
        self.opt_d.step(&loss_d.backward()?)?;

        let m = &self.model;
        let fake = m.discriminate(&y_hat)?;
        let fm = if cfg.losses.use_feature_matching {
            let real = m.discriminate(&y)?;
            let real: Vec<Vec<Tensor>> = real.features.iter().map(|fs| fs.iter().map(Tensor::detach).collect()).collect();
            Some(feature_matching(&real, &fake.features)?)
        } else {
            None
        };
        let wreg = match (&self.wreg_ref, self.cfg.stage) {
            (Some(r), Stage::Adapt) => Some(weight_reg(r, &m.generator_params())?),
            _ => None,
        };
        let terms = GeneratorTerms {
            adv_g: adv_g(&fake.scores)?,
            recon: recon_loss(&self.front.log_mel(&y)?, &self.front.log_mel(&y_hat)?, None)?,
            kl: kl_loss(&q, &z.z, &z_p.z, &logdet, &p, &mask)?,
            wreg,
            fm,
        };
        let mut losses = cfg.losses.clone();
        losses.lambda_reg = self.cfg.wreg_lambda;
        let report = LossReport::from_tensors(self.step + 1, self.cfg.stage.as_str(), &terms, &loss_d, &losses)?;
        let bad = report.non_finite();
        if !bad.is_empty() {
            return Err(self.abort(format!("non-finite {}", bad.join(", "))));
        }
        let total = total_g(&terms, &losses)?;
        self.opt_g.step(&total.backward()?)?;

        self.step += 1;
        self.record(&report)?;
        let every = self.cfg.config.training.checkpoint_every;
        if every > 0 && self.step % every == 0 && self.step < self.cfg.steps {
            if let Some(out) = &self.cfg.output {
                self.checkpoint()?.save(periodic_path(out, self.step))?;
            }
        }
        Ok(report)
    }

    fn record(&mut self, report: &LossReport) -> Result<()> {
        let every = self.cfg.config.training.log_every.max(1);
        if let (Some(f), true) = (self.log.as_mut(), report.step % every == 0) {
            writeln!(f, "{}", report.to_json_line()).map_err(|e| Error::io(self.cfg.log.as_ref().unwrap(), e))?;
        }
        log::debug!("{}", report.to_json_line());
        self.reports.push(report.clone());
        Ok(())
    }

    /// Writes a diagnostic snapshot next to the output and builds the error.
    fn abort(&self, detail: String) -> Error {
        let step = self.step + 1;
        if let Some(out) = &self.cfg.output {
            let path = out.with_extension("nonfinite.ckpt");
            match self.checkpoint().and_then(|c| c.save(&path)) {
                Ok(()) => log::error!("diagnostic snapshot written to {}", path.display()),
                Err(e) => log::error!("could not write diagnostic snapshot: {e}"),
            }
        }
        Error::NonFiniteLoss { step, detail }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                config: self.cfg.config.clone(),
                dims: self.model.dims,
                stage: Some(self.cfg.stage),
                step: self.step,
                rng: Some(RngState::capture(&self.rng)),
                speakers: self.registry.clone(),
                target_stats: self.target_stats.clone(),
            },
            params: self.model.store.snapshot(&[""])?,
            optimizer: Some(OptimizerState {
                generator: OptimizerSnapshot {
                    config: self.opt_g.config,
                    state: self.opt_g.state.clone(),
                },
                discriminator: OptimizerSnapshot {
                    config: self.opt_d.config,
                    state: self.opt_d.state.clone(),
                },
            }),
            wreg_ref: self.wreg_ref.clone(),
        })
    }

    /// Runs the remaining steps and writes the final checkpoint.
    pub fn run(mut self) -> Result<StageResult> {
        while self.step < self.cfg.steps {
            let r = self.step()?;
            log::info!(
                "{} step {}/{} recon {:.4} kl {:.4} adv_g {:.4} adv_d {:.4}",
                r.stage,
                r.step,
                self.cfg.steps,
                r.recon,
                r.kl,
                r.adv_g,
                r.adv_d
            );
        }
        let checkpoint = self.checkpoint()?;
        if let Some(out) = &self.cfg.output {
            checkpoint.save(out)?;
        }
        Ok(StageResult {
            checkpoint,
            reports: self.reports,
        })
    }
}

fn check_compatible(meta: &CheckpointMeta, cfg: &Config, dims: ModelDims) -> Result<()> {
    let c = &meta.config;
    if c.model != cfg.model || c.pbtc != cfg.pbtc || meta.dims != dims {
        return Err(Error::Config("checkpoint architecture differs from the configured model".into()));
    }
    Ok(())
}

/// `dir/name.ckpt` → `dir/name.step<N>.ckpt`.
pub fn periodic_path(output: &Path, step: u64) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let ext = output.extension().and_then(|s| s.to_str()).unwrap_or("ckpt");
    output.with_file_name(format!("{stem}.step{step}.{ext}"))
}

fn channel_major(m: &Matrix, start: usize, len: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(len * m.cols());
    for c in 0..m.cols() {
        out.extend((start..start + len).map(|t| m.get(t, c)));
    }
    out
}

pub fn run_stage(cfg: &StageConfig) -> Result<Checkpoint> {
    Ok(Trainer::new(cfg.clone(), None)?.run()?.checkpoint)
}

/// Chains the three stages in order, each starting from the previous one's
/// final state.
pub fn run_pipeline(warmup: &StageConfig, pretrain: &StageConfig, adapt: &StageConfig) -> Result<Checkpoint> {
    let order = [(warmup, Stage::Warmup), (pretrain, Stage::Pretrain), (adapt, Stage::Adapt)];
    if let Some((c, want)) = order.iter().find(|(c, want)| c.stage != *want) {
        return Err(Error::Config(format!("expected a {want} stage, got {}", c.stage)));
    }
    let mut prev: Option<Checkpoint> = None;
    for (cfg, _) in order {
        let init = match prev.take() {
            Some(ck) => Some(ck),
            None => cfg.init_from.as_ref().map(Checkpoint::load).transpose()?,
        };
        prev = Some(Trainer::new(cfg.clone(), init)?.run()?.checkpoint);
    }
    Ok(prev.expect("three stages ran"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "# clips\na.wav\tIDF1\n\nsub/b.wav\tIDM2\tb.f0\t-\n").unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].wav, dir.path().join("a.wav"));
        assert_eq!(m[0].f0, None);
        assert_eq!(m[1].f0, Some(dir.path().join("b.f0")));
        assert_eq!(m[1].bnf, None);
        assert_eq!(m[1].speaker, "IDM2");

        let round = dir.path().join("r.tsv");
        write_manifest(&round, &m).unwrap();
        assert_eq!(read_manifest(&round).unwrap(), m);
    }

    #[test]
    fn empty_or_malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "# nothing\n").unwrap();
        assert_eq!(read_manifest(&path).unwrap_err().kind(), "config");
        std::fs::write(&path, "only-one-field\n").unwrap();
        assert_eq!(read_manifest(&path).unwrap_err().kind(), "format");
    }

    #[test]
    fn stage_invariants() {
        let cfg = Config::profile(crate::config::Profile::Desk);
        let adapt = StageConfig::new(Stage::Adapt, "m.tsv", &cfg);
        assert!(adapt.validate(false).is_err());
        adapt.validate(true).unwrap();
        let mut warm = StageConfig::new(Stage::Warmup, "m.tsv", &cfg);
        assert_eq!(warm.wreg_lambda, 0.0);
        assert!(warm.augmentation.is_none());
        warm.wreg_lambda = 1.0;
        assert!(warm.validate(false).is_err());
    }

    #[test]
    fn periodic_paths() {
        assert_eq!(periodic_path(Path::new("/x/m.ckpt"), 20), PathBuf::from("/x/m.step20.ckpt"));
    }

    #[test]
    fn crops_are_channel_major() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(channel_major(&m, 1, 2), vec![3.0, 5.0, 4.0, 6.0]);
    }
}
