use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use svcforge::audio::{load_wav, save_wav};
use svcforge::config::{Config, Profile};
use svcforge::content::{extract_bnf, ContentInput};
use svcforge::convert::{compute_target_stats, ConversionRequest, Converter};
use svcforge::perturb::augment;
use svcforge::training::{build_encoder, read_manifest, write_manifest, FeatureExtractor, Stage, StageConfig, Trainer};
use svcforge::{Error, Result};

#[derive(Parser)]
#[command(name = "svcforge", version, about = "Singing voice conversion: training, conversion and feature tools")]
struct Cli {
    /// TOML configuration layered over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "desk", value_parser = ["desk", "vits"])]
    profile: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize the model on speech.
    Warmup(TrainArgs),
    /// Multi-singer training from a warm-up checkpoint.
    Pretrain(TrainArgs),
    /// Fine-tune on the target singer with augmentation and weight regularization.
    Adapt(AdaptArgs),
    /// Convert a clip to a registered speaker.
    Convert(ConvertArgs),
    /// Write an F0 sidecar.
    ExtractF0(IoArgs),
    /// Write a content-feature sidecar.
    ExtractBnf(IoArgs),
    /// Write augmented copies of one clip or of a whole manifest.
    Augment(AugmentArgs),
    /// Pooled log-F0 statistics over a manifest.
    Stats(StatsArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue an interrupted run of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    wreg_lambda: Option<f64>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    speaker: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_f0_shift: bool,
}

#[derive(Args)]
struct IoArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long = "in", conflicts_with = "manifest", required_unless_present = "manifest", requires = "out")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, requires = "out_dir")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Augmented copies per clip in manifest mode.
    #[arg(long, default_value_t = 1)]
    copies: usize,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let profile: Profile = cli.profile.parse()?;
    let mut cfg = Config::load(profile, cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
    }
    Ok(cfg)
}

fn stage_config(stage: Stage, args: &TrainArgs, cfg: &Config) -> StageConfig {
    let mut sc = StageConfig::new(stage, &args.manifest, cfg);
    if let Some(steps) = args.steps {
        sc.steps = steps;
    }
    sc.init_from = args.init.clone();
    sc.resume_from = args.resume.clone();
    sc.output = Some(args.out.clone());
    sc.log = args.log.clone();
    sc
}

fn train(sc: StageConfig) -> Result<Value> {
    let out = sc.output.clone();
    let result = Trainer::new(sc, None)?.run()?;
    let last = result.reports.last();
    Ok(json!({
        "checkpoint": out,
        "stage": result.checkpoint.meta.stage,
        "steps": result.checkpoint.meta.step,
        "speakers": result.checkpoint.meta.speakers.entries(),
        "final_losses": last,
    }))
}

fn run(cli: &Cli) -> Result<Value> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Warmup(a) => train(stage_config(Stage::Warmup, a, &cfg)),
        Command::Pretrain(a) => train(stage_config(Stage::Pretrain, a, &cfg)),
        Command::Adapt(a) => {
            let mut sc = stage_config(Stage::Adapt, &a.train, &cfg);
            if let Some(l) = a.wreg_lambda {
                sc.wreg_lambda = l;
            }
            if a.no_augment {
                sc.augmentation = None;
            }
            train(sc)
        }
        Command::Convert(a) => {
            let req = ConversionRequest {
                source: a.input.clone(),
                speaker: a.speaker.clone(),
                checkpoint: a.ckpt.clone(),
                seed: cli.seed.unwrap_or(0),
                f0_shift: !a.no_f0_shift,
                output: Some(a.out.clone()),
            };
            let out = Converter::load(&req.checkpoint)?.convert(&req)?;
            Ok(json!({
                "output": a.out,
                "samples": out.waveform.len(),
                "sample_rate": out.waveform.sample_rate,
                "warnings": out.warnings,
            }))
        }
        Command::ExtractF0(a) => {
            let fx = FeatureExtractor::new(&cfg);
            let f0 = fx.f0(&load_wav(&a.input, cfg.audio.sample_rate)?)?;
            f0.save(&a.out)?;
            Ok(json!({ "output": a.out, "frames": f0.len(), "voiced": f0.n_voiced() }))
        }
        Command::ExtractBnf(a) => {
            let encoder = build_encoder(&cfg);
            let w = load_wav(&a.input, cfg.audio.sample_rate)?;
            let seq = extract_bnf(
                ContentInput {
                    waveform: &w,
                    source: Some(&a.input),
                },
                encoder.as_ref(),
            )?;
            seq.save(&a.out)?;
            Ok(json!({ "output": a.out, "frames": seq.n_frames(), "dim": seq.dim(), "encoder": seq.encoder_id }))
        }
        Command::Augment(a) => augment_cmd(a, &cfg),
        Command::Stats(a) => {
            let s = compute_target_stats(&a.manifest, &cfg)?;
            Ok(json!({
                "mean_logf0": s.mean_logf0,
                "std_logf0": s.std_logf0,
                "mean_hz": s.mean_logf0.exp(),
            }))
        }
    }
}

fn augment_cmd(a: &AugmentArgs, cfg: &Config) -> Result<Value> {
    let spec = &cfg.perturb.augmentation;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed ^ spec.seed);
    let one = |input: &Path, output: &Path, rng: &mut ChaCha8Rng| -> Result<Value> {
        let w = load_wav(input, cfg.audio.sample_rate)?;
        let (out, record) = augment(&w, spec, rng)?;
        save_wav(output, &out)?;
        Ok(json!({ "input": input, "output": output, "record": record }))
    };
    match (&a.input, &a.out, &a.manifest, &a.out_dir) {
        (Some(input), Some(out), _, _) => one(input, out, &mut rng),
        (None, _, Some(manifest), Some(dir)) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let mut written = Vec::new();
            let mut entries = Vec::new();
            for (i, e) in read_manifest(manifest)?.into_iter().enumerate() {
                let stem = e.wav.file_stem().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
                for k in 0..a.copies {
                    let out = dir.join(format!("{stem}.{i}.aug{k}.wav"));
                    written.push(one(&e.wav, &out, &mut rng)?);
                    entries.push(svcforge::training::ManifestEntry::new(out, e.speaker.clone()));
                }
            }
            let out_manifest = dir.join("manifest.tsv");
            write_manifest(&out_manifest, &entries)?;
            Ok(json!({ "manifest": out_manifest, "clips": written }))
        }
        _ => Err(Error::Config("augment needs --in/--out or --manifest/--out-dir".into())),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
