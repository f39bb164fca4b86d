#![allow(dead_code)]

use std::path::{Path, PathBuf};

use svcforge::audio::{save_wav, Waveform};
use svcforge::config::{Config, Profile};
use svcforge::model::DiscriminatorConfig;
use svcforge::pbtc::PbtcConfig;
use svcforge::training::{write_manifest, ManifestEntry, Stage, StageConfig};

pub const SR: u32 = 24000;

/// Desk profile shrunk until a training step takes a fraction of a second.
pub fn small_config() -> Config {
    let mut cfg = Config::profile(Profile::Desk);
    let m = &mut cfg.model;
    m.inter_channels = 8;
    m.hidden_channels = 16;
    m.filter_channels = 16;
    m.prior_layers = 1;
    m.posterior_layers = 2;
    m.flow_couplings = 2;
    m.flow_layers = 1;
    m.gin_channels = 8;
    m.max_speakers = 8;
    m.upsample_initial_channel = 16;
    m.resblock_kernel_sizes = vec![3];
    m.resblock_dilations = vec![vec![1]];
    m.discriminator = DiscriminatorConfig {
        periods: vec![2, 3],
        mpd_channels: vec![4, 4],
        msd_scales: 1,
        msd_channels: vec![4, 4],
        msd_kernels: vec![15, 5],
        msd_strides: vec![4, 1],
        msd_groups: vec![1, 1],
    };
    cfg.pbtc = PbtcConfig::new(cfg.pitch.n_bins as usize, 3, 8, 3, 16);
    cfg.content.dim = 32;
    cfg.training.segment_samples = 2400;
    cfg.validate().expect("small config is valid");
    cfg
}

pub fn write_clips(dir: &Path, name: &str, clips: Vec<(Waveform, &str)>) -> PathBuf {
    let mut entries = Vec::new();
    for (i, (w, speaker)) in clips.into_iter().enumerate() {
        let p = dir.join(format!("{name}{i}.wav"));
        save_wav(&p, &w).unwrap();
        entries.push(ManifestEntry::new(p, speaker));
    }
    let path = dir.join(format!("{name}.tsv"));
    write_manifest(&path, &entries).unwrap();
    path
}

pub fn stage(stage: Stage, manifest: &Path, cfg: &Config, steps: u64) -> StageConfig {
    let mut sc = StageConfig::new(stage, manifest, cfg);
    sc.steps = steps;
    sc
}
