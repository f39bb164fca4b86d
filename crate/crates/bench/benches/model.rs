use std::hint::black_box;

use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use svcforge::audio::save_wav;
use svcforge::config::{Config, Profile};
use svcforge::nn::{conv1d, ParamStore};
use svcforge::pbtc::{Pbtc, PbtcConfig};
use svcforge::synth::singing_like;
use svcforge::training::{write_manifest, ManifestEntry, Stage, StageConfig, Trainer};

fn conv(c: &mut Criterion) {
    let dev = Device::Cpu;
    let x = candle_core::Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 32, 8160), &dev).unwrap()).unwrap();
    let w = candle_core::Var::from_tensor(&Tensor::randn(0f32, 0.1, (32, 32, 7), &dev).unwrap()).unwrap();
    c.bench_function("conv1d_fwd_bwd", |b| {
        b.iter(|| {
            let y = conv1d(x.as_tensor(), w.as_tensor(), 3, 1, 1, 1).unwrap();
            black_box(y.sqr().unwrap().sum_all().unwrap().backward().unwrap())
        })
    });
}

fn pbtc(c: &mut Criterion) {
    let store = ParamStore::new(0, DType::F32);
    let bank = Pbtc::new(&store.root().pp("pbtc"), &PbtcConfig::new(256, 10, 256, 3, 192)).unwrap();
    let bins: Vec<u32> = (0..2 * 200).map(|i| (i * 7 % 255) as u32).collect();
    let bins = Tensor::from_vec(bins, (2, 200), &Device::Cpu).unwrap();
    c.bench_function("pbtc_forward_full_size", |b| b.iter(|| bank.forward(black_box(&bins)).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let entries: Vec<ManifestEntry> = (0..4)
        .map(|i| {
            let p = dir.path().join(format!("{i}.wav"));
            save_wav(&p, &singing_like(i, 24000, 1.0)).unwrap();
            ManifestEntry::new(p, "S")
        })
        .collect();
    let manifest = dir.path().join("m.tsv");
    write_manifest(&manifest, &entries).unwrap();
    let cfg = Config::profile(Profile::Desk);
    let mut sc = StageConfig::new(Stage::Warmup, &manifest, &cfg);
    sc.steps = u64::MAX;
    let mut trainer = Trainer::new(sc, None).unwrap();
    c.bench_function("desk_train_step", |b| b.iter(|| trainer.step().unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, pbtc, train_step
}
criterion_main!(benches);
