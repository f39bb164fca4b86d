use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use svcforge::audio::{load_wav, save_wav};
use svcforge::config::{Config, Profile};
use svcforge::convert::compute_target_stats;
use svcforge::pitch::F0Contour;
use svcforge::synth::{singing_like, steady_tone};
use svcforge::training::{write_manifest, ManifestEntry};

fn svcforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svcforge"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn extract_f0_writes_a_parseable_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("a.wav");
    let f0 = dir.path().join("a.f0");
    save_wav(&wav, &steady_tone(220.0, 24000, 0.5, 1)).unwrap();
    let out = svcforge(&["extract-f0", "--in", s(&wav), "--out", s(&f0)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let c = F0Contour::load(&f0).unwrap();
    assert_eq!(c.len(), 12000 / 240 + 1);
    assert_eq!(record(&out)["frames"], c.len());
    let median = {
        let mut v: Vec<f32> = c.voiced_values().collect();
        v.sort_by(f32::total_cmp);
        v[v.len() / 2]
    };
    assert!((median - 220.0).abs() < 3.0, "{median}");
}

#[test]
fn extract_bnf_uses_the_mock_encoder_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("a.wav");
    let bnf = dir.path().join("a.bnf");
    save_wav(&wav, &singing_like(2, 24000, 1.0)).unwrap();
    let out = svcforge(&["extract-bnf", "--in", s(&wav), "--out", s(&bnf)]);
    assert!(out.status.success());
    let r = record(&out);
    assert_eq!(r["dim"], 1024);
    assert!((r["frames"].as_u64().unwrap() as i64 - 50).abs() <= 1);
    assert!(bnf.exists());
}

#[test]
fn stats_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let mut entries = Vec::new();
    for (i, f) in [200.0, 300.0].into_iter().enumerate() {
        let wav = dir.path().join(format!("{i}.wav"));
        save_wav(&wav, &steady_tone(f, 24000, 0.5, i as u64)).unwrap();
        entries.push(ManifestEntry::new(wav, "T"));
    }
    let manifest = dir.path().join("tgt.tsv");
    write_manifest(&manifest, &entries).unwrap();
    let out = svcforge(&["stats", "--manifest", s(&manifest)]);
    assert!(out.status.success());
    let r = record(&out);
    let lib = compute_target_stats(&manifest, &Config::profile(Profile::Desk)).unwrap();
    assert!((r["mean_logf0"].as_f64().unwrap() - lib.mean_logf0).abs() < 1e-12);
    assert!((r["std_logf0"].as_f64().unwrap() - lib.std_logf0).abs() < 1e-12);
}

#[test]
fn errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("empty.tsv");
    std::fs::write(&manifest, "# no clips\n").unwrap();
    let out = svcforge(&["stats", "--manifest", s(&manifest)]);
    assert!(!out.status.success());
    assert_eq!(record(&out)["error"], "config");

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[training]\nbatch_size = 0\n").unwrap();
    let out = svcforge(&["--config", s(&cfg), "stats", "--manifest", s(&manifest)]);
    assert!(!out.status.success());
    assert_eq!(record(&out)["error"], "config");

    let missing = dir.path().join("nope.wav");
    let out = svcforge(&["extract-f0", "--in", s(&missing), "--out", s(&dir.path().join("x.f0"))]);
    assert!(!out.status.success());
    assert_eq!(record(&out)["error"], "io");
}

#[test]
fn augment_single_clip() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("a.wav");
    let out_wav = dir.path().join("b.wav");
    save_wav(&wav, &singing_like(5, 24000, 1.0)).unwrap();
    let out = svcforge(&["--seed", "3", "augment", "--in", s(&wav), "--out", s(&out_wav)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let r = record(&out);
    let speed = r["record"]["speed_ratio"].as_f64().unwrap();
    let w = load_wav(&out_wav, 24000).unwrap();
    let expected = 24000.0 / speed;
    assert!((w.len() as f64 - expected).abs() <= 240.0, "{} vs {expected}", w.len());
}

#[test]
fn train_then_convert() {
    let dir = tempfile::tempdir().unwrap();
    let mut entries = Vec::new();
    for i in 0..2 {
        let wav = dir.path().join(format!("{i}.wav"));
        save_wav(&wav, &singing_like(i, 24000, 0.6)).unwrap();
        entries.push(ManifestEntry::new(wav, "IDF1"));
    }
    let manifest = dir.path().join("m.tsv");
    write_manifest(&manifest, &entries).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("train.jsonl");
    let out = svcforge(&[
        "warmup", "--manifest", s(&manifest), "--out", s(&ckpt), "--steps", "2", "--log", s(&log),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(record(&out)["steps"], 2);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);

    let src = dir.path().join("a.wav");
    let dst = dir.path().join("b.wav");
    save_wav(&src, &singing_like(9, 24000, 0.5)).unwrap();
    let out = svcforge(&[
        "convert", "--in", s(&src), "--speaker", "IDF1", "--ckpt", s(&ckpt), "--out", s(&dst),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let reader = hound::WavReader::open(&dst).unwrap();
    assert_eq!(reader.spec().sample_rate, 24000);
    assert_eq!(reader.spec().channels, 1);
    assert!((reader.len() as i64 - 12000).abs() <= 240);

    let out = svcforge(&[
        "convert", "--in", s(&src), "--speaker", "NOBODY", "--ckpt", s(&ckpt), "--out", s(&dst),
    ]);
    assert!(!out.status.success());
    assert_eq!(record(&out)["error"], "unknown_speaker");
}
