use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gesturegen::harness::ExperimentConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gesturegen"));
    c.env_remove("GESTUREGEN_OUT");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn gesturegen")
}

#[track_caller]
fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tiny_config() -> String {
    configs_dir().join("tiny.toml").to_string_lossy().into_owned()
}

#[test]
fn bundled_config_files_match_presets() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, preset) in [
        ("desk", ExperimentConfig::desk()),
        ("tiny", ExperimentConfig::tiny()),
        ("full", ExperimentConfig::full()),
    ] {
        let file = configs_dir().join(format!("{name}.toml"));
        let loaded = ExperimentConfig::load(&file).unwrap();
        assert_eq!(loaded, preset, "{name}");
        let printed = ok(tmp.path(), &["config", name]);
        assert_eq!(printed, std::fs::read_to_string(&file).unwrap(), "{name}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(run_in(d, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(run_in(d, &["run", "--config", "missing.toml"]).status.code(), Some(2));

    std::fs::write(d.join("bad.toml"), "[split]\ntrain = 0.9\nval = 0.1\ntest = 0.1\n").unwrap();
    let out = run_in(d, &["run", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("split"));

    std::fs::write(d.join("typo.toml"), "[vq]\ncodebook = 8\n").unwrap();
    assert_eq!(run_in(d, &["run", "--config", "typo.toml"]).status.code(), Some(2));

    // Valid config, but the data directory is empty: the data stage fails.
    std::fs::create_dir(d.join("empty")).unwrap();
    let mut cfg = ExperimentConfig::tiny();
    cfg.data.source = gesturegen::harness::DataSource::Directory;
    cfg.data.path = Some(d.join("empty"));
    std::fs::write(d.join("dir.toml"), cfg.to_toml_string()).unwrap();
    let out = run_in(d, &["run", "--config", "dir.toml", "--out", "run"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `data`"));
}

#[test]
fn module_commands_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config();
    ok(d, &["data", "synth", "--seed", "1", "--count", "12", "--frames", "16", "--styles", "2", "--out", "data"]);
    let listing = ok(d, &["data", "validate", "data"]);
    assert_eq!(listing.lines().count(), 12);
    assert!(listing.contains("style style1"));

    ok(d, &["data", "synth", "--count", "2", "--frames", "12", "--binary", "--no-audio", "--out", "bin"]);
    assert!(d.join("bin/seq000.poseb").exists() && !d.join("bin/seq000.wav").exists());

    ok(d, &["audio", "mfcc", "data/seq000.wav", "--fps", "30", "--out", "mfcc.pose"]);
    assert!(ok(d, &["data", "validate", "mfcc.pose"]).contains("16 frames of width 64"));
    ok(d, &["audio", "beats", "data/seq000.wav", "--out", "beats.json"]);
    let beats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("beats.json")).unwrap()).unwrap();
    assert!(beats["times"].is_array());

    ok(d, &["vq", "train", "--data", "data", "--config", &cfg, "--seed", "0", "--out", "vq.ckpt"]);
    ok(d, &["vq", "encode", "--model", "vq.ckpt", "--in", "data/seq000.pose", "--out", "tok.json"]);
    ok(d, &["vq", "decode", "--model", "vq.ckpt", "--in", "tok.json", "--out", "rec.poseb"]);
    assert!(ok(d, &["data", "validate", "rec.poseb"]).contains("16 frames"));

    // Tokens from one quantizer do not decode through another.
    ok(d, &["vq", "train", "--data", "data", "--config", &cfg, "--seed", "5", "--out", "vq5.ckpt"]);
    assert_eq!(run_in(d, &["vq", "decode", "--model", "vq5.ckpt", "--in", "tok.json", "--out", "x.pose"]).status.code(), Some(2));

    ok(d, &["train", "predictor", "--data", "data", "--vq", "vq.ckpt", "--config", &cfg, "--out", "pred.ckpt"]);
    ok(d, &["train", "encoder", "--data", "data", "--config", &cfg, "--out", "enc.ckpt"]);
    ok(d, &["audio", "embed", "data/seq000.wav", "--predictor", "pred.ckpt", "--out", "emb.poseb"]);
    assert!(ok(d, &["data", "validate", "emb.poseb"]).contains("width 256"));

    ok(d, &["style", "encode", "--model", "pred.ckpt", "--clip", "data", "--out", "codes.json"]);
    ok(d, &["style", "encode", "--model", "pred.ckpt", "--clip", "data/seq000.pose", "--out", "codes.csv"]);
    assert!(std::fs::read_to_string(d.join("codes.csv")).unwrap().starts_with("style0,"));
    ok(d, &["style", "tsne", "--codes", "codes.json", "--perplexity", "3", "--seed", "2", "--out", "tsne.json"]);
    assert!(std::fs::read_to_string(d.join("tsne.svg")).unwrap().starts_with("<svg"));

    let gen = |mode: &str, seed: &str, out: &str| {
        ok(
            d,
            &[
                "generate", "--audio", "data/seq000.wav", "--style-clip", "data/seq001.pose", "--identity", "spk0", "--vq",
                "vq.ckpt", "--predictor", "pred.ckpt", "--mode", mode, "--seed", seed, "--out", out,
            ],
        )
    };
    std::fs::create_dir(d.join("gen")).unwrap();
    gen("greedy", "0", "g0.poseb");
    gen("greedy", "9", "g9.poseb");
    assert_eq!(std::fs::read(d.join("g0.poseb")).unwrap(), std::fs::read(d.join("g9.poseb")).unwrap());
    gen("temp", "0", "gen/seq000_s00.poseb");
    gen("temp", "1", "gen/seq000_s01.poseb");
    gen("topk", "2", "gen/seq000_s02.poseb");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("gen/seq000_s01.poseb.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["sampling"]["seed"], 1);
    assert_eq!(manifest["sampling"]["mode"], "temperature");
    assert!(manifest["digests"]["predictor_config"].is_string());

    let unknown = run_in(
        d,
        &[
            "generate", "--audio", "data/seq000.wav", "--style-clip", "data/seq001.pose", "--identity", "nobody", "--vq",
            "vq.ckpt", "--predictor", "pred.ckpt", "--out", "x.poseb",
        ],
    );
    assert_eq!(unknown.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unknown identity"));

    ok(d, &["eval", "--real", "data", "--generated", "gen", "--audio", "data", "--encoder", "enc.ckpt", "--out", "report.json"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["generated_count"], 3);
    assert_eq!(report["variation_samples"], 3);
    assert!(report["fgd"].as_f64().unwrap() >= 0.0);
    for k in ["feature_encoder", "vq_config", "vq_training", "predictor_config"] {
        assert!(report["digests"][k].is_string(), "{k}");
    }
    assert_eq!(report["per_sequence"].as_array().unwrap().len(), 3);
}

#[test]
fn run_uses_output_root_and_reruns_from_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = bin()
        .current_dir(d)
        .env("GESTUREGEN_OUT", d.join("root"))
        .args(["run", "--config", &tiny_config()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = d.join("root/tiny/manifest.json");
    assert!(manifest.exists());

    let again = ok(d, &["run", "--config", &tiny_config(), "--out", "root/tiny"]);
    assert!(again.contains("reused"));

    let rerun = ok(d, &["run", "--manifest", &manifest.to_string_lossy(), "--out", "rerun"]);
    assert!(rerun.contains("rerun matches the manifest"), "{rerun}");
    assert_eq!(
        std::fs::read(d.join("rerun/report.json")).unwrap(),
        std::fs::read(d.join("root/tiny/report.json")).unwrap()
    );
}

#[test]
fn sweep_prints_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let table = ok(d, &["sweep", "--config", &tiny_config(), "--axis", "fusion", "--out", "sw", "--jobs", "2"]);
    assert!(table.contains("direct-injection") && table.contains("cross-attention"), "{table}");
    assert!(d.join("sw/sweep.json").exists() && d.join("sw/sweep.md").exists());
    assert_eq!(run_in(d, &["sweep", "--config", &tiny_config(), "--axis", "nonsense"]).status.code(), Some(2));
}
