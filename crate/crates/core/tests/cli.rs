//! End-to-end runs of the binary on a tiny dataset and model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use camadapt::checkpoint::load_backbone;
use camadapt::clfa::BranchVariant;
use camadapt::dataset::read_dataset;
use camadapt::experiment::evaluate_model;
use camadapt::metrics::MetricRecord;

const BIN: &str = env!("CARGO_BIN_EXE_camadapt");

const DATA: &[&str] = &[
    "--set",
    "dataset.n_patients=16",
    "--set",
    "dataset.generator.image_size=32",
];

const MODEL: &[&str] = &[
    "--set",
    "model.image_size=32",
    "--set",
    "model.embed_dim=16",
    "--set",
    "model.depth=1",
    "--set",
    "pretrain.batch_size=8",
];

fn run_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("CLFA_SEED");
    if let Some(s) = seed {
        cmd.env("CLFA_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn run(args: &[&str]) -> Output {
    run_env(args, None)
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn cat<'a>(parts: &[&[&'a str]]) -> Vec<&'a str> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn records(path: &Path) -> Vec<MetricRecord> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

struct Pipeline {
    files: Vec<PathBuf>,
}

/// gen-data, pretrain, adapt, eval, export-features and probe in `dir`.
fn pipeline(dir: &Path) -> Pipeline {
    let data = dir.join("data");
    let ckpt = dir.join("backbone.ckpt");
    let adaptor = dir.join("adaptor.ckpt");
    let eval = dir.join("eval.json");
    let features = dir.join("features.csv");
    let probe = dir.join("probe.json");

    ok(&cat(&[&["gen-data", "--out", s(&data)], DATA]));
    ok(&cat(&[
        &["pretrain", "--data", s(&data), "--out", s(&ckpt), "--set", "pretrain.epochs=2"],
        MODEL,
    ]));
    ok(&["adapt", "--data", s(&data), "--backbone", s(&ckpt), "--out", s(&adaptor), "--set", "adapt.epochs=2", "--set", "adapt.batch_size=8"]);
    let run_arg = format!("{},{}", s(&ckpt), s(&adaptor));
    ok(&["eval", "--data", s(&data), "--run", s(&ckpt), "--run", &run_arg, "--out", s(&eval)]);
    ok(&["export-features", "--data", s(&data), "--backbone", s(&ckpt), "--adaptor", s(&adaptor), "--out", s(&features)]);
    ok(&["probe", "--features", s(&features), "--out", s(&probe)]);

    let mut files = vec![
        data.join("labels.csv"),
        data.join("manifest.json"),
        ckpt.clone(),
        dir.join("backbone.ckpt.metrics.jsonl"),
        adaptor.clone(),
        dir.join("adaptor.ckpt.metrics.jsonl"),
        eval,
        features,
        probe,
    ];
    let mut images: Vec<PathBuf> = std::fs::read_dir(data.join("images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    images.sort();
    files.extend(images);
    Pipeline { files }
}

#[test]
fn every_command_reruns_byte_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = pipeline(a.path());
    let pb = pipeline(b.path());
    assert_eq!(pa.files.len(), pb.files.len());
    for (fa, fb) in pa.files.iter().zip(&pb.files) {
        assert_eq!(fa.strip_prefix(a.path()).unwrap(), fb.strip_prefix(b.path()).unwrap());
        assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap(), "{} differs", fa.display());
    }

    // eval agrees bit-exactly with calling the library directly
    let (data, _) = read_dataset(&a.path().join("data")).unwrap();
    let (backbone, _) = load_backbone(&a.path().join("backbone.ckpt")).unwrap();
    let direct = evaluate_model(&data, &backbone, BranchVariant::Clfa, None).unwrap();
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("eval.json")).unwrap()).unwrap();
    let entry = &report["entries"][direct.key()];
    assert_eq!(entry, &serde_json::to_value(&direct).unwrap());
}

#[test]
fn benchmark_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| -> Vec<String> {
        [
            "benchmark",
            "--out",
            s(out),
            "--set",
            "benchmark.n_patients=12",
            "--set",
            "benchmark.generator.image_size=32",
            "--set",
            "benchmark.model.image_size=32",
            "--set",
            "benchmark.model.embed_dim=16",
            "--set",
            "benchmark.model.depth=1",
            "--set",
            "benchmark.pretrain.epochs=1",
            "--set",
            "benchmark.adapt.epochs=1",
            "--set",
            "benchmark.seeds=[0]",
            "--set",
            r#"cells=[{"model_variant":"clfa","adaptor_variant":"sa_only","loss_variant":"cvd"}]"#,
        ]
        .iter()
        .map(|a| a.to_string())
        .collect()
    };
    let (x, y) = (dir.path().join("x.json"), dir.path().join("y.json"));
    for out in [&x, &y] {
        let a = args(out);
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    }
    assert_eq!(std::fs::read(&x).unwrap(), std::fs::read(&y).unwrap());
}

#[test]
fn resume_continues_where_training_stopped() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&cat(&[&["gen-data", "--out", s(&data)], DATA]));
    let full = dir.path().join("full.ckpt");
    let half = dir.path().join("half.ckpt");
    let resumed = dir.path().join("resumed.ckpt");
    ok(&cat(&[&["pretrain", "--data", s(&data), "--out", s(&full), "--set", "pretrain.epochs=2"], MODEL]));
    ok(&cat(&[&["pretrain", "--data", s(&data), "--out", s(&half), "--set", "pretrain.epochs=1"], MODEL]));
    ok(&cat(&[
        &[
            "pretrain",
            "--data",
            s(&data),
            "--out",
            s(&resumed),
            "--resume",
            s(&half),
            "--set",
            "pretrain.epochs=2",
        ],
        MODEL,
    ]));
    let full_hist = records(&dir.path().join("full.ckpt.metrics.jsonl"));
    let resumed_hist = records(&dir.path().join("resumed.ckpt.metrics.jsonl"));
    let epoch2: Vec<_> = full_hist.iter().filter(|r| r.epoch == 2).collect();
    assert!(!epoch2.is_empty());
    assert!(resumed_hist.iter().all(|r| r.epoch == 2));
    assert_eq!(epoch2.len(), resumed_hist.len());
    for (f, r) in epoch2.iter().zip(&resumed_hist) {
        assert_eq!(f.task, r.task);
        assert!((f.value - r.value).abs() <= 1e-6, "{}: {} vs {}", f.task, f.value, r.value);
    }
    let (a, _) = load_backbone(&full).unwrap();
    let (b, _) = load_backbone(&resumed).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exit_codes_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dir.path().join("x.ckpt");

    // missing data directory
    let r = run(&cat(&[&["pretrain", "--data", s(&missing), "--out", s(&out)], MODEL]));
    assert_eq!(r.status.code(), Some(3));
    // unknown configuration key
    let r = run(&["gen-data", "--out", s(&out), "--set", "dataset.bogus=1"]);
    assert_eq!(r.status.code(), Some(2));
    // unknown key in a config file
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"dataset": {"n_patients": 4, "colour": 1}}"#).unwrap();
    let r = run(&["gen-data", "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(r.status.code(), Some(2));
    // unparsable seed override
    let r = run_env(&cat(&[&["gen-data", "--out", s(&dir.path().join("d"))], DATA]), Some("abc"));
    assert_eq!(r.status.code(), Some(2));
    // bad flag
    assert_eq!(run(&["gen-data", "--frobnicate"]).status.code(), Some(2));
    // required path missing
    assert_eq!(run(&["probe"]).status.code(), Some(2));
}

#[test]
fn seed_override_changes_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run_env(&cat(&[&["gen-data", "--out", s(&a)], DATA]), Some("7")).status.success());
    ok(&cat(&[&["gen-data", "--out", s(&b), "--set", "seed=7"], DATA]));
    ok(&cat(&[&["gen-data", "--out", s(&c)], DATA]));
    let labels = |d: &Path| std::fs::read(d.join("labels.csv")).unwrap();
    assert_eq!(labels(&a), labels(&b));
    assert_ne!(labels(&a), labels(&c));
}

#[test]
fn adaptor_from_another_backbone_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&cat(&[&["gen-data", "--out", s(&data)], DATA]));
    let (b0, b1) = (dir.path().join("b0.ckpt"), dir.path().join("b1.ckpt"));
    let adaptor = dir.path().join("a.ckpt");
    let pre = |out: &Path, seed: &str| {
        let seed_arg = format!("pretrain.seed={seed}");
        ok(&cat(&[
            &["pretrain", "--data", s(&data), "--out", s(out), "--set", "pretrain.epochs=1", "--set", &seed_arg],
            MODEL,
        ]));
    };
    pre(&b0, "0");
    pre(&b1, "1");
    ok(&["adapt", "--data", s(&data), "--backbone", s(&b0), "--out", s(&adaptor), "--set", "adapt.epochs=1"]);
    let feats = dir.path().join("f.csv");
    let r = run(&["export-features", "--data", s(&data), "--backbone", s(&b1), "--adaptor", s(&adaptor), "--out", s(&feats)]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!feats.exists());
    let run_arg = format!("{},{}", s(&b1), s(&adaptor));
    let r = run(&["eval", "--data", s(&data), "--run", &run_arg, "--out", s(&dir.path().join("e.json"))]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn passthrough_eval_with_identical_cameras_is_fully_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    // the target camera becomes a copy of the source camera
    let spec = camadapt::dataset::DatasetSpec::default();
    let wanted = serde_json::to_value(&spec.source_profile).unwrap();
    let profile_arg = format!("dataset.target_profile={wanted}");
    ok(&cat(&[&["gen-data", "--out", s(&data), "--set", &profile_arg], DATA]));
    let ckpt = dir.path().join("b.ckpt");
    let adaptor = dir.path().join("a.ckpt");
    ok(&cat(&[&["pretrain", "--data", s(&data), "--out", s(&ckpt), "--set", "pretrain.epochs=1"], MODEL]));
    // zero epochs leaves the passthrough initialization untouched
    ok(&["adapt", "--data", s(&data), "--backbone", s(&ckpt), "--out", s(&adaptor), "--set", "adapt.epochs=0"]);
    let eval = dir.path().join("e.json");
    let run_arg = format!("{},{}", s(&ckpt), s(&adaptor));
    ok(&["eval", "--data", s(&data), "--run", &run_arg, "--out", s(&eval)]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&eval).unwrap()).unwrap();
    let entry = report["entries"].as_object().unwrap().values().next().unwrap();
    assert_eq!(entry["consistency_r2_pre"].as_f64(), Some(1.0));
    assert_eq!(entry["consistency_r2_post"].as_f64(), Some(1.0));
}
