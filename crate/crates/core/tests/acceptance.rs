//! Acceptance runner: one `[PASS]`/`[FAIL]` line per criterion, nonzero
//! exit status when any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,3,4` restricts the run to the listed criteria.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use camadapt::adaptor::{
    adaptation_loss, cache_pairs, pair_consistency, predict_target, train_adaptor, AdaptConfig, AdaptLoss, Adaptor,
    AdaptorInit, AdaptorVariant,
};
use camadapt::backbone::{Backbone, Predictions, VitConfig};
use camadapt::checkpoint::{file_sha256, load_backbone, save_pretrain};
use camadapt::clfa::{
    alignment_pair_loss, simsiam_alignment_loss, supervised_loss, BranchVariant, PretrainConfig, PretrainState,
    TaskWeights,
};
use camadapt::experiment::{export_features, run_benchmark, trend_cells, BenchmarkConfig, Cell};
use camadapt::metrics::{linear_probe_auc, mk_mmd, KernelBank, ProbeConfig, ProbeTarget, DEFAULT_MULTIPLIERS};
use camadapt::nn::Mlp2;
use camadapt::synthdata::{make_paired_dataset, CameraProfile, Split};
use common::gradcheck::{adaptor_gradient, pretrain_gradient};
use ndarray::Array1;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn preds(v: &[f64]) -> Predictions<f64> {
    Predictions::from_slice(v)
}

fn loss_oracles() -> Outcome {
    let mut rng = common::rng(1001);
    let mut worst: f64 = 0.0;
    let mut note = |e: f64| worst = worst.max(e);
    for _ in 0..25 {
        let d = rng.gen_range(2..=8);
        let reg: [f64; 5] = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
        let logits: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
        let labels = common::random_labels(&mut rng);
        let w = TaskWeights {
            w_rgs: std::array::from_fn(|_| rng.gen_range(0.0..2.0)),
            w_cls: std::array::from_fn(|_| rng.gen_range(0.0..2.0)),
            lambda: 1.0,
        };
        let mut v = reg.to_vec();
        v.extend_from_slice(&logits);
        let got = supervised_loss(&preds(&v), &labels, &w).map_err(|e| e.to_string())?;
        note((got.total - common::supervised(&reg, &logits, &labels, &w.w_rgs, &w.w_cls)).abs());

        let zl: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let zr: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (l_l, l_r) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
        let a = alignment_pair_loss(Array1::from(zl.clone()).view(), Array1::from(zr.clone()).view(), l_l, l_r)
            .map_err(|e| e.to_string())?;
        let expect = if l_l >= l_r { common::mse(&zl, &zr) } else { common::mse(&zr, &zl) };
        note((a.value - expect).abs());

        let hidden = rng.gen_range(2..=8);
        let p = Mlp2::<f64>::random(d, hidden, 0.7, &mut rng);
        let rows = |m: &ndarray::Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        let (w1, w2) = (rows(&p.fc1.weight), rows(&p.fc2.weight));
        let (b1, b2) = (p.fc1.bias.to_vec(), p.fc2.bias.to_vec());
        let h = |z: &[f64]| common::mlp2(&w1, &b1, &w2, &b2, z);
        let s = simsiam_alignment_loss(Array1::from(zl.clone()).view(), Array1::from(zr.clone()).view(), &p)
            .map_err(|e| e.to_string())?;
        let (hl, hr) = (h(&zl), h(&zr));
        if hl.iter().chain(&hr).any(|v| v.abs() > 1e-6) {
            note((s.value + 0.5 * (common::cosine(&hl, &zr) + common::cosine(&hr, &zl))).abs());
        }

        let n = rng.gen_range(2..=8);
        let zs = common::random_rows(n, d, 0.0, &mut rng);
        let za = common::random_rows(n, d, 0.25, &mut rng);
        let cs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..0.0)).collect();
        let ct: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..0.0)).collect();
        let ps: Vec<_> = cs.iter().map(|&c| preds(&[c, 0.1, 0.2, 0.3, 0.4, 0.0, 0.0, 0.0])).collect();
        let pt: Vec<_> = ct.iter().map(|&c| preds(&[c, 1.0, 2.0, 3.0, 4.0, 1.0, 1.0, 1.0])).collect();
        let (zs_a, za_a) = (common::to_array(&zs), common::to_array(&za));
        let eval = |l| adaptation_loss(l, &ps, &pt, zs_a.view(), za_a.view(), None).map(|v| v.value);
        let flat = |m: &[Vec<f64>]| m.iter().flatten().copied().collect::<Vec<f64>>();
        let cvd = common::mse(&cs, &ct);
        let feature = common::mse(&flat(&zs), &flat(&za));
        let med = common::median_distance(&zs);
        let bw: Vec<f64> = DEFAULT_MULTIPLIERS.iter().map(|k| k * med).collect();
        let mmd = common::mmd_paired(&za, &zs, &bw, &[1.0 / bw.len() as f64; 5]);
        for (loss, want) in [
            (AdaptLoss::Cvd, cvd),
            (AdaptLoss::Feature, feature),
            (AdaptLoss::CvdPlusFeature, cvd + feature),
            (AdaptLoss::Mkmmd, mmd),
        ] {
            note((eval(loss).map_err(|e| e.to_string())? - want).abs());
        }
    }
    ensure(worst <= 1e-6, format!("max abs error {worst:.2e} over 25 instances of each loss"))
}

fn stop_gradient() -> Outcome {
    let mut rng = common::rng(1002);
    let mut worst_rel: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.gen_range(1..=16);
        let zl: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let zr: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (l_l, l_r) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
        let a = alignment_pair_loss(Array1::from(zl.clone()).view(), Array1::from(zr.clone()).view(), l_l, l_r)
            .map_err(|e| e.to_string())?;
        let (student, teacher, g_s, g_t) = if l_l >= l_r {
            (&zl, &zr, &a.grad_left, &a.grad_right)
        } else {
            (&zr, &zl, &a.grad_right, &a.grad_left)
        };
        if g_t.iter().any(|&g| g != 0.0) {
            return Err("teacher gradient is not exactly zero".into());
        }
        let want: Vec<f64> = student.iter().zip(teacher.iter()).map(|(s, t)| 2.0 * (s - t) / d as f64).collect();
        worst_rel = worst_rel.max(common::max_rel_err(&g_s.to_vec(), &want, 1e-12));
    }
    ensure(
        worst_rel <= 1e-6,
        format!("teacher gradient exactly zero; student vs constant-teacher MSE rel err {worst_rel:.2e}"),
    )
}

fn finite_differences() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |label: &str, r: common::gradcheck::GradErrors| {
        ok &= r.check().is_ok();
        lines.push(format!("{label} f32 {:.1e} f64 {:.1e}", r.at_f32.1, r.at_f64.1));
    };
    record("clfa", pretrain_gradient(BranchVariant::Clfa, 12));
    record("supervised_only", pretrain_gradient(BranchVariant::SupervisedOnly, 11));
    for (i, loss) in AdaptLoss::ALL.into_iter().enumerate() {
        record(loss.as_str(), adaptor_gradient(loss, AdaptorVariant::SaPlusMlp, 31 + i as u64));
    }
    ensure(ok, lines.join("; "))
}

fn mmd_oracle() -> Outcome {
    let mut rng = common::rng(1004);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (n, m, d) = (rng.gen_range(2..=30), rng.gen_range(2..=30), rng.gen_range(1..=8));
        let x = common::random_rows(n, d, 0.0, &mut rng);
        let y = common::random_rows(m, d, rng.gen_range(-0.5..0.5), &mut rng);
        let pooled: Vec<Vec<f64>> = x.iter().chain(&y).cloned().collect();
        let med = common::median_distance(&pooled);
        let bw: Vec<f64> = DEFAULT_MULTIPLIERS.iter().map(|k| k * med).collect();
        let brute = common::mmd_u(&x, &y, &bw, &[0.2; 5]);
        let (xa, ya) = (common::to_array(&x), common::to_array(&y));
        let got = mk_mmd(xa.view(), ya.view(), None).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute).abs());
        let swapped = mk_mmd(ya.view(), xa.view(), None).map_err(|e| e.to_string())?;
        if got.to_bits() != swapped.to_bits() {
            return Err(format!("asymmetric: {got:e} vs {swapped:e}"));
        }
    }
    let mut same_worst: f64 = 0.0;
    for _ in 0..5 {
        let rows = common::random_rows(20, 6, 0.0, &mut rng);
        let bank = KernelBank::new(vec![0.5, 1.0, 2.0], vec![0.2, 0.5, 0.3]).map_err(|e| e.to_string())?;
        let a = common::to_array(&rows);
        let got = mk_mmd(a.view(), a.view(), Some(&bank)).map_err(|e| e.to_string())?;
        same_worst = same_worst.max((got - common::mmd_u(&rows, &rows, &bank.bandwidths, &bank.weights)).abs());
    }
    ensure(
        worst <= 1e-10 && same_worst <= 1e-6,
        format!("brute-force error {worst:.1e}, identical-set error {same_worst:.1e}, symmetric bit-exactly"),
    )
}

fn model_32() -> VitConfig {
    VitConfig {
        image_size: 32,
        ..common::smallest_model()
    }
}

fn freeze() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("backbone.ckpt");
    let pre = PretrainConfig::default();
    let state = PretrainState::new(&model_32(), &pre).map_err(|e| e.to_string())?;
    let written = save_pretrain(&path, &state, &pre).map_err(|e| e.to_string())?;
    let (backbone, _) = load_backbone(&path).map_err(|e| e.to_string())?;
    let data = make_paired_dataset(24, &CameraProfile::tabletop(), &CameraProfile::portable(), 5, &common::small_generator())
        .map_err(|e| e.to_string())?;
    let train = data.pairs_in(Split::Train);
    let fixed: Vec<_> = data.pairs.iter().take(16).map(|p| p.source_image.clone()).collect();
    let before: Vec<_> = fixed.iter().map(|i| backbone.forward(i).unwrap().to_array()).collect();
    let cfg = AdaptConfig {
        epochs: 2,
        batch_size: 8,
        ..AdaptConfig::default()
    };
    train_adaptor(&backbone, &train, &data.pairs_in(Split::Validation), &cfg).map_err(|e| e.to_string())?;
    let mut after = state.clone();
    after.model.backbone = backbone.clone();
    let resaved = save_pretrain(&dir.path().join("again.ckpt"), &after, &pre).map_err(|e| e.to_string())?;
    let same_file = file_sha256(&path).map_err(|e| e.to_string())? == written && resaved == written;
    let same_preds = fixed
        .iter()
        .zip(&before)
        .all(|(i, b)| backbone.forward(i).unwrap().to_array().iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(
        same_file && same_preds,
        format!("{} training pairs, 2 epochs; checksum unchanged {same_file}, 16 predictions bit-identical {same_preds}", train.len()),
    )
}

fn passthrough() -> Outcome {
    let mut rng = common::rng(1006);
    let backbone = Backbone::<f32>::init(&model_32(), 3).map_err(|e| e.to_string())?;
    let adaptor = Adaptor::for_backbone(&backbone, AdaptorVariant::SaPlusMlp, AdaptorInit::Passthrough, 1)
        .map_err(|e| e.to_string())?;
    let mut worst: f32 = 0.0;
    for _ in 0..16 {
        let img = common::random_image(32, &mut rng);
        let a = backbone.forward(&img).unwrap().to_array();
        let b = predict_target(&backbone, &adaptor, &img).unwrap().to_array();
        worst = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(worst, f32::max);
    }
    let data = make_paired_dataset(16, &CameraProfile::tabletop(), &CameraProfile::tabletop(), 8, &common::small_generator())
        .map_err(|e| e.to_string())?;
    let cached = cache_pairs(&backbone, &data.pairs.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let consistency = pair_consistency(&backbone, Some(&adaptor), &cached).map_err(|e| e.to_string())?;
    ensure(
        worst <= 1e-6 && consistency == 1.0,
        format!("max |predict_target - forward| {worst:.1e}; consistency with identical cameras {consistency}"),
    )
}

fn benchmark_checks(started: Instant) -> (Outcome, Outcome) {
    let cells = trend_cells();
    let report = match run_benchmark(&BenchmarkConfig::default(), &cells, |line| eprintln!("  {line}")) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let cell = |m, a| Cell::new(m, a, AdaptLoss::Cvd);
    let get = |c: Cell| report.median_post(&c).unwrap_or(f64::NAN);
    let main = cell(BranchVariant::Clfa, AdaptorVariant::SaPlusMlp);
    let pre = report.median_pre(&main).unwrap_or(f64::NAN);
    let post = get(main);
    let sup = get(cell(BranchVariant::SupervisedOnly, AdaptorVariant::SaPlusMlp));
    let trend = ensure(
        post - pre >= 0.05 && post >= sup && minutes < 30.0,
        format!(
            "median pre {pre:.4} -> post {post:.4} (gain {:.4}); clfa {post:.4} vs supervised_only {sup:.4}; {minutes:.1} min",
            post - pre
        ),
    );
    let mlp = get(cell(BranchVariant::Clfa, AdaptorVariant::MlpOnly));
    let sa = get(cell(BranchVariant::Clfa, AdaptorVariant::SaOnly));
    let structure = ensure(
        post >= mlp && post >= sa,
        format!("median post: sa_plus_mlp {post:.4}, sa_only {sa:.4}, mlp_only {mlp:.4}"),
    );
    (trend, structure)
}

fn probe() -> Outcome {
    let backbone = Backbone::<f32>::init(&model_32(), 2).map_err(|e| e.to_string())?;
    let auc = |target: &CameraProfile| -> Result<f64, String> {
        let data = make_paired_dataset(60, &CameraProfile::tabletop(), target, 31, &common::small_generator())
            .map_err(|e| e.to_string())?;
        let features = export_features(&backbone, None, &data.pairs.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        linear_probe_auc(&features, ProbeTarget::Camera, &ProbeConfig::default()).map_err(|e| e.to_string())
    };
    let separated = auc(&common::harsh_profile())?;
    let identical = auc(&CameraProfile::tabletop())?;
    ensure(
        separated >= 0.9 && (0.4..=0.6).contains(&identical),
        format!("AUC_camera separated {separated:.3}, identical {identical:.3}"),
    )
}

fn reproducibility() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_camadapt");
    let run = |dir: &Path| -> Result<Vec<(String, Vec<u8>)>, String> {
        let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
        let small = [
            "--set", "model.image_size=32", "--set", "model.embed_dim=16", "--set", "model.depth=1",
            "--set", "pretrain.epochs=2", "--set", "pretrain.batch_size=8",
        ];
        let bench = [
            "--set", "benchmark.n_patients=12", "--set", "benchmark.generator.image_size=32",
            "--set", "benchmark.model.image_size=32", "--set", "benchmark.model.embed_dim=16",
            "--set", "benchmark.model.depth=1", "--set", "benchmark.pretrain.epochs=1",
            "--set", "benchmark.adapt.epochs=1", "--set", "benchmark.seeds=[0]",
        ];
        let steps: Vec<Vec<String>> = vec![
            vec!["gen-data".into(), "--out".into(), p("data"), "--set".into(), "dataset.n_patients=16".into(), "--set".into(), "dataset.generator.image_size=32".into()],
            [vec!["pretrain".into(), "--data".into(), p("data"), "--out".into(), p("b.ckpt")], small.iter().map(|s| s.to_string()).collect()].concat(),
            vec!["adapt".into(), "--data".into(), p("data"), "--backbone".into(), p("b.ckpt"), "--out".into(), p("a.ckpt"), "--set".into(), "adapt.epochs=2".into()],
            vec!["eval".into(), "--data".into(), p("data"), "--run".into(), format!("{},{}", p("b.ckpt"), p("a.ckpt")), "--out".into(), p("eval.json")],
            vec!["export-features".into(), "--data".into(), p("data"), "--backbone".into(), p("b.ckpt"), "--adaptor".into(), p("a.ckpt"), "--out".into(), p("f.csv")],
            vec!["probe".into(), "--features".into(), p("f.csv"), "--out".into(), p("probe.json")],
            [vec!["benchmark".into(), "--out".into(), p("bench.json")], bench.iter().map(|s| s.to_string()).collect()].concat(),
        ];
        for args in &steps {
            let out = Command::new(bin).args(args).env_remove("CLFA_SEED").output().map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
            }
        }
        let mut files = Vec::new();
        for name in [
            "data/labels.csv", "data/manifest.json", "b.ckpt", "b.ckpt.metrics.jsonl", "a.ckpt",
            "a.ckpt.metrics.jsonl", "eval.json", "f.csv", "probe.json", "bench.json",
        ] {
            files.push((name.to_string(), std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?));
        }
        Ok(files)
    };
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (fa, fb) = (run(a.path())?, run(b.path())?);
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    ensure(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} output files byte-identical across reruns of 7 commands", fa.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().map_or(true, |o| o.contains(&id));
    let mut failures = 0;
    let mut report = |id: u32, name: &str, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {id:>2} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failures += 1;
                println!("[FAIL] {id:>2} {name} ({secs:.1}s): {detail}");
            }
        }
    };
    let guarded = |f: &dyn Fn() -> Outcome| -> Outcome {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        })
    };

    let simple: [(u32, &str, fn() -> Outcome); 7] = [
        (1, "loss oracles", loss_oracles),
        (2, "stop-gradient semantics", stop_gradient),
        (3, "finite-difference suite", finite_differences),
        (4, "MK-MMD oracle equivalence", mmd_oracle),
        (5, "freeze invariant", freeze),
        (6, "passthrough equivalence", passthrough),
        (9, "probe sanity", probe),
    ];
    for (id, name, f) in simple.iter().filter(|c| c.0 < 7) {
        if wanted(*id) {
            let t = Instant::now();
            report(*id, name, t, guarded(f));
        }
    }
    if wanted(7) || wanted(8) {
        let t = Instant::now();
        let (trend, structure) = catch_unwind(AssertUnwindSafe(|| benchmark_checks(t)))
            .unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
        if wanted(7) {
            report(7, "directional trend", t, trend);
        }
        if wanted(8) {
            report(8, "adaptor structure", t, structure);
        }
    }
    for (id, name, f) in simple.iter().filter(|c| c.0 > 7) {
        if wanted(*id) {
            let t = Instant::now();
            report(*id, name, t, guarded(f));
        }
    }
    if wanted(10) {
        let t = Instant::now();
        report(10, "reproducibility", t, guarded(&reproducibility));
    }
    if failures > 0 {
        println!("{failures} criterion failures");
        std::process::exit(1);
    }
}
