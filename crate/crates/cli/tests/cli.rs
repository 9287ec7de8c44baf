use std::path::Path;
use std::process::Command;

use anchorinv_cli::commands::*;
use anchorinv_cli::config::{self, resolve, ExperimentConfig, PRESETS};
use anchorinv_cli::writer::with_writer;
use anchorinv_core::eval::Metric;

/// Desk preset cut down to seconds.
fn quick() -> ExperimentConfig {
    resolve(
        r#"
preset = "desk"
[base]
epochs = 10
[anchors]
base_per_class = 4
[inversion]
iterations = 10
[finetune]
iterations = 3
[eval]
trials = 2
methods = ["anchor-inv", "finetune"]
[ablate]
anchors = [1, 4]
"#,
        "quick",
    )
    .unwrap()
}

#[test]
fn every_preset_resolves() {
    for (name, _) in PRESETS {
        let cfg = resolve(&format!("preset = \"{name}\""), name).unwrap();
        assert_eq!(cfg.seed, 5);
        assert!(cfg.backbone().validate().is_ok());
    }
    let bci = resolve("preset = \"bci\"", "bci").unwrap();
    assert_eq!(bci.base.epochs, 1500);
    assert_eq!(bci.base.lr, 2e-4);
    assert_eq!(bci.backbone().feature_dim(), 2440);
    let desk = config::load(None).unwrap();
    assert_eq!(desk, resolve(&desk.to_toml().unwrap(), "round trip").unwrap());
}

#[test]
fn missing_key_is_named() {
    let desk = PRESETS[0].1;
    let text: String = desk
        .lines()
        .filter(|l| !l.starts_with("temporal_kernel"))
        .map(|l| format!("{l}\n"))
        .collect();
    let err = format!("{:#}", resolve(&text, "cut.toml").unwrap_err());
    assert!(err.contains("temporal_kernel"), "{err}");
    assert!(err.contains("model"), "{err}");
}

#[test]
fn bad_keys_and_names_rejected() {
    let unknown = format!("{:#}", resolve("preset = \"desk\"\n[base]\nepoch = 3\n", "x").unwrap_err());
    assert!(unknown.contains("epoch"), "{unknown}");
    let preset = format!("{:#}", resolve("preset = \"imagenet\"", "x").unwrap_err());
    assert!(preset.contains("imagenet") && preset.contains("grabmyo"), "{preset}");
    let method = format!(
        "{:#}",
        resolve("preset = \"desk\"\n[eval]\nmethods = [\"icarl\"]\n", "x").unwrap_err()
    );
    for m in config::METHOD_NAMES {
        assert!(method.contains(m), "{method}");
    }
    let strategy = format!(
        "{:#}",
        resolve("preset = \"desk\"\n[anchors]\nbase_strategy = \"median\"\n", "x").unwrap_err()
    );
    assert!(strategy.contains("median"), "{strategy}");
    assert!(resolve("preset = \"desk\"\n[finetune]\ntrainable = [\"head\"]\n", "x").is_err());
}

#[test]
fn writer_commits_or_quarantines() {
    let dir = tempfile::tempdir().unwrap();
    let (_, d) = with_writer(dir.path(), "ok", |w| w.write("a.txt", b"x")).unwrap();
    assert_eq!(std::fs::read(d.join("a.txt")).unwrap(), b"x");
    let err = with_writer(dir.path(), "bad", |w| -> anyhow::Result<()> {
        w.write("partial.txt", b"y")?;
        anyhow::bail!("boom")
    })
    .unwrap_err();
    assert!(format!("{err:#}").contains("boom"));
    assert!(dir.path().join("quarantine/bad/partial.txt").exists());
    assert!(!dir.path().join("bad").exists());
    assert!(!dir.path().join(".staging-bad").exists());
}

#[test]
fn train_base_file_contract_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick();
    let (s, d) = cmd_train_base(&cfg, dir.path()).unwrap();
    assert_eq!(s.anchors, 2 * cfg.anchors.base_per_class);
    for f in [CHECKPOINT_FILE, ANCHORS_FILE, "train_log.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    assert_eq!(s.epoch_loss.len(), 10);
    let other = tempfile::tempdir().unwrap();
    let (s2, d2) = cmd_train_base(&cfg, other.path()).unwrap();
    assert_eq!(s.checkpoint_sha256, s2.checkpoint_sha256);
    assert_eq!(std::fs::read(d.join(CHECKPOINT_FILE)).unwrap(), std::fs::read(d2.join(CHECKPOINT_FILE)).unwrap());
    let reseeded = ExperimentConfig { seed: 6, ..cfg };
    let (s3, _) = cmd_train_base(&reseeded, other.path()).unwrap();
    assert_ne!(s.checkpoint_sha256, s3.checkpoint_sha256);
}

#[test]
fn run_report_shape_and_tests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick();
    let base = BasePaths::under(dir.path());
    let missing = format!("{:#}", cmd_run(&cfg, &base, dir.path(), 1).unwrap_err());
    assert!(missing.contains("train-base"), "{missing}");
    cmd_train_base(&cfg, dir.path()).unwrap();
    let (report, d) = cmd_run(&cfg, &base, dir.path(), 1).unwrap();
    assert_eq!(report.methods.len(), 2);
    for m in &report.methods {
        assert_eq!(m.scores.len(), 2);
        assert!(m.scores.iter().all(|s| s.len() == 3));
    }
    let t = report
        .tests
        .iter()
        .find(|t| t.a == "anchor-inv" && t.b == "finetune" && t.metric == Metric::All)
        .unwrap();
    assert!((0.0..=1.0).contains(&t.p_value));
    assert!(d.join("report.json").exists() && d.join("report.txt").exists());
    let rendered = render_report(&d.join("report.json")).unwrap();
    assert_eq!(rendered, std::fs::read_to_string(d.join("report.txt")).unwrap());

    let (again, _) = cmd_run(&cfg, &base, dir.path(), 2).unwrap();
    assert_eq!(again, report);
}

#[test]
fn run_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick();
    cmd_train_base(&cfg, dir.path()).unwrap();
    let mut other = cfg.clone();
    other.model.filters = 4;
    let err = format!("{:#}", cmd_run(&other, &BasePaths::under(dir.path()), dir.path(), 1).unwrap_err());
    assert!(err.contains("model section"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn ablation_rows_follow_axis_values() {
    let cfg = quick();
    let shots = ablate(&cfg, Axis::Shots, 1).unwrap();
    assert_eq!(shots.rows.len(), 3);
    assert_eq!(shots.rows.iter().map(|r| r.value.as_str()).collect::<Vec<_>>(), ["1", "5", "10"]);
    let mut s = cfg.clone();
    s.eval.methods = vec!["protonet".into()];
    let strategies = ablate(&s, Axis::Strategy, 1).unwrap();
    assert_eq!(strategies.rows.len(), 6);
    let anchors = ablate(&cfg, Axis::Anchors, 1).unwrap();
    assert_eq!(anchors.rows.len(), 2);
    let mut b = s.clone();
    b.data = resolve("preset = \"desk\"\n[data.synthetic]\nclasses = 6\n", "x").unwrap().data;
    b.sessions.base_classes = vec![0, 1, 2, 3];
    b.ablate.base_classes = vec![4, 3, 2];
    let base = ablate(&b, Axis::BaseClasses, 1).unwrap();
    assert_eq!(base.rows.len(), 3);
    for row in &base.rows {
        // the two unseen classes stay the incremental classes at every size
        assert_eq!(row.report.sessions, 3);
        assert!(row.report.methods[0].final_metric(Metric::Incremental).iter().all(|v| v.is_finite()));
    }
    b.ablate.base_classes = vec![5];
    assert!(ablate(&b, Axis::BaseClasses, 1).is_err());
}

#[test]
fn audit_exports_one_sample_per_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick();
    cmd_train_base(&cfg, dir.path()).unwrap();
    let (report, d) = cmd_audit_inversion(&cfg, &BasePaths::under(dir.path()), dir.path()).unwrap();
    assert_eq!(report.anchors, 8);
    assert_eq!(report.exported, 8);
    assert_eq!(report.histogram.iter().map(|b| b.count).sum::<usize>(), 8);
    assert!(report.min <= report.median && report.median <= report.max);
    let (manifest, train, test) = anchorinv_core::data::read_manifest(&d.join("inverted/manifest.json")).unwrap();
    assert_eq!(train.len(), 8);
    assert!(test.is_empty());
    assert!(manifest.entries.iter().all(|e| e.synthetic));
}

#[test]
fn histogram_bins_cover_range() {
    let h = histogram(&[0.0, 0.5, 1.0, 1.0], 4);
    assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), [1, 0, 1, 2]);
    assert_eq!(h[0].lo, 0.0);
    assert_eq!(h[3].hi, 1.0);
    assert_eq!(histogram(&[2.0, 2.0], 4).len(), 1);
    assert!(histogram(&[], 4).is_empty());
}

fn bin(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_anchorinv"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("ANCHORINV_WORKERS")
        .output()
        .unwrap()
}

#[test]
fn binary_exit_status_tracks_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("quick.toml");
    std::fs::write(&cfg_path, quick().to_toml().unwrap()).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let out = dir.path().join("out");

    let r = bin(&out, &["--config", cfg, "run"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("train-base"));

    let r = bin(&out, &["--config", cfg, "train-base"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("base").join(CHECKPOINT_FILE).exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "preset = \"desk\"\n[eval]\nmethods = [\"nope\"]\n").unwrap();
    let r = bin(&out, &["--config", bad.to_str().unwrap(), "run"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("anchor-inv"));

    let r = bin(&out, &["render-report", "/nonexistent.json"]);
    assert!(!r.status.success());

    let r = bin(&out, &["--config", cfg, "--seed", "9", "show-config"]);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stdout).contains("seed = 9"));
}
