use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &["--set", "data.side=16", "--set", "data.glyph=4"];

fn patlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patlab"))
        .args(args)
        .output()
        .expect("run patlab")
}

fn ok(args: &[&str]) -> String {
    let out = patlab(args);
    assert!(
        out.status.success(),
        "patlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_small(out: &Path, n_train: usize, n_test: usize, seed: u64) {
    let (a, b, c) = (n_train.to_string(), n_test.to_string(), seed.to_string());
    let mut args = vec!["synth", "--out", s(out), "--n-train", &a, "--n-test", &b, "--seed", &c];
    args.extend_from_slice(SMALL);
    ok(&args);
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn col(path: &Path, name: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name}"));
    csv_rows(path).into_iter().map(|r| r[i].clone()).collect()
}

#[test]
fn synth_writes_files_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth_small(&a, 40, 20, 3);
    synth_small(&b, 40, 20, 3);
    for f in ["train.dsb", "test.dsb", "train.manifest", "test.manifest", "config.resolved"] {
        assert!(a.join(f).is_file(), "{f} missing");
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn synth_prints_coupled_conditionals() {
    let dir = tempfile::tempdir().unwrap();
    // without truncation, which drops high-index partners on crowded scenes
    let mut args = vec![
        "synth", "--out", s(dir.path()), "--n-train", "100000", "--n-test", "10",
        "--set", "data.colocation=true", "--set", "data.max_objects=10",
    ];
    args.extend_from_slice(SMALL);
    let stdout = ok(&args);
    let mut seen = 0;
    for line in stdout.lines().skip_while(|l| !l.starts_with("coupling")).skip(1) {
        let p: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!((0.88..=0.92).contains(&p), "{line}");
        seen += 1;
    }
    assert_eq!(seen, 3);
}

#[test]
fn train_infer_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data, 64, 32, 1);
    let base = ["--epochs", "2", "--batch", "16", "--lr", "1e-3"];

    let det = dir.path().join("det");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&det), "--mode", "det"];
    args.extend_from_slice(&base);
    let log = ok(&args);
    assert_eq!(log.lines().count(), 3);
    assert!(det.join("model.ckpt").is_file());
    assert_eq!(col(&det.join("train_log.csv"), "epoch"), ["1", "2"]);

    let int = dir.path().join("int");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&int), "--mode", "int", "--no-eval"];
    args.extend_from_slice(&base);
    ok(&args);
    for k in 1..=10 {
        assert!(int.join(format!("model_class_{k}.ckpt")).is_file());
    }

    let pat = dir.path().join("pat");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&pat), "--mode", "pat-t"];
    args.extend_from_slice(&base);
    ok(&args);
    let log = pat.join("train_log.csv");
    let total = col(&log, "loss");
    let image = col(&log, "image_loss");
    let patch = col(&log, "patch_loss");
    for i in 0..2 {
        let t: f64 = total[i].parse().unwrap();
        let sum = image[i].parse::<f64>().unwrap() + patch[i].parse::<f64>().unwrap();
        assert!((t - sum).abs() <= 1e-12 * t.abs().max(1.0), "{t} vs {sum}");
    }

    let test = data.join("test.dsb");
    for model in [&det, &int, &pat] {
        let plain = model.join("plain");
        ok(&["infer", "--checkpoint", s(model), "--data", s(&test), "--out", s(&plain)]);
        let pred = plain.join("predictions.csv");
        assert_eq!(csv_rows(&pred).len(), 32);
        let header = fs::read_to_string(&pred).unwrap();
        assert!(!header.lines().next().unwrap().contains("tde_"));

        let zero = model.join("zero");
        ok(&[
            "infer", "--checkpoint", s(model), "--data", s(&test), "--out", s(&zero),
            "--mode", "pat-i", "--lambda", "0",
        ]);
        let pred0 = zero.join("predictions.csv");
        for k in 1..=10 {
            let p = col(&pred0, &format!("p_{k}"));
            let t = col(&pred0, &format!("tde_{k}"));
            for (p, t) in p.iter().zip(&t) {
                let sig = 1.0 / (1.0 + (-p.parse::<f64>().unwrap()).exp());
                assert!((sig - t.parse::<f64>().unwrap()).abs() < 1e-15);
            }
        }

        let ev = model.join("eval");
        ok(&[
            "eval", "--predictions", s(&pred0), "--data", s(&test), "--out", s(&ev),
            "--compare", s(&pred0),
        ]);
        for d in col(&ev.join("compare.csv"), "delta") {
            assert!(d == "NA" || d.parse::<f64>().unwrap() == 0.0, "{d}");
        }
        assert!(ev.join("stepwise.csv").is_file());
        for p in col(&ev.join("pairs.csv"), "p_b_given_a") {
            assert!(p.parse::<f64>().unwrap() > 0.2);
        }
        assert!(fs::read_to_string(ev.join("metrics.txt")).unwrap().contains("map="));
    }

    // resume continues the epoch count; a mode mismatch is rejected
    let more = dir.path().join("more");
    ok(&[
        "train", "--data", s(&data), "--out", s(&more), "--mode", "det", "--epochs", "1",
        "--resume", s(&det.join("model.ckpt")),
    ]);
    assert_eq!(col(&more.join("train_log.csv"), "epoch"), ["3"]);
    let bad = patlab(&[
        "train", "--data", s(&data), "--out", s(&more), "--mode", "pat-t", "--epochs", "1",
        "--resume", s(&det.join("model.ckpt")),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_of_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), 10, 30, 4);
    let labels = dataset_labels(&dir.path().join("test.dsb"));
    let mut text = String::from("image_index");
    for k in 1..=10 {
        text.push_str(&format!(",p_{k}"));
    }
    text.push('\n');
    for (i, row) in labels.iter().enumerate() {
        text.push_str(&i.to_string());
        for &y in row {
            text.push_str(if y == 1 { ",10" } else { ",-10" });
        }
        text.push('\n');
    }
    let pred = dir.path().join("perfect.csv");
    fs::write(&pred, text).unwrap();
    let ev = dir.path().join("eval");
    ok(&["eval", "--predictions", s(&pred), "--data", s(&dir.path().join("test.dsb")), "--out", s(&ev)]);
    let metrics = fs::read_to_string(ev.join("metrics.txt")).unwrap();
    let map_line = metrics.lines().find(|l| l.starts_with("map=")).unwrap();
    assert_eq!(map_line, "map=1");
    assert!(ev.join("config.resolved").is_file());
}

fn dataset_labels(path: &Path) -> Vec<Vec<u8>> {
    let ds = patlab_core::synthgen::load_dataset(path).unwrap();
    ds.examples.iter().map(|e| e.labels.clone()).collect()
}

#[test]
fn causal_check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = patlab(&["causal-check", "--out", s(dir.path()), "--trials", "50", "--constructed", "200"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("causal.csv"));
    assert!(rows.iter().any(|r| r[0] == "constructed"));

    let empty = dir.path().join("empty");
    let out = patlab(&["causal-check", "--out", s(&empty), "--trials", "0", "--constructed", "0"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(csv_rows(&empty.join("causal.csv")).is_empty());
}

#[test]
fn causal_check_default_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = patlab(&["causal-check", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = patlab(&["synth", "--out", s(dir.path()), "--set", "data.nope=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(patlab(&["frobnicate"]).status.code(), Some(1));
    let out = patlab(&["infer", "--checkpoint", s(dir.path()), "--data", s(&dir.path().join("x.dsb"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn infer_rejects_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small");
    synth_small(&small, 16, 8, 0);
    let model = dir.path().join("m");
    ok(&["train", "--data", s(&small), "--out", s(&model), "--epochs", "1", "--no-eval"]);
    let other = dir.path().join("other");
    ok(&[
        "synth", "--out", s(&other), "--n-train", "4", "--n-test", "4", "--set", "data.side=8",
        "--set", "data.glyph=2",
    ]);
    let out = patlab(&[
        "infer", "--checkpoint", s(&model), "--data", s(&other.join("test.dsb")), "--out", s(&model),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
