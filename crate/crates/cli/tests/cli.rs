use std::path::Path;

use assert_cmd::Command;
use serde_json::Value;
use tempfile::TempDir;

fn rsnet() -> Command {
    Command::cargo_bin("rsnet").unwrap()
}

/// Runs the binary, checks the exit code and returns the parsed status line.
fn run(args: &[&str], code: i32) -> Value {
    let out = rsnet().args(args).output().unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(
        out.status.code(),
        Some(code),
        "args {args:?}\nstdout {stdout}\nstderr {stderr}"
    );
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "expected one status line, got {stdout:?}");
    serde_json::from_str(lines[0]).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> Value {
    let out = dir.to_str().unwrap();
    let mut args = vec![
        "gen-data",
        "--classes",
        "3",
        "--per-class",
        "12",
        "--patch",
        "32,32",
        "--seed",
        "5",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    run(&args, 0)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let s = gen(&a, &[]);
    assert_eq!(s["status"], "ok");
    assert_eq!(s["n_samples"], 36);
    gen(&b, &[]);
    // the resolved config records the differing output path
    let data = |d: &Path| {
        files(d)
            .into_iter()
            .filter(|(n, _)| n != "resolved_config.conf")
            .collect::<Vec<_>>()
    };
    assert_eq!(data(&a), data(&b));
    assert!(a.join("manifest.csv").exists());
    assert!(a.join("resolved_config.conf").exists());
}

#[test]
fn missing_out_is_usage_error() {
    let s = run(&["gen-data", "--classes", "2"], 2);
    assert_eq!(s["status"], "error");
    assert_eq!(s["exit_code"], 2);
}

#[test]
fn unknown_flag_is_usage_error() {
    run(&["gen-data", "--colours", "2"], 2);
}

#[test]
fn zero_learning_rate_is_validation_error() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    gen(&data, &[]);
    let manifest = data.join("manifest.csv");
    let s = run(
        &[
            "train",
            "--data",
            manifest.to_str().unwrap(),
            "--lr",
            "0",
            "--out",
            tmp.path().join("t").to_str().unwrap(),
        ],
        2,
    );
    assert!(s["message"].as_str().unwrap().contains("learning_rate"));
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    let conf = tmp.path().join("run.conf");
    std::fs::write(&conf, "# small set\nclasses = 3\nper-class = 4\npatch = 32,32\n").unwrap();
    let out = tmp.path().join("d");
    let s = run(
        &[
            "--config",
            conf.to_str().unwrap(),
            "gen-data",
            "--classes",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
        0,
    );
    assert_eq!(s["n_samples"], 8);
    let resolved = std::fs::read_to_string(out.join("resolved_config.conf")).unwrap();
    assert!(resolved.contains("classes = 2\n"), "{resolved}");
    assert!(resolved.contains("per-class = 4\n"), "{resolved}");
}

#[test]
fn bad_config_value_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let conf = tmp.path().join("run.conf");
    std::fs::write(&conf, "noise = loud\n").unwrap();
    let out = tmp.path().join("d");
    run(
        &[
            "--config",
            conf.to_str().unwrap(),
            "gen-data",
            "--out",
            out.to_str().unwrap(),
        ],
        2,
    );
}

#[test]
fn unknown_holdout_class_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    gen(&data, &[]);
    let manifest = data.join("manifest.csv");
    let out = tmp.path().join("t");
    run(
        &[
            "train",
            "--data",
            manifest.to_str().unwrap(),
            "--holdout",
            "gravel",
            "--epochs",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
        2,
    );
}

#[test]
fn missing_manifest_is_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("t");
    run(
        &[
            "train",
            "--data",
            "/nonexistent/manifest.csv",
            "--out",
            out.to_str().unwrap(),
        ],
        1,
    );
}

fn train(manifest: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec![
        "train",
        "--data",
        manifest.to_str().unwrap(),
        "--epochs",
        "2",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args, 0)
}

#[test]
fn train_eval_classify_plot() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    gen(&data, &[]);
    let manifest = data.join("manifest.csv");
    let t = tmp.path().join("t");
    let s = train(&manifest, &t, &["--holdout", "synth02"]);
    assert_eq!(s["epochs"], 2);
    for f in [
        "checkpoint.zip",
        "best.zip",
        "history.csv",
        "metrics.json",
        "train_log.txt",
        "resolved_config.conf",
    ] {
        assert!(t.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(t.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let log = std::fs::read_to_string(t.join("train_log.txt")).unwrap();
    assert!(log.contains("synth00") && log.contains("synth01"));
    assert!(!log.contains("synth02"), "{log}");
    let metrics = read_json(&t.join("metrics.json"));
    assert!(metrics["train_census"].get("synth02").is_none());

    // identical flags and seed give identical checkpoints
    let t2 = tmp.path().join("t2");
    train(&manifest, &t2, &["--holdout", "synth02"]);
    for f in ["checkpoint.zip", "best.zip", "metrics.json"] {
        assert_eq!(
            std::fs::read(t.join(f)).unwrap(),
            std::fs::read(t2.join(f)).unwrap(),
            "{f}"
        );
    }

    let e = tmp.path().join("e");
    let test_manifest = t.join("splits").join("test.csv");
    let s = run(
        &[
            "eval",
            "--checkpoint",
            t.join("checkpoint.zip").to_str().unwrap(),
            "--data",
            test_manifest.to_str().unwrap(),
            "--out",
            e.to_str().unwrap(),
        ],
        0,
    );
    assert!(s["mse"].as_f64().unwrap().is_finite());
    let per_class = read_json(&e.join("metrics.json"))["per_class_mse"]
        .as_array()
        .unwrap()
        .clone();
    let held = per_class.iter().find(|c| c["class"] == "synth02").unwrap();
    assert_eq!(held["unseen"], true);
    assert!(per_class
        .iter()
        .filter(|c| c["class"] != "synth02")
        .all(|c| c["unseen"] == false));

    let c = tmp.path().join("c");
    run(
        &[
            "classify",
            "--checkpoint",
            t.join("checkpoint.zip").to_str().unwrap(),
            "--data",
            manifest.to_str().unwrap(),
            "--source",
            "ground-truth",
            "--out",
            c.to_str().unwrap(),
        ],
        0,
    );
    let cm = read_json(&c.join("metrics.json"));
    assert!(cm["macro_f1"].as_f64().unwrap() >= 0.0);
    let confusion = std::fs::read_to_string(c.join("confusion.csv")).unwrap();
    assert!(
        confusion.starts_with("true\\pred,synth00,synth01,synth02"),
        "{confusion}"
    );

    let preds = e.join("predictions");
    let first = std::fs::read_to_string(preds.join("index.csv")).unwrap();
    let row: usize = first
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    let pred = preds.join(format!("pred_{row:05}.csv"));
    let gt = data.join("spectra").join(format!("{row:05}.csv"));
    let fig = tmp.path().join("figs").join("pair.png");
    let s = run(
        &[
            "plot",
            "--pred",
            pred.to_str().unwrap(),
            "--gt",
            gt.to_str().unwrap(),
            "--out",
            fig.to_str().unwrap(),
        ],
        0,
    );
    assert!(s["mse"].as_f64().unwrap() > 0.0);
    assert_eq!(image::open(&fig).unwrap().width(), 900);
    assert!(fig.with_extension("json").exists());

    let svg = tmp.path().join("same.svg");
    let s = run(
        &[
            "plot",
            "--pred",
            gt.to_str().unwrap(),
            "--gt",
            gt.to_str().unwrap(),
            "--labels",
            "a,b",
            "--out",
            svg.to_str().unwrap(),
        ],
        0,
    );
    assert_eq!(s["mse"], 0.0);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn corrupted_checkpoint_is_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    gen(&data, &[]);
    let bad = tmp.path().join("bad.zip");
    std::fs::write(&bad, b"PK\x03\x04 definitely not an archive").unwrap();
    let s = run(
        &[
            "eval",
            "--checkpoint",
            bad.to_str().unwrap(),
            "--data",
            data.join("manifest.csv").to_str().unwrap(),
            "--out",
            tmp.path().join("e").to_str().unwrap(),
        ],
        1,
    );
    assert!(
        s["message"].as_str().unwrap().contains("corrupt checkpoint archive"),
        "{s}"
    );
}

fn write_profile(path: &Path, n: usize) {
    let mut s = String::from("wavelength_nm,normalized_count\n");
    for i in 0..n {
        s.push_str(&format!("{},{}\n", 400.0 + i as f64, i as f64 / n as f64));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn plot_length_mismatch() {
    let tmp = TempDir::new().unwrap();
    let (pred, gt) = (tmp.path().join("pred.csv"), tmp.path().join("gt.csv"));
    write_profile(&pred, 1550);
    write_profile(&gt, 1024);
    let s = run(
        &[
            "plot",
            "--pred",
            pred.to_str().unwrap(),
            "--gt",
            gt.to_str().unwrap(),
            "--out",
            tmp.path().join("p.png").to_str().unwrap(),
        ],
        1,
    );
    assert!(s["message"].as_str().unwrap().contains("length mismatch"));
}

#[test]
fn plot_rejects_unknown_extension() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("p.csv");
    write_profile(&p, 10);
    let out = tmp.path().join("p.gif");
    run(
        &[
            "plot",
            "--pred",
            p.to_str().unwrap(),
            "--gt",
            p.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        2,
    );
}

#[test]
fn colearn_needs_property_values() {
    let tmp = TempDir::new().unwrap();
    let plain = tmp.path().join("plain");
    gen(&plain, &[]);
    let args = |data: &Path, out: &Path| {
        vec![
            "colearn".to_string(),
            "--data".into(),
            data.join("manifest.csv").display().to_string(),
            "--epochs".into(),
            "1".into(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let a = args(&plain, &tmp.path().join("c1"));
    let s = run(&a.iter().map(String::as_str).collect::<Vec<_>>(), 1);
    assert!(s["message"].as_str().unwrap().contains("property"));

    let with = tmp.path().join("with");
    gen(&with, &["--with-property"]);
    let out = tmp.path().join("c2");
    let a = args(&with, &out);
    run(&a.iter().map(String::as_str).collect::<Vec<_>>(), 0);
    let metrics = read_json(&out.join("metrics.json"));
    assert!(metrics["test"]["property_rmse"].as_f64().unwrap().is_finite());
}

#[test]
fn trained_seen_class_plot_is_close() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    run(
        &[
            "gen-data",
            "--classes",
            "6",
            "--per-class",
            "40",
            "--noise",
            "0",
            "--seed",
            "3",
            "--out",
            data.to_str().unwrap(),
        ],
        0,
    );
    let t = tmp.path().join("t");
    let s = run(
        &[
            "train",
            "--data",
            data.join("manifest.csv").to_str().unwrap(),
            "--out",
            t.to_str().unwrap(),
        ],
        0,
    );
    assert_eq!(s["epochs"], 50);
    assert_eq!(
        std::fs::read_to_string(t.join("history.csv")).unwrap().lines().count(),
        51
    );

    let e = tmp.path().join("e");
    let test_manifest = t.join("splits").join("test.csv");
    run(
        &[
            "eval",
            "--checkpoint",
            t.join("checkpoint.zip").to_str().unwrap(),
            "--data",
            test_manifest.to_str().unwrap(),
            "--out",
            e.to_str().unwrap(),
        ],
        0,
    );
    let index = std::fs::read_to_string(e.join("predictions").join("index.csv")).unwrap();
    let row: usize = index
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    let fig = tmp.path().join("seen.svg");
    let s = run(
        &[
            "plot",
            "--pred",
            e.join("predictions")
                .join(format!("pred_{row:05}.csv"))
                .to_str()
                .unwrap(),
            "--gt",
            data.join("spectra").join(format!("{row:05}.csv")).to_str().unwrap(),
            "--out",
            fig.to_str().unwrap(),
        ],
        0,
    );
    let mse = read_json(&fig.with_extension("json"))["mse"].as_f64().unwrap();
    eprintln!("seen-class sidecar MSE {mse:.3e}");
    assert_eq!(s["mse"].as_f64().unwrap(), mse);
    assert!(mse <= 1e-3, "sidecar MSE {mse}");
}
