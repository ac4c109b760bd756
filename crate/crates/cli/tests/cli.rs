use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_lora-lab");

fn lab(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("LORA_LAB_THREADS").output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn smoke_config(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../experiment.default"))
        .unwrap()
        .replace("steps = 500", "steps = 12")
        .replace("record_every = 10", "record_every = 4")
        .replace("width = 1024", "width = 16")
        .replace("widths = [128, 256, 512, 1024, 2048]", "widths = [8, 16, 32]")
        .replace("lrs = { min = 0.000244140625, max = 0.125, count = 10 }", "lrs = [0.005, 0.02, 0.08]")
        .replace("seeds = 3", "seeds = 2");
    let path = dir.join("smoke.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn predict_reports_regimes() {
    let v = stdout_json(&lab(&["predict", "--scheme", "A", "--lr-exp", "-1/2"]));
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["scheme"], "A");
    assert_eq!(v["lr_exp"], "-1/2");
    assert_eq!(v["verdicts"]["efficient"], true);
    assert_eq!(v["verdicts"]["internal_instability"], true);
    let step = &v["steps"][2];
    for key in ["t", "gZA", "gB", "gZB", "d1", "d2", "d3"] {
        assert!(step.get(key).is_some(), "missing {key}");
    }

    let v = stdout_json(&lab(&["predict", "--scheme", "B", "--lr-exp", "-1"]));
    assert_eq!(v["verdicts"]["efficient"], false);
    assert_eq!(v["verdicts"]["output_stable"], true);

    let v = stdout_json(&lab(&["predict", "--scheme", "A", "--lr-exp", "-inf"]));
    assert_eq!(v["steps"][3]["gB"], "-inf");
    assert_eq!(v["verdicts"]["feature_learning"], false);

    let v = stdout_json(&lab(&["predict", "--lr-exp", "-3/4"]));
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[test]
fn bad_exponent_is_a_usage_error() {
    let out = lab(&["predict", "--scheme", "A", "--lr-exp", "half"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot parse exponent `half`"));
    let out = lab(&["predict", "--scheme", "C", "--lr-exp", "-1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_is_deterministic_and_zero_lr_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let run = |out: &str, extra: &[&str]| {
        let out_dir = dir.path().join(out);
        let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = lab(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out_dir
    };
    let a = run("a", &[]);
    let b = run("b", &["--threads", "2"]);
    let csv = fs::read(a.join("train_n16_A.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("train_n16_A.csv")).unwrap());
    assert_eq!(fs::read(a.join("train_n16_A.json")).unwrap(), fs::read(b.join("train_n16_A.json")).unwrap());
    let summary: Value = serde_json::from_slice(&fs::read(a.join("train_n16_A.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);

    let flat = run("flat", &["--lrs", "0", "--scheme", "B", "--seed", "5"]);
    let summary: Value = serde_json::from_slice(&fs::read(flat.join("train_n16_B.json")).unwrap()).unwrap();
    assert_eq!(summary["initial_train_loss"], summary["final_train_loss"]);

    let o = lab(&["train", "--config", cfg.to_str().unwrap(), "--scheme", "both"]);
    assert!(!o.status.success());
}

#[test]
fn sweep_analyze_plot_are_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let sweep = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = Command::new(BIN)
            .args(["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("LORA_LAB_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let one = sweep("one", "1");
    let three = sweep("three", "3");
    for file in ["sweep.csv", "sweep.json"] {
        assert_eq!(fs::read(one.join(file)).unwrap(), fs::read(three.join(file)).unwrap(), "{file}");
    }
    let echoed = fs::read_to_string(one.join("experiment.toml")).unwrap();
    let o = lab(&["train", "--config", one.join("experiment.toml").to_str().unwrap(), "--out", dir.path().join("echo").to_str().unwrap()]);
    assert!(o.status.success() && echoed.contains("widths = [8, 16, 32]"));
    let csv = fs::read_to_string(one.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("width,scheme,lr,seed,step,train_loss,test_loss,meanZA,meanZB,diverged\n"));
    // 3 widths x 3 lrs x 2 schemes x 2 seeds, 4 recorded steps each
    assert_eq!(csv.lines().count(), 1 + 36 * 4);

    let records = one.join("sweep.csv");
    let report = stdout_json(&lab(&["analyze", records.to_str().unwrap(), "--min-width", "8"]));
    assert_eq!(report["schema_version"], 1);
    assert!(report["eta_star"]["fit_a"]["slope"].is_f64());
    assert!(report["eta_star"]["fit_b"]["slope"].is_f64());
    assert_eq!(report["eta_star"]["crossover"].as_array().unwrap().len(), 3);

    let again = stdout_json(&lab(&["analyze", three.join("sweep.csv").to_str().unwrap(), "--min-width", "8"]));
    assert_eq!(report, again);

    for kind in ["eta_star_vs_width", "feature_norms_vs_step", "loss_vs_step"] {
        let svgs: Vec<Vec<u8>> = [&one, &three]
            .iter()
            .map(|d| {
                let o = lab(&["plot", d.join("sweep.csv").to_str().unwrap(), "--kind", kind, "--out", d.to_str().unwrap()]);
                assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
                fs::read(d.join(format!("{kind}.svg"))).unwrap()
            })
            .collect();
        assert_eq!(svgs[0], svgs[1], "{kind}");
        assert!(svgs[0].starts_with(b"<svg"));
    }
    let svg = fs::read_to_string(one.join("eta_star_vs_width.svg")).unwrap();
    assert!(svg.contains(">Init A<") && svg.contains(">Init B<") && svg.contains(">n^-1<") && svg.contains(">n^-1/2<"));

    let o = lab(&["plot", records.to_str().unwrap(), "--kind", "loss_vs_step", "--widths", "64", "--out", "/tmp"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("available widths: [8, 16, 32]"));
}

/// Two learning rates per cell; the loss is lowest at `best(n)`.
fn planted_csv(best_a: fn(f64) -> f64, best_b: fn(f64) -> f64) -> String {
    let mut s = String::from("width,scheme,lr,seed,step,train_loss,test_loss,meanZA,meanZB,diverged\n");
    for w in [512usize, 1024, 2048, 4096] {
        for (scheme, best) in [("A", best_a), ("B", best_b)] {
            let lr = best(w as f64);
            for (lr, loss) in [(lr, 0.01), (lr * 4.0, 0.02)] {
                s += &format!("{w},{scheme},{lr},0,0,1,1,1,0,false\n{w},{scheme},{lr},0,10,{loss},{loss},2,0.5,false\n");
            }
        }
    }
    s
}

#[test]
fn strict_analyze_follows_planted_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    fs::write(&good, planted_csv(|n| 2.0 * n.powf(-0.75), |n| 1.0 / n)).unwrap();
    let out = lab(&["analyze", good.to_str().unwrap(), "--strict", "--out", dir.path().to_str().unwrap()]);
    let v = stdout_json(&out);
    assert_eq!(v["eta_star"]["verdict_b"]["pass"], true);
    assert!((v["eta_star"]["fit_b"]["slope"].as_f64().unwrap() + 1.0).abs() < 1e-9);
    assert!(dir.path().join("analysis.json").exists());

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, planted_csv(|n| 2.0 * n.powf(-0.75), |n| 1.0 / n.sqrt())).unwrap();
    let out = lab(&["analyze", bad.to_str().unwrap(), "--strict"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["eta_star"]["verdict_b"]["pass"], false);
    assert!(lab(&["analyze", bad.to_str().unwrap()]).status.success());
}

#[test]
fn corrupt_records_name_file_and_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.csv");
    let text = planted_csv(|n| 1.0 / n, |n| 1.0 / n).replacen(",0.01,0.01,", ",0.01,oops,", 1);
    fs::write(&path, text).unwrap();
    let out = lab(&["analyze", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("broken.csv: row 2:"), "{err}");

    let out = lab(&["analyze", dir.path().join("missing.csv").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}

#[test]
fn config_errors_are_descriptive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let text = fs::read_to_string(&cfg).unwrap();

    let missing = dir.path().join("missing.toml");
    fs::write(&missing, text.replace("record_every = 4\n", "")).unwrap();
    let out = lab(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing field `record_every`"));

    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, text.replace("[trial]", "[trial]\nmomentum = 0.5")).unwrap();
    let out = lab(&["sweep", "--config", unknown.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field `momentum`"));
}
