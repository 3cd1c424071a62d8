use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use modulora::checkpoint::adapter_section_offset;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_modulora"));
    c.env_remove("MODULORA_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let mut full = vec!["--report", "json"];
    full.extend_from_slice(args);
    let out = run(&full);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json report")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn quantized(dir: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.path().join(name);
    let mut args = vec!["quantize", "--out", p(&path)];
    args.extend_from_slice(extra);
    ok_json(&args);
    path
}

fn frozen_hash(path: &Path) -> String {
    ok_json(&["inspect", "--checkpoint", p(path)])["frozen_hash"]
        .as_str()
        .unwrap()
        .to_owned()
}

#[test]
fn quantize_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let a = quantized(&dir, "a.mlra", &["--bits", "4", "--seed", "7"]);
    let b = quantized(&dir, "b.mlra", &["--bits", "4", "--seed", "7"]);
    let c = quantized(&dir, "c.mlra", &["--bits", "4", "--seed", "8"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    assert_eq!(frozen_hash(&a), frozen_hash(&b));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let flag = quantized(&dir, "flag.mlra", &["--seed", "42"]);
    let env = dir.path().join("env.mlra");
    let out = bin()
        .env("MODULORA_SEED", "42")
        .args(["quantize", "--out", p(&env)])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(flag).unwrap(), std::fs::read(env).unwrap());
}

#[test]
fn optq_without_calibration_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "quantize",
        "--out",
        p(&dir.path().join("x.mlra")),
        "--quantizer",
        "optq",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--calib"));
    assert!(!dir.path().join("x.mlra").exists());
}

#[test]
fn invalid_flags_exit_two() {
    let dir = TempDir::new().unwrap();
    let o = dir.path().join("x.mlra");
    for args in [
        vec!["quantize", "--out", p(&o), "--bits", "5"],
        vec!["quantize", "--out", p(&o), "--materialize", "tile"],
        vec!["quantize", "--out", p(&o), "--group-size", "5"],
        vec!["quantize", "--out", p(&o), "--calib", "random:0"],
    ] {
        assert_eq!(run(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn io_failures_exit_one() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.mlra");
    assert_eq!(
        run(&["inspect", "--checkpoint", p(&missing)]).status.code(),
        Some(1)
    );
    let junk = dir.path().join("junk.mlra");
    std::fs::write(&junk, b"NOPE\x01\x00").unwrap();
    let out = run(&["inspect", "--checkpoint", p(&junk)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn optq_proxy_loss_not_above_rtn() {
    let dir = TempDir::new().unwrap();
    let calib = ["--calib", "random:256", "--bits", "3", "--seed", "3"];
    let rtn = ok_json(
        &[
            &["quantize", "--out", p(&dir.path().join("r.mlra"))][..],
            &calib,
        ]
        .concat(),
    );
    let optq = ok_json(
        &[
            &[
                "quantize",
                "--out",
                p(&dir.path().join("o.mlra")),
                "--quantizer",
                "optq",
            ][..],
            &calib,
        ]
        .concat(),
    );
    let layers = |v: &Value| {
        v["layers"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| l["proxy_loss"].as_f64().unwrap())
            .collect::<Vec<_>>()
    };
    for (o, r) in layers(&optq).iter().zip(layers(&rtn)) {
        assert!(*o <= r, "optq {o} > rtn {r}");
    }
}

#[test]
fn finetune_zero_steps_leaves_file_unchanged() {
    let dir = TempDir::new().unwrap();
    let ck = quantized(&dir, "m.mlra", &[]);
    let out = dir.path().join("f.mlra");
    let report = ok_json(&[
        "finetune",
        "--checkpoint",
        p(&ck),
        "--out",
        p(&out),
        "--steps",
        "0",
    ]);
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&out).unwrap());
    assert_eq!(frozen_hash(&ck), frozen_hash(&out));
    let t = &report["train"];
    assert_eq!(t["initial_loss"], t["final_train_loss"]);
    assert_eq!(t["loss_curve"].as_array().unwrap().len(), 0);
}

#[test]
fn finetune_changes_only_adapters_and_beats_baseline() {
    let dir = TempDir::new().unwrap();
    let ck = quantized(&dir, "m.mlra", &["--bits", "4", "--seed", "5"]);
    let runs: Vec<(PathBuf, Value)> = ["f1.mlra", "f2.mlra"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let r = ok_json(&[
                "finetune",
                "--checkpoint",
                p(&ck),
                "--out",
                p(&out),
                "--steps",
                "150",
                "--seed",
                "5",
            ]);
            (out, r)
        })
        .collect();
    let (out, report) = &runs[0];
    assert_eq!(report["train"], runs[1].1["train"]);
    assert_eq!(
        std::fs::read(out).unwrap(),
        std::fs::read(&runs[1].0).unwrap()
    );

    let before = std::fs::read(&ck).unwrap();
    let after = std::fs::read(out).unwrap();
    let off = adapter_section_offset(&before).unwrap();
    assert_eq!(adapter_section_offset(&after).unwrap(), off);
    assert_eq!(before[..off], after[..off]);
    assert_ne!(before[off..], after[off..]);
    assert_eq!(frozen_hash(&ck), frozen_hash(out));
    assert_eq!(
        report["train"]["frozen_hash"].as_str().unwrap(),
        frozen_hash(&ck)
    );

    let baseline = report["baseline_mse"].as_f64().unwrap();
    let fin = report["final_mse"].as_f64().unwrap();
    assert!(fin < baseline, "final {fin} vs baseline {baseline}");

    // eval of the finetuned file agrees with the finetune report
    let eval = ok_json(&["eval", "--checkpoint", p(out), "--seed", "5"]);
    assert_eq!(eval["metrics"]["mse"].as_f64().unwrap(), fin);
    assert_eq!(eval["baseline"]["mse"].as_f64().unwrap(), baseline);
}

#[test]
fn dataset_cache_is_reused() {
    let dir = TempDir::new().unwrap();
    let ck = quantized(&dir, "m.mlra", &[]);
    let before = frozen_hash(&ck);
    let data = dir.path().join("task.jsonl");
    let first = ok_json(&["eval", "--checkpoint", p(&ck), "--data", p(&data)]);
    assert!(data.exists());
    // a different seed would change a freshly generated task, but the cache wins
    let second = ok_json(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--task-seed",
        "99",
    ]);
    assert_eq!(first["metrics"], second["metrics"]);
    assert_eq!(frozen_hash(&ck), before);
}

#[test]
fn divergence_exits_three() {
    let dir = TempDir::new().unwrap();
    let ck = quantized(&dir, "m.mlra", &[]);
    let out = dir.path().join("f.mlra");
    let res = run(&[
        "finetune",
        "--checkpoint",
        p(&ck),
        "--out",
        p(&out),
        "--lr",
        "1e250",
        "--steps",
        "20",
    ]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("last good step"));
    assert!(!out.exists());
}

#[test]
fn bench_memory_matches_ledger_bounds() {
    let dir = TempDir::new().unwrap();
    let ck = quantized(&dir, "m.mlra", &["--dims", "4,4,8,8"]);
    let before = frozen_hash(&ck);
    let report = ok_json(&["bench-memory", "--checkpoint", p(&ck)]);
    let rows = report["rows"].as_array().unwrap();
    let peak = |s: &str| {
        rows.iter().find(|r| r["strategy"] == s).unwrap()["peak_materialized_bytes"]
            .as_u64()
            .unwrap()
    };
    assert_eq!(peak("weight_materialize"), 512);
    assert_eq!(peak("row_materialize"), 64);
    assert_eq!(peak("quantizer_matvec"), 0);
    assert!(rows.iter().all(|r| r["passed"] == true));
    assert!(rows
        .iter()
        .all(|r| r["peak_materialized_bytes"].as_u64().unwrap()
            < report["sum_of_layers_bytes"].as_u64().unwrap()));
    let text = run(&["bench-memory", "--checkpoint", p(&ck)]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("never reached"));
    assert_eq!(frozen_hash(&ck), before);
}

#[test]
fn bench_bits_is_deterministic() {
    let args = [
        "bench-bits",
        "--steps",
        "10",
        "--hidden",
        "16",
        "--seed",
        "2",
    ];
    let a = ok_json(&args);
    let b = ok_json(&args);
    assert_eq!(a, b);
    assert_eq!(a["schema"], "modulora.bit_budget/1");
    assert_eq!(a["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn report_file_written_alongside_text() {
    let dir = TempDir::new().unwrap();
    let ck = quantized(&dir, "m.mlra", &[]);
    let file = dir.path().join("inspect.json");
    let out = run(&["inspect", "--checkpoint", p(&ck), "--report-file", p(&file)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("layer0"));
    let v: Value = serde_json::from_slice(&std::fs::read(file).unwrap()).unwrap();
    assert_eq!(v["schema"], "modulora.inspect_report/1");
    assert_eq!(v["frozen_hash"].as_str().unwrap(), frozen_hash(&ck));
}
