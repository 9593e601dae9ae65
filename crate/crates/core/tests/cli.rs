use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nac")).args(args).output().expect("binary runs")
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "epochs = 2\nwarmup_epochs = 1\nbatch_size = 32\nhidden = 16,16\nhead_hidden = 16\ncode_dim = 8\n";

fn tiny_run(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("rings.csv");
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    assert!(nac(&["synth", "--kind", "rings", "--n", "256", "--seed", "3", "--out", s(&data)]).status.success());
    let ckpt = dir.join("model.json");
    let log = dir.join("log.csv");
    let out = nac(&[
        "train", "--data", s(&data), "--config", s(&cfg), "--out-checkpoint", s(&ckpt), "--log", s(&log),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (data, ckpt)
}

#[test]
fn mi_check_on_antipodal_pair() {
    let out = nac(&["mi-check", "--codes", s(&bundled("antipodal_n2_d1.csv")), "--p", "0.4"]);
    assert_eq!(out.status.code(), Some(0));
    let v: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((v - 0.0201).abs() < 1e-4, "{v}");
}

#[test]
fn bound_check_holds_on_generated_codebook() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codes.txt");
    std::fs::write(&path, "code\n0110100111\n1111000011\n0000011111\n1010101010\n0101100110\n").unwrap();
    let out = nac(&["bound-check", "--codes", s(&path), "--p", "0.25"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("lhs = ") && lines[1].starts_with("rhs = "));
    assert_eq!(lines[2], "holds = true");
}

#[test]
fn exit_codes() {
    assert_eq!(nac(&[]).status.code(), Some(1));
    assert_eq!(nac(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(nac(&["mi-check", "--p", "0.1", "--unknown"]).status.code(), Some(1));
    let help = nac(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8(help.stdout).unwrap().contains("gradcheck"));
    let missing = nac(&["mi-check", "--codes", "/definitely/not/here", "--p", "0.1"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());
    let bad_p = nac(&["mi-check", "--codes", s(&bundled("antipodal_n2_d1.csv")), "--p", "0.7"]);
    assert_eq!(bad_p.status.code(), Some(2));
}

#[test]
fn malformed_dataset_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "f0,f1,label\n0.1,0.2,0\n0.3,0\n").unwrap();
    let out = nac(&["train", "--data", s(&data), "--out-checkpoint", s(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains('3'));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let out = nac(&["synth", "--kind", "blobs", "--n", "64", "--classes", "4", "--seed", "9", "--out", s(p)]);
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(std::fs::read_to_string(&a).unwrap().starts_with("f0,f1,label\n"));
}

#[test]
fn train_is_reproducible_and_leaves_inputs_alone() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (data, ckpt1) = tiny_run(d1.path());
    let before = std::fs::read(&data).unwrap();
    let (_, ckpt2) = tiny_run(d2.path());
    assert_eq!(std::fs::read(&ckpt1).unwrap(), std::fs::read(&ckpt2).unwrap());
    assert_eq!(
        std::fs::read(d1.path().join("log.csv")).unwrap(),
        std::fs::read(d2.path().join("log.csv")).unwrap()
    );
    let log = std::fs::read_to_string(d1.path().join("log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), nac::training::LOG_HEADER);
    assert_eq!(log.lines().count(), 1 + 2 * (256 / 32));

    let json = d1.path().join("eval.json");
    let out = nac(&["eval-linear", "--checkpoint", s(&ckpt1), "--data", s(&data), "--out-json", s(&json)]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&data).unwrap(), before);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["probe_accuracy", "chosen_lr", "map", "distinct_codes", "config_hash"] {
        assert!(keys.contains(&k), "{k}");
    }
    assert!(v["map"].is_null());
    let hash = nac::evaluation::checkpoint_hash(&std::fs::read(&ckpt1).unwrap());
    assert_eq!(v["config_hash"], hash.as_str());
}

#[test]
fn retrieval_regions_and_codes_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = tiny_run(dir.path());
    let (json, index) = (dir.path().join("map.json"), dir.path().join("index.txt"));
    let out = nac(&[
        "eval-retrieve", "--checkpoint", s(&ckpt), "--index-data", s(&data), "--query-data", s(&data),
        "--out-json", s(&json), "--export-index", s(&index),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let map = v["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    let text = std::fs::read_to_string(&index).unwrap();
    let imported = nac::codes::HashIndex::import(&text).unwrap();
    assert_eq!(imported.len(), 256);
    assert_eq!(imported.export(), text);

    let (svg, csv) = (dir.path().join("r.svg"), dir.path().join("r.csv"));
    let out = nac(&[
        "regions", "--checkpoint", s(&ckpt), "--resolution", "64", "--out-svg", s(&svg), "--out-csv", s(&csv),
        "--data", s(&data),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    let stats = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = stats.lines().collect();
    assert_eq!(lines[0], "resolution,distinct_patterns,dataset_distinct_codes");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("64,"));

    let out = nac(&["regions", "--checkpoint", s(&ckpt), "--resolution", "8", "--out-svg", s(&svg), "--out-csv", s(&csv)]);
    assert_eq!(out.status.code(), Some(2));

    let out = nac(&["mi-check", "--checkpoint", s(&ckpt), "--data", s(&data), "--p", "0.2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mi: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!(mi > 0.0 && mi <= (256f64).ln() + 1e-9);
    assert_eq!(nac(&["mi-check", "--checkpoint", s(&ckpt), "--p", "0.2"]).status.code(), Some(1));
}

#[test]
fn sweep_and_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, format!("{TINY}task_n = 128\n")).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let out = nac(&["sweep", "--config", s(&cfg), "--p-list", "0.1,0.4", "--out-csv", s(p)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().next().unwrap(), nac::analysis::SWEEP_HEADER);
    assert_eq!(text.lines().count(), 3);
    assert_eq!(nac(&["sweep", "--p-list", "0.6", "--out-csv", s(&a)]).status.code(), Some(2));

    let out = nac(&["gradcheck", "--config", s(&cfg), "--models", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().last().unwrap(), "6 of 6 checks passed");
}
