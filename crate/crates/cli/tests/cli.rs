use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use defectlab_core::classifier::{build_model, save_checkpoint, ModelConfig};
use defectlab_core::dataset::load_manifest;
use serde_json::{json, Value};
use tempfile::TempDir;

const MODEL: [&str; 6] = ["--backbone", "compact", "--base-width", "2", "--head", "8,4"];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_defectlab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data with 12 train, 6 validation and 6 test images per class.
fn dataset() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = dir.path().join("m.csv");
    let o = run(&[
        "synth", "--out", s(&data), "--train-per-class", "12", "--val-per-class", "6",
        "--test-per-class", "6", "--manifest", s(&manifest),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (dir, manifest)
}

#[test]
fn scan_writes_a_manifest_and_reports_counts() {
    let (dir, _) = dataset();
    let out = dir.path().join("scan.csv");
    let o = run(&["scan", "--root", s(&dir.path().join("data")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("train: 24, validation: 12, test: 12"));
    assert_eq!(load_manifest(&out).unwrap().len(), 48);
}

#[test]
fn scan_rejects_three_classes_and_unwritable_output() {
    let (dir, _) = dataset();
    let root = dir.path().join("data");
    let extra = root.join("train/2_other");
    std::fs::create_dir_all(&extra).unwrap();
    std::fs::copy(root.join("train/0_nominal/00000.png"), extra.join("x.png")).unwrap();
    let o = run(&["scan", "--root", s(&root), "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("class_count_error"), "{}", stderr(&o));

    std::fs::remove_dir_all(&extra).unwrap();
    let o = run(&["scan", "--root", s(&root), "--out", "/nonexistent/dir/m.csv"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_64() {
    let (dir, m) = dataset();
    let ckpt = dir.path().join("a.ckpt");
    let o = run(&["train", "--manifest", s(&m), "--epochs", "0", "--out", s(&ckpt)]);
    assert_eq!(code(&o), 64);
    assert_eq!(code(&run(&["frobnicate"])), 64);
    assert_eq!(code(&run(&["train"])), 64);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn train_is_reproducible_and_reports_validation() {
    let (dir, m) = dataset();
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let ckpt = dir.path().join(format!("{name}.ckpt"));
        let mut args = vec!["train", "--manifest", s(&m), "--epochs", "2", "--seed", "3", "--out", s(&ckpt)];
        args.extend(MODEL);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("validation (12 samples)"));
        let report = dir.path().join(format!("{name}.report.json"));
        outs.push((std::fs::read(&ckpt).unwrap(), std::fs::read(&report).unwrap()));
    }
    assert_eq!(outs[0], outs[1]);
    let report: Value = serde_json::from_slice(&outs[0].1).unwrap();
    let cm = &report["validation"]["confusion"];
    let total: u64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| cm[i][j].as_u64().unwrap()).sum();
    assert_eq!(total, 12);
    assert_eq!(report["training"]["epochs"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_manifest_exits_2_and_divergence_exits_3() {
    let (dir, m) = dataset();
    let ckpt = dir.path().join("a.ckpt");
    let o = run(&["train", "--manifest", s(&dir.path().join("none.csv")), "--out", s(&ckpt)]);
    assert_eq!(code(&o), 2);

    let mut args = vec!["train", "--manifest", s(&m), "--epochs", "2", "--lr", "1e300", "--out", s(&ckpt)];
    args.extend(MODEL);
    let o = run(&args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("divergence"));
    assert!(!ckpt.exists());
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let (dir, m) = dataset();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        json!({
            "backbone": "compact", "base_width": 2, "head": "8,4",
            "train": {"epochs": 1, "lr": 1e300}
        })
        .to_string(),
    )
    .unwrap();
    let ckpt = dir.path().join("a.ckpt");
    let o = run(&["--config", s(&cfg), "train", "--manifest", s(&m), "--out", s(&ckpt)]);
    assert_eq!(code(&o), 3, "file value should apply: {}", stderr(&o));
    let o = run(&["--config", s(&cfg), "train", "--manifest", s(&m), "--out", s(&ckpt), "--lr", "0.01"]);
    assert_eq!(code(&o), 0, "flag should win: {}", stderr(&o));
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("a.report.json")).unwrap()).unwrap();
    assert_eq!(report["train_config"]["epochs"], 1);
    assert_eq!(report["model_config"]["head_widths"], json!([8, 4]));
}

#[test]
fn constant_half_model_scores_half_on_a_balanced_split() {
    let (dir, m) = dataset();
    let mut model = build_model(&ModelConfig::compact(32, 2, (8, 4)), 0).unwrap();
    let out = &mut model.head_mut().output;
    out.weight.fill(0.0);
    out.bias.fill(0.0);
    let ckpt = dir.path().join("half.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let report = dir.path().join("eval.json");
    let o = run(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&m), "--split", "test", "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["accuracy"], 0.5);
    assert_eq!(r["auc"], 0.5);
}

#[test]
fn autolabel_output_carries_provenance() {
    let (dir, m) = dataset();
    let model = build_model(&ModelConfig::compact(32, 2, (8, 4)), 1).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let out = dir.path().join("auto.csv");
    let o = run(&["autolabel", "--checkpoint", s(&ckpt), "--manifest", s(&m), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().next().unwrap().ends_with(",label_source"));
    assert_eq!(text.lines().count(), 13);
    let tag = format!("autolabel:{}", model.checksum());
    assert!(text.lines().skip(1).all(|l| l.ends_with(&tag)));
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("auto.report.json")).unwrap()).unwrap();
    assert_eq!((report["total"].as_u64(), report["labeled"].as_u64()), (Some(12), Some(12)));

    let gated = dir.path().join("gated.csv");
    let o = run(&[
        "autolabel", "--checkpoint", s(&ckpt), "--manifest", s(&m), "--out", s(&gated),
        "--min-confidence", "1.0",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!gated.exists());
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("gated.report.json")).unwrap()).unwrap();
    assert_eq!(report["zero_coverage"], true);
}

#[test]
fn sweep_single_cell_grid_and_rerun_is_identical() {
    let (dir, m) = dataset();
    let grid = dir.path().join("grid.json");
    std::fs::write(
        &grid,
        json!({"optimizers": ["adam"], "learning_rates": [0.001], "batch_sizes": [4], "epochs": [2], "l2_lambdas": [0.001]})
            .to_string(),
    )
    .unwrap();
    let out = dir.path().join("report.csv");
    let state = dir.path().join("state");
    let mut args = vec!["sweep", "--manifest", s(&m), "--grid", s(&grid), "--out", s(&out), "--state-dir", s(&state)];
    args.extend(MODEL);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = std::fs::read_to_string(&out).unwrap();
    assert_eq!(first.lines().count(), 2);
    assert!(first.lines().nth(1).unwrap().starts_with("adam,0.001,4,2,"));
    let o = run(&args);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), first);
}

fn al_args<'a>(m: &'a Path, dir: &'a Path) -> Vec<&'a str> {
    let mut v = vec![
        "al", "--manifest", s(m), "--session-dir", s(dir), "--query-size", "4", "--max-queries", "3",
        "--fine-tune-epochs", "1", "--deterministic",
    ];
    v.extend(MODEL);
    v
}

#[test]
fn oracle_run_writes_history_plot_and_is_reproducible() {
    let (dir, m) = dataset();
    let a = dir.path().join("a/run");
    let b = dir.path().join("b/run");
    for d in [&a, &b] {
        let o = run(&al_args(&m, d));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("exhausted after 3 queries, 12 labeled"), "{}", stdout(&o));
    }
    let history = std::fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    assert_eq!(history, std::fs::read_to_string(b.join("history.csv")).unwrap());
    for file in ["session.json", "checkpoints/model_003.ckpt", "batches/003.json"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let svg = std::fs::read_to_string(a.join("history.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 3);

    // Rerunning a finished session only reports it.
    let o = run(&al_args(&m, &a));
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(a.join("history.csv")).unwrap(), history);
}

#[test]
fn compare_runs_both_strategies() {
    let (dir, m) = dataset();
    let d = dir.path().join("cmp");
    let mut args = al_args(&m, &d);
    args.extend(["--compare", "--repeats", "2", "--target", "0.5"]);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: Value = serde_json::from_slice(&std::fs::read(d.join("comparison.json")).unwrap()).unwrap();
    for strategy in ["uncertainty", "random"] {
        assert_eq!(summary[strategy]["runs"], 2);
        assert_eq!(summary[strategy]["labels_to_target"].as_array().unwrap().len(), 2);
        assert!(d.join(strategy).join("seed-1/history.csv").is_file());
    }
}

fn http(addr: &str, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
    let mut stream = TcpStream::connect(addr).unwrap();
    let payload = body.map(|b| b.to_string()).unwrap_or_default();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: t\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
        payload.len()
    )
    .unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let status = raw[9..12].parse().unwrap();
    let body = raw.split("\r\n\r\n").nth(1).unwrap_or("");
    (status, serde_json::from_str(body).unwrap_or(Value::Null))
}

#[test]
fn serve_mode_runs_a_session_for_a_human() {
    let (dir, m) = dataset();
    let manifest = load_manifest(&m).unwrap();
    let session = dir.path().join("store/human");
    let mut args = al_args(&m, &session);
    args.extend(["--mode", "serve", "--bind", "127.0.0.1:0", "--max-queries", "1"]);
    let mut child = bin().args(&args).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let url_line = lines.next().unwrap().unwrap();
    let url = url_line.strip_prefix("session URL: http://").unwrap();
    let (addr, path) = url.split_once('/').unwrap();
    assert_eq!(path, "api/v1/sessions/human");

    let pending = loop {
        let (status, p) = http(addr, "GET", "/api/v1/sessions/human/pending", None);
        assert_eq!(status, 200);
        if p["status"] == "awaiting_labels" {
            break p;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    };
    let items = pending["items"].as_array().unwrap();
    assert_eq!(items.len(), 4);
    let labels: serde_json::Map<String, Value> = items
        .iter()
        .map(|it| {
            let id = it["sample_id"].as_str().unwrap();
            (id.to_string(), json!(u8::from(manifest.get(id).unwrap().true_label.unwrap())))
        })
        .collect();
    let (status, reply) = http(addr, "POST", "/api/v1/sessions/human/labels", Some(&json!({"labels": labels})));
    assert_eq!(status, 202, "{reply}");

    let status = child.wait().unwrap();
    assert!(status.success());
    let rest: Vec<String> = lines.map(|l| l.unwrap()).collect();
    assert!(rest.iter().any(|l| l.contains("exhausted after 1 queries, 4 labeled")), "{rest:?}");
    assert!(session.join("history.svg").is_file());
}
