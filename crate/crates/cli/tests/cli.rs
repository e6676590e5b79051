use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = "train = 160\ndev = 40\ntest = 40\n";
const RUN: &str = "layers = 1\nheads = 2\nhidden = 16\nffn = 32\nmax_len = 64\nepochs = 2\nruns = 1\n";

fn setup(dir: &Path) {
    fs::write(dir.join("spec.toml"), SPEC).unwrap();
    fs::write(dir.join("run.toml"), RUN).unwrap();
    let out = tmm(&["gen-data", "--config", s(&dir.join("spec.toml")), "--seed", "3", "--out", s(&dir.join("data"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let data = dir.path().join("data");
    let first = fs::read(data.join("train.jsonl")).unwrap();
    assert!(first.starts_with(b"# tmm-absa v1\n"));
    let again = dir.path().join("again");
    let out = tmm(&["gen-data", "--config", s(&dir.path().join("spec.toml")), "--seed", "3", "--out", s(&again)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(again.join("train.jsonl")).unwrap(), first);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Ave."));

    let bad = tmm(&["gen-data", "--cross-prob", "1.5", "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn train_evaluate_predict_attn() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let data = d.join("data");
    let model_dir = d.join("model");
    let out = tmm(&["train", "--config", s(&d.join("run.toml")), "--data", s(&data), "--out", s(&model_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = model_dir.join("model.ckpt");
    assert!(ckpt.exists() && model_dir.join("seed-7.ckpt").exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(model_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"][0]["test_forward_passes"], 40);

    let again = d.join("again");
    let out = tmm(&["train", "--config", s(&d.join("run.toml")), "--data", s(&data), "--out", s(&again)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(again.join("model.ckpt")).unwrap(), fs::read(&ckpt).unwrap());

    let test = data.join("test.jsonl");
    let out = tmm(&["evaluate", s(&ckpt), "--data", s(&test), "--out", s(&d.join("eval.json"))]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("macro_f1"));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert!(eval["accuracy"].is_number());

    let out = tmm(&["predict", s(&ckpt), "--data", s(&test)]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("# tmm-absa v1"));
    let mut records = 0;
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for a in v["aspects"].as_array().unwrap() {
            assert!(a["predicted"].is_string());
            let p: f64 = a["probabilities"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((p - 1.0).abs() < 1e-9);
        }
        records += 1;
    }
    assert_eq!(records, 40);

    let attn = d.join("attn");
    let out = tmm(&["attn", s(&ckpt), "--data", s(&test), "--layer", "all", "--out", s(&attn)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let html = fs::read_to_string(attn.join("attention.html")).unwrap();
    assert!(html.contains("aspect 1"));
    let tsv = fs::read_to_string(attn.join("attention.tsv")).unwrap();
    for row in tsv.lines().skip(1) {
        let sum: f64 = row.split('\t').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    let out = tmm(&["attn", s(&ckpt), "--data", s(&test), "--layer", "4", "--out", s(&attn)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("layer"));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    fs::write(d.join("bad.toml"), "layers = 1\nbatch = 8\n").unwrap();
    let out = tmm(&["train", "--config", s(&d.join("bad.toml")), "--data", s(&d.join("data")), "--out", s(&d.join("m"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch"));

    let out = tmm(&["train", "--data", s(&d.join("missing")), "--out", s(&d.join("m"))]);
    assert_eq!(code(&out), 1);

    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = tmm(&["evaluate", s(&d.join("junk.ckpt")), "--data", s(&d.join("data/test.jsonl"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    fs::write(d.join("hot.toml"), format!("{RUN}learning_rate = 1e300\n")).unwrap();
    let out = tmm(&["train", "--config", s(&d.join("hot.toml")), "--data", s(&d.join("data")), "--out", s(&d.join("m"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn grad_check_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("gc.json");
    let out = tmm(&["grad-check", "--out", s(&report)]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["entries"].as_array().unwrap().iter().any(|e| e["name"] == "end_to_end.loss"));

    let out = tmm(&["grad-check", "--corrupt-backward", "layer_norm"]);
    assert_eq!(code(&out), 2);
    let out = tmm(&["grad-check", "--corrupt-backward", "nonsense"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn compare_reports_both_schemes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = tmm(&["compare", "--config", s(&d.join("run.toml")), "--data", s(&d.join("data")), "--out", s(&d.join("cmp"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("cmp/comparison.json")).unwrap()).unwrap();
    assert_eq!(v["forward_counts_match"], true);
    assert_eq!(v["tmm"]["runs"][0]["test_forward_passes"], v["test_sentences"]);
    assert_eq!(v["baseline"]["runs"][0]["test_forward_passes"], v["test_aspects"]);
    assert!(v["delta_macro_f1"].is_number());
}
