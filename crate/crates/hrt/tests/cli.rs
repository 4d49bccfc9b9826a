use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hrt::config::ExperimentConfig;

fn hrt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrt")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut c = ExperimentConfig::tiny();
    c.synthetic.samples_per_class = 4;
    c.train.epochs = 2;
    let path = dir.join("tiny.json");
    fs::write(&path, c.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs gen, train and eval into `root` and returns the metrics and
/// history bytes.
fn pipeline(root: &Path, config: &str) -> (Vec<u8>, Vec<u8>) {
    let (data, run, eval) = (root.join("data"), root.join("run"), root.join("eval"));
    assert!(hrt(&["--config", config, "gen", "--out", s(&data), "--seed", "3"]).status.success());
    let out = hrt(&["--config", config, "train", "--data", s(&data), "--out", s(&run), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint.bin");
    let out = hrt(&["--config", config, "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&eval)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (fs::read(eval.join("metrics.json")).unwrap(), fs::read(run.join("history.csv")).unwrap())
}

#[test]
fn gen_train_eval_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let a = pipeline(&dir.path().join("a"), &config);
    let b = pipeline(&dir.path().join("b"), &config);
    assert_eq!(a, b);
    let metrics: serde_json::Value = serde_json::from_slice(&a.0).unwrap();
    for k in ["t1", "tr", "ts", "h"] {
        let v = metrics[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    let history = String::from_utf8(a.1).unwrap();
    assert!(history.starts_with("epoch,L_ce,L_cal,L_reg,total,train_acc\n"));
    assert_eq!(history.lines().count(), 3);
    let echoed = ExperimentConfig::load(&dir.path().join("a/run/config.json")).unwrap();
    assert_eq!(echoed.train.epochs, 2);
}

#[test]
fn report_writes_one_row_per_patch() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    pipeline(dir.path(), &config);
    let out = dir.path().join("report");
    let ckpt = dir.path().join("run/checkpoint.bin");
    let data = dir.path().join("data");
    let o = hrt(&["report", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&out), "--split", "test-unseen", "--limit", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("agreement.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "sample_index,label,split,patch,a0,a1,a2,a3,a4,a5");
    assert_eq!(lines.count(), 2 * 4);
}

#[test]
fn gradcheck_passes_and_fails_with_the_right_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = hrt(&["gradcheck", "--out", s(dir.path())]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    assert!(dir.path().join("gradcheck.json").exists());
    let strict = hrt(&["gradcheck", "--tolerance", "1e-300"]);
    assert_eq!(strict.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&strict.stdout).contains("FAIL"));
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = hrt(&["eval", "--checkpoint", "/nonexistent/ckpt", "--data", "/nonexistent", "--out", s(dir.path())]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error: "));

    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{"train": {"epochs": 1, "learning_rate": 3}}"#).unwrap();
    let o = hrt(&["--config", s(&unknown), "gen", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));

    let mismatch = dir.path().join("mismatch.json");
    fs::write(&mismatch, r#"{"compaction": {"dim": 5}}"#).unwrap();
    let o = hrt(&["--config", s(&mismatch), "gen", "--out", s(&dir.path().join("y"))]);
    assert_eq!(o.status.code(), Some(1));

    assert_eq!(hrt(&["train"]).status.code(), Some(2), "clap usage errors keep clap's code");
}

#[test]
fn ablation_without_training_gives_baseline_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let o = hrt(&["--config", &config, "ablate", "--axis", "k-td", "--epochs", "0", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "axis,value,t1,tr,ts,h");
    assert_eq!(rows.len(), 6);
    for (i, r) in rows[1..].iter().enumerate() {
        assert!(r.starts_with(&format!("k_td,{},", i + 1)), "{r}");
    }
}
