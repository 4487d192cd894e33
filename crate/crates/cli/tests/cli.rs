use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dsnorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsnorm"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, manifest: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"model = "resnet1d8"
norm = "dsbn"
epochs = 1
batch_size = 4

[architecture]
widths = [4, 4, 8]
kernel_size = 3

[data]
manifest = "{}"
"#,
        manifest.display()
    );
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn small_synth(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("synth.toml");
    fs::write(
        &cfg,
        "[data.synthetic]\nnum_domains = 3\nsamples_per_domain_per_class = 4\nchannels = 2\ntimesteps = 32\nsample_rate_hz = 32.0\n",
    )
    .unwrap();
    let out = dir.join("data");
    let o = dsnorm(&["synth", "--config", s(&cfg), "--out", s(&out), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.toml")
}

#[test]
fn synth_writes_manifest_and_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_synth(dir.path());
    assert!(manifest.exists());
    let gt = fs::read_to_string(dir.path().join("data/ground_truth.json")).unwrap();
    assert!(gt.contains("\"gain\""));
    for id in ["d00", "d01", "d02"] {
        assert!(dir.path().join(format!("data/{id}.eeg")).exists());
        assert!(dir.path().join(format!("data/{id}.labels")).exists());
    }
}

#[test]
fn train_then_eval_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_synth(dir.path());
    let cfg = tiny_config(dir.path(), &manifest);
    let out = dir.path().join("train");
    let o = dsnorm(&["train", "--config", s(&cfg), "--out", s(&out), "--holdout", "d01", "--agg", "avg_prob,select_wasserstein"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("avg_prob") && table.contains("select_wasserstein"));
    assert!(out.join("model.dsnm").exists());
    assert!(out.join("results.json").exists());

    let eval_out = dir.path().join("eval");
    let o = dsnorm(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&out.join("model.dsnm")),
        "--out",
        s(&eval_out),
        "--agg",
        "max_logit",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(eval_out.join("report.txt")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("d01") && l.contains("max_logit")));

    let rerender = dir.path().join("again");
    let o = dsnorm(&["report", "--input", s(&out.join("results.json")), "--out", s(&rerender)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(out.join("report.txt")).unwrap(),
        fs::read(rerender.join("report.txt")).unwrap()
    );
}

#[test]
fn eval_refuses_a_training_subject() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_synth(dir.path());
    let cfg = tiny_config(dir.path(), &manifest);
    let out = dir.path().join("train");
    assert!(dsnorm(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let o = dsnorm(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&out.join("model.dsnm")),
        "--subject",
        "d01",
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(8));
    assert!(String::from_utf8_lossy(&o.stderr).contains("leakage"));
}

#[test]
fn error_categories_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = dsnorm(&["loso", "--manifest", s(&missing), "--desk", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(9));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epochs = 0\n").unwrap();
    let o = dsnorm(&["loso", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(3));

    let o = dsnorm(&["loso", "--norm", "dsin", "--agg", "select_euclidean", "--desk"]);
    assert_eq!(o.status.code(), Some(3));

    let ckpt = dir.path().join("junk.dsnm");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let o = dsnorm(&["eval", "--checkpoint", s(&ckpt), "--desk"]);
    assert_eq!(o.status.code(), Some(3));

    let o = dsnorm(&["loso", "--norm", "groupnorm"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("groupnorm"));
}

#[test]
fn truncated_subject_file_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_synth(dir.path());
    let f = dir.path().join("data/d00.eeg");
    let mut bytes = fs::read(&f).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&f, bytes).unwrap();
    let o = dsnorm(&["loso", "--manifest", s(&manifest), "--desk", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&o.stderr).contains("d00.eeg"));
}
