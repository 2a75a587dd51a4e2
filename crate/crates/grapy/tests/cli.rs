//! The `grapy` binary end to end on tiny datasets.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn grapy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grapy"))
        .args(args)
        .env_remove("GRAPY_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = grapy(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path) {
    ok(&["gen-data", "--out", s(dir), "--sizes", "A=4/2,B=4/2", "--image-size", "24", "--seed", "3"]);
}

const TINY: &[&str] = &[
    "--pretrain-epochs", "1", "--main-epochs", "1", "--batch-size", "2", "--lr", "0.05",
    "--set", "hidden=6", "--set", "channels=6", "--seed", "1",
];

fn train(data: &Path, out: &Path) -> PathBuf {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(TINY);
    let stdout = ok(&args);
    assert!(stdout.contains("train.gpm.level3.miou="), "{stdout}");
    out.join("checkpoint.grpy")
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(grapy(&["gen-data"]).status.code(), Some(2));
    assert_eq!(grapy(&["train", "--data", "x"]).status.code(), Some(2));
    assert_eq!(grapy(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(grapy(&["train", "--set", "lr=-1", "--out", "x", "--data", "y"]).status.code(), Some(2));
    assert_eq!(grapy(&["train-ml", "--datasets", "A", "--data", "x", "--out", "y"]).status.code(), Some(2));
    assert_eq!(grapy(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = grapy(&["train", "--data", s(&tmp.path().join("nope")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a);
    gen(&b);
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() >= 2 * (1 + 6 * 2));
    assert_eq!(fa, fb);
}

#[test]
fn train_eval_predict_round() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let ck = train(&data.join("A"), &tmp.path().join("run1"));
    let ck2 = train(&data.join("A"), &tmp.path().join("run2"));
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&ck2).unwrap());

    let log = std::fs::read_to_string(tmp.path().join("run1/train.log")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let kv = ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data.join("A")), "--format", "kv"]);
    for branch in ["main", "gpm"] {
        for level in 1..=3 {
            let key = format!("{branch}.level{level}.miou=");
            let line = kv.lines().find(|l| l.starts_with(&key)).unwrap();
            let v: f64 = line[key.len()..].parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let table = ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data.join("A")), "--split", "train"]);
    assert!(table.contains("[gpm branch, level 3]"));

    let pred = tmp.path().join("pred");
    ok(&["predict", "--checkpoint", s(&ck), "--data", s(&data.join("A")), "--out", s(&pred), "--limit", "1"]);
    let img = std::fs::read(pred.join("00000.ppm")).unwrap();
    assert!(img.starts_with(b"P6\n24 24\n255\n"));

    // a checkpoint for taxonomy A cannot score dataset B
    let out = grapy(&["eval", "--checkpoint", s(&ck), "--data", s(&data.join("B"))]);
    assert_eq!(out.status.code(), Some(4));
    // nor can a corrupted one be read
    let bad = tmp.path().join("bad.grpy");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = grapy(&["eval", "--checkpoint", s(&bad), "--data", s(&data.join("A"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn mutual_learning_with_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let out = tmp.path().join("ml");
    let mut args = vec![
        "train-ml", "--data", s(&data), "--datasets", "A,B", "--out", s(&out),
        "--finetune", "A", "--finetune-epochs", "1", "--audit-sharing", "--set", "steps_per_epoch=2",
    ];
    args.extend_from_slice(TINY);
    let stdout = ok(&args);
    assert!(stdout.lines().filter(|l| l.starts_with("audit\tPASS")).count() >= 2, "{stdout}");
    assert!(!stdout.contains("FAIL"));
    for name in ["joint.grpy", "finetuned-A.grpy"] {
        let ck = out.join(name);
        let kv = ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data.join("A")), "--format", "kv"]);
        assert!(kv.contains("gpm.level3.miou="));
    }
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck"]);
    assert!(stdout.lines().count() >= 20);
    assert!(!stdout.contains("FAIL"));
}
