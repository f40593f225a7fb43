use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn semcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semcap")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = semcap(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_data(dir: &Path, size: &str) {
    ok(&["gen-data", "--out", p(dir), "--size", size, "--seed", "4"]);
}

#[test]
fn gen_data_writes_splits() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "20");
    for split in ["train", "val", "test"] {
        assert!(dir.path().join(format!("{split}.tsv")).exists());
        assert!(dir.path().join(format!("{split}.refs")).exists());
    }
    let refs = fs::read_to_string(dir.path().join("test.refs")).unwrap();
    assert_eq!(refs.lines().count(), 2 * 5);
    let again = tempfile::tempdir().unwrap();
    gen_data(again.path(), "20");
    assert_eq!(
        fs::read(dir.path().join("train.tsv")).unwrap(),
        fs::read(again.path().join("train.tsv")).unwrap()
    );
}

#[test]
fn train_caption_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_data(d, "20");
    let train = d.join("train.tsv");
    let test = d.join("test.tsv");
    for name in ["a.ck", "b.ck"] {
        ok(&["train", "--data", p(&train), "--out", p(&d.join(name)), "--set", "optimizer.epochs=1"]);
    }
    assert_eq!(fs::read(d.join("a.ck")).unwrap(), fs::read(d.join("b.ck")).unwrap());
    let log = fs::read_to_string(d.join("a.ck.log")).unwrap();
    assert!(log.contains("nll_per_token"));

    let ck = d.join("a.ck");
    ok(&["caption", "--checkpoint", p(&ck), "--data", p(&test), "--out", p(&d.join("c1.txt")), "--trace", p(&d.join("tr"))]);
    ok(&["caption", "--checkpoint", p(&ck), "--data", p(&test), "--out", p(&d.join("c2.txt"))]);
    let c1 = fs::read(d.join("c1.txt")).unwrap();
    assert_eq!(c1, fs::read(d.join("c2.txt")).unwrap());
    assert_eq!(String::from_utf8_lossy(&c1).lines().count(), 2);

    let mut five = vec!["caption"];
    for _ in 0..5 {
        five.extend(["--checkpoint", p(&ck)]);
    }
    let out5 = d.join("c5.txt");
    five.extend(["--data", p(&test), "--out", p(&out5)]);
    ok(&five);
    assert_eq!(c1, fs::read(&out5).unwrap());

    let traces: Vec<_> = fs::read_dir(d.join("tr")).unwrap().collect();
    assert_eq!(traces.len(), 2);
    let trace = fs::read_to_string(traces[0].as_ref().unwrap().path()).unwrap();
    assert!(trace.starts_with("t,word,alpha:"));

    let refs = d.join("test.refs");
    let out = ok(&["evaluate", "--candidates", p(&refs), "--references", p(&refs)]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("BLEU-4=1.000000"), "{stdout}");
    assert!(stdout.contains("ROUGE-L=1.000000"), "{stdout}");

    let out = ok(&["evaluate", "--candidates", p(&d.join("c1.txt")), "--references", p(&refs)]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("CIDEr="));
}

#[test]
fn none_mode_needs_no_attributes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_data(d, "20");
    let ck = d.join("none.ck");
    ok(&["train", "--data", p(&d.join("train.tsv")), "--out", p(&ck), "--set", "model.mode=NONE", "--set", "optimizer.epochs=1"]);
    ok(&["caption", "--checkpoint", p(&ck), "--data", p(&d.join("test.tsv")), "--out", p(&d.join("c.txt"))]);
}

#[test]
fn bad_config_exits_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_data(d, "20");
    let ck = d.join("m.ck");
    for bad in ["optimizer.decay=1.5", "model.hidden_dim=0", "model.nonsense=3"] {
        let out = semcap(&["train", "--data", p(&d.join("train.tsv")), "--out", p(&ck), "--set", bad]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
        assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
        assert!(!ck.exists());
        assert!(!d.join("m.ck.log").exists());
    }
    let cfg = d.join("bad.toml");
    fs::write(&cfg, "[optimizer]\nlearning_rate = -1.0\n").unwrap();
    let out = semcap(&["train", "--config", p(&cfg), "--data", p(&d.join("train.tsv")), "--out", p(&ck)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("optimizer.learning_rate"));
}

#[test]
fn missing_data_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = semcap(&["train", "--data", p(&dir.path().join("nope.tsv")), "--out", p(&dir.path().join("m.ck"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn evaluate_rejects_missing_or_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cands = d.join("c.txt");
    let refs = d.join("r.txt");
    fs::write(&cands, "1\ta cat\n2\ta dog\n").unwrap();
    fs::write(&refs, "1\ta cat\n").unwrap();
    let out = semcap(&["evaluate", "--candidates", p(&cands), "--references", p(&refs)]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains('2'));

    let empty = d.join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = semcap(&["evaluate", "--candidates", p(&empty), "--references", p(&refs)]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn gradcheck_passes_and_flags_a_corrupted_gradient() {
    let out = ok(&["gradcheck"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("max relative error"));
    for mode in ["ATT-IN", "ATT-OUT", "MAX"] {
        ok(&["gradcheck", "--mode", mode]);
    }
    let out = semcap(&["gradcheck", "--corrupt", "U"]);
    assert_eq!(out.status.code(), Some(6));
}
