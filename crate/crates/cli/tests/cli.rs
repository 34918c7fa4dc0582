use std::path::Path;
use std::process::{Command, Output};

fn regionblip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regionblip")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> serde_json::Value {
    let out = regionblip(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "stdout must be one summary line: {stdout}");
    serde_json::from_str(lines[0]).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_exits_two() {
    let out = regionblip(&["eval", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 3\n").unwrap();
    let out = regionblip(&["pretrain-lm", "--config", s(&cfg), "--out", s(&dir.path().join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(err.trim().lines().last().unwrap()).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("learning_rate"));
}

#[test]
fn runtime_errors_exit_one_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = regionblip(&["eval", "--checkpoint", s(&dir.path().join("missing.ckpt")), "--dataset-root", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "runtime");
}

#[test]
fn gen_data_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        ok_json(&["gen-data", "--out", s(d.path()), "--seed", "3", "--train-scenes", "2", "--test-scenes", "1"]);
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 8);
    for n in names {
        let (pa, pb) = (a.path().join(&n), b.path().join(&n));
        if pa.is_file() {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap(), "{n:?}");
        }
    }
}

#[test]
fn staged_pipeline_preserves_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let ck = |n: &str| dir.path().join(n);
    let cfg = ck("train.cfg");
    std::fs::write(&cfg, "batch_size = 4\npeak_lr = 1e-3\nmin_lr = 1e-4\n").unwrap();

    ok_json(&["gen-data", "--out", s(&root), "--seed", "1", "--train-scenes", "3", "--test-scenes", "2"]);
    ok_json(&["pretrain-encoder", "--config", s(&cfg), "--steps", "2", "--out", s(&ck("enc.ckpt"))]);
    ok_json(&["pretrain-lm", "--config", s(&cfg), "--steps", "2", "--corpus-scenes", "4", "--checkpoint", s(&ck("enc.ckpt")), "--out", s(&ck("lm.ckpt"))]);
    assert!(ck("lm.log.jsonl").exists());
    ok_json(&["pretrain-base", "--config", s(&cfg), "--steps", "2", "--checkpoint", s(&ck("lm.ckpt")), "--dataset-root", s(&root), "--out", s(&ck("base.ckpt"))]);

    let eval = |c: &str| ok_json(&["eval", "--checkpoint", s(&ck(c)), "--dataset-root", s(&root), "--modality", "img_text"]);
    let before = eval("base.ckpt");
    assert_eq!(before["modality"], "img_text");
    assert!(before["cider"].is_number() && before["recall_at_1"].is_number());

    let ext = ok_json(&["extend", "--checkpoint", s(&ck("base.ckpt")), "--modality", "img_region", "--seed", "2", "--out", s(&ck("ext.ckpt"))]);
    assert_eq!(ext["modality"], "img_region");
    ok_json(&["pretrain", "--config", s(&cfg), "--steps", "0", "--checkpoint", s(&ck("ext.ckpt")), "--dataset-root", s(&root), "--out", s(&ck("zero.ckpt"))]);
    assert_eq!(std::fs::read(ck("ext.ckpt")).unwrap(), std::fs::read(ck("zero.ckpt")).unwrap());
    assert_eq!(before, eval("zero.ckpt"));

    ok_json(&["pretrain", "--config", s(&cfg), "--steps", "3", "--checkpoint", s(&ck("ext.ckpt")), "--dataset-root", s(&root), "--out", s(&ck("trained.ckpt"))]);
    assert_eq!(before, eval("trained.ckpt"));
    let log = std::fs::read_to_string(ck("trained.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let report = ck("region.json");
    let region = ok_json(&["eval", "--checkpoint", s(&ck("trained.ckpt")), "--dataset-root", s(&root), "--modality", "img_region", "--no-pafe", "--out", s(&report)]);
    assert!(region["region_l1"].is_number());
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(written, region);

    let out = regionblip(&["pretrain", "--steps", "1", "--modality", "pc_text", "--checkpoint", s(&ck("ext.ckpt")), "--dataset-root", s(&root), "--out", s(&ck("bad.ckpt"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn mine_regions_writes_pairs() {
    let dir = tempfile::tempdir().unwrap();
    ok_json(&["gen-data", "--out", s(dir.path()), "--seed", "5", "--train-scenes", "4", "--test-scenes", "1"]);
    let out = dir.path().join("mined.jsonl");
    let v = ok_json(&["mine-regions", "--dataset-root", s(dir.path()), "--out", s(&out), "--tau", "0.9"]);
    let kept = std::fs::read_to_string(&out).unwrap().lines().count();
    assert_eq!(v["stats"]["retained"].as_u64().unwrap() as usize, kept);
    assert!(kept > 0);
}
