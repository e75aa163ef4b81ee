use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vlad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlad")).args(args).output().expect("spawn vlad")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "\
# small enough to train in a second
dataset_size = 32
test_size = 8
epochs = 1
batch_size = 16
hidden = 32
enc_hidden = 16
noise_draws = 1
threads = 1
";

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let out = vlad(&["train", "--config", path(&cfg), "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("model.ckpt").is_file());
    assert!(run.join("epochs.csv").is_file());

    let prompts = dir.path().join("prompts.txt");
    fs::write(
        &prompts,
        "SCENE plain ; GLYPH A AT 1 2\nSCENE invert ; GLYPH C AT 6 6\nSCENE plain ; GLYPH E AT 0 11\n",
    )
    .unwrap();
    let imgs = dir.path().join("imgs");
    let out = vlad(&[
        "sample",
        "--ckpt",
        path(&run.join("model.ckpt")),
        "--prompts",
        path(&prompts),
        "--out",
        path(&imgs),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for i in 0..3 {
        let pgm = fs::read(imgs.join(format!("{i:04}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    }

    let test = dir.path().join("test.vgly");
    assert!(vlad(&["gendata", "--seed", "5", "--count", "12", "--out", path(&test)])
        .status
        .success());
    let csv = dir.path().join("eval.csv");
    let out = vlad(&[
        "eval",
        "--ckpt",
        path(&run.join("model.ckpt")),
        "--testset",
        path(&test),
        "--out",
        path(&csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("run_id,fid_proxy,clip_proxy,ocr_accuracy,precision,recall,f_measure\nmodel,"));
}

#[test]
fn bad_prompt_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    assert!(vlad(&["train", "--config", path(&cfg), "--out", path(&run)]).status.success());
    let prompts = dir.path().join("prompts.txt");
    fs::write(&prompts, "SCENE plain ; GLYPH A AT 1 2\nSCENE plain ; GLYPH Z AT 1 2\n").unwrap();
    let out = vlad(&[
        "sample",
        "--ckpt",
        path(&run.join("model.ckpt")),
        "--prompts",
        path(&prompts),
        "--out",
        path(dir.path()),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("prompt line 2"), "{err}");
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = many\n").unwrap();
    let out = vlad(&["train", "--config", path(&cfg), "--out", path(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epochs"), "{err}");

    let out = vlad(&[
        "train",
        "--config",
        path(&dir.path().join("missing.cfg")),
        "--out",
        path(dir.path()),
    ]);
    assert!(!out.status.success());
}

#[test]
fn corrupt_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("junk.ckpt");
    fs::write(&ckpt, b"VLAD-CHECKPOINT\nversion 9\n").unwrap();
    let prompts = dir.path().join("p.txt");
    fs::write(&prompts, "SCENE plain ; GLYPH A AT 1 2\n").unwrap();
    let out = vlad(&[
        "sample",
        "--ckpt",
        path(&ckpt),
        "--prompts",
        path(&prompts),
        "--out",
        path(dir.path()),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
