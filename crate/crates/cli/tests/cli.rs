use std::path::Path;
use std::process::Command;

use imgst_core::harness::Manifest;

fn imgst(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_imgst")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "imgst {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn smoke_pipeline_writes_manifests_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let config = d("overrides.kv");
    std::fs::write(&config, "# shorter run\ntrain.epochs = 1\n").unwrap();

    imgst(&["generate-corpus", "--smoke", "--mode", "paraphrase", "--oracle-tier", "B", "--strategy", "sampled", "--k-captions", "3", "--out", path(&d("corpus"))]);
    let m = Manifest::read(&d("corpus")).unwrap();
    assert_eq!(m.config["corpus.oracle.tier"], "B");
    assert_eq!(m.config["corpus.oracle.p_confuse"], "0.05");
    assert_eq!(m.config["corpus.k_captions"], "3");
    assert!(d("corpus/corpus/config.json").exists());

    imgst(&["pretrain-lm", "--smoke", "--seed", "3", "--out", path(&d("pre"))]);
    assert_eq!(Manifest::read(&d("pre")).unwrap().seeds["master"], 3);
    let ckpt = d("pre/pretrained.ckpt");

    imgst(&["train", "--smoke", "--config", path(&config), "--pretrained", path(&ckpt), "--out", path(&d("train"))]);
    let m = Manifest::read(&d("train")).unwrap();
    assert_eq!(m.config["train.epochs"], "1");
    assert!(m.outputs.iter().any(|o| o == "best.ckpt"));

    imgst(&["decode", "--smoke", "--checkpoint", path(&d("train/best.ckpt")), "--strategy", "beam", "--out", path(&d("dec"))]);
    let hyps = std::fs::read_to_string(d("dec/hyps.tsv")).unwrap();
    assert_eq!(hyps.lines().count(), 12);

    let scores = imgst(&["evaluate", "--smoke", "--hyps", path(&d("dec/hyps.tsv")), "--out", path(&d("eval"))]);
    assert_eq!(scores.lines().filter(|l| l.starts_with("n=")).count(), 5);
    let one = imgst(&["evaluate", "--smoke", "--hyps", path(&d("train/test_hyps.tsv")), "--n-refs", "2", "--out", path(&d("eval2"))]);
    assert!(one.starts_with("n=2\t"));
}

#[test]
fn bad_arguments_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_imgst"))
        .args(["generate-corpus", "--smoke", "--oracle-tier", "Z", "--out", path(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown oracle tier"));
}
