use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "layers=1\nmodel_dim=16\nheads=2\nffn_dim=32\nbatch_tokens=64\neval_every=2\n\
finetune.batch_tokens=64\nfinetune.eval_every=2\n";

fn mass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mass")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mass(args);
    assert!(
        out.status.success(),
        "mass {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small generated corpus, BPE codes and a tiny-model config.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["gen-corpus", "--lines", "200", "--out-dir", s(&root.join("data"))]);
        let d = root.join("data");
        ok(&[
            "learn-bpe",
            "--corpus",
            &format!("{},{}", s(&d.join("mono.a.txt")), s(&d.join("mono.b.txt"))),
            "--merges",
            "60",
            "--out-dir",
            s(&root.join("bpe")),
        ]);
        fs::write(root.join("tiny.cfg"), TINY).unwrap();
        Workspace { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn pretrain(&self, steps: usize, ckpt: &str, report: &str) {
        let d = self.p("data");
        ok(&[
            "pretrain",
            "--config",
            s(&self.p("tiny.cfg")),
            "--corpus",
            &format!("{},{}", s(&d.join("mono.a.txt")), s(&d.join("mono.b.txt"))),
            "--valid",
            &format!("{},{}", s(&d.join("valid.a.txt")), s(&d.join("valid.b.txt"))),
            "--bpe",
            s(&self.p("bpe")),
            "--checkpoint-out",
            s(&self.p(ckpt)),
            "--steps",
            &steps.to_string(),
            "--report",
            s(&self.p(report)),
        ]);
    }
}

fn field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}

#[test]
fn eval_of_identical_files_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("a.txt");
    fs::write(&f, "the cat sat on the mat\na dog ran in the park\n").unwrap();
    let out = ok(&["eval", "--hyp", s(&f), "--reference", s(&f)]);
    assert_eq!(field(&out, "bleu"), Some("1"), "{out}");
}

#[test]
fn pretrain_then_finetune_translate_and_eval() {
    let w = Workspace::new();
    w.pretrain(0, "pre.ckpt", "pre.txt");
    let report = fs::read_to_string(w.p("pre.txt")).unwrap();
    assert!(report.starts_with("manifest="), "{report}");
    assert!(field(&report, "valid_ppl").unwrap().parse::<f64>().unwrap().is_finite());
    assert!(fs::read_dir(&w.root).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .starts_with("manifest-")));

    let d = w.p("data");
    ok(&[
        "finetune",
        "--config",
        s(&w.p("tiny.cfg")),
        "--corpus",
        s(&d.join("pairs.tsv")),
        "--test",
        s(&d.join("test.tsv")),
        "--bpe",
        s(&w.p("bpe")),
        "--checkpoint-in",
        s(&w.p("pre.ckpt")),
        "--checkpoint-out",
        s(&w.p("ft.ckpt")),
        "--steps",
        "2",
        "--report",
        s(&w.p("ft.txt")),
    ]);
    ok(&[
        "translate",
        "--corpus",
        s(&d.join("test.a.txt")),
        "--bpe",
        s(&w.p("bpe")),
        "--checkpoint-in",
        s(&w.p("ft.ckpt")),
        "--out",
        s(&w.p("hyp.txt")),
        "--beam",
        "2",
    ]);
    let hyps = fs::read_to_string(w.p("hyp.txt")).unwrap();
    let refs = fs::read_to_string(d.join("test.b.txt")).unwrap();
    assert_eq!(hyps.lines().count(), refs.lines().count());

    let out = ok(&["eval", "--hyp", s(&w.p("hyp.txt")), "--reference", s(&d.join("test.b.txt"))]);
    let bleu: f64 = field(&out, "bleu").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&bleu));

    let out = ok(&[
        "eval",
        "--corpus",
        s(&d.join("test.tsv")),
        "--bpe",
        s(&w.p("bpe")),
        "--checkpoint-in",
        s(&w.p("ft.ckpt")),
    ]);
    assert!(field(&out, "ppl").unwrap().parse::<f64>().unwrap().is_finite(), "{out}");
}

#[test]
fn runs_are_deterministic() {
    let w = Workspace::new();
    w.pretrain(4, "one.ckpt", "one.txt");
    w.pretrain(4, "two.ckpt", "two.txt");
    assert_eq!(fs::read(w.p("one.ckpt")).unwrap(), fs::read(w.p("two.ckpt")).unwrap());
    assert_eq!(fs::read(w.p("one.txt")).unwrap(), fs::read(w.p("two.txt")).unwrap());
}

#[test]
fn checkpoint_from_another_vocabulary_is_rejected() {
    let w = Workspace::new();
    w.pretrain(0, "pre.ckpt", "pre.txt");
    let d = w.p("data");
    ok(&["learn-bpe", "--corpus", s(&d.join("mono.a.txt")), "--merges", "10", "--out-dir", s(&w.p("other"))]);
    let out = mass(&[
        "translate",
        "--corpus",
        s(&d.join("test.a.txt")),
        "--bpe",
        s(&w.p("other")),
        "--checkpoint-in",
        s(&w.p("pre.ckpt")),
        "--out",
        s(&w.p("hyp.txt")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn bad_invocations_fail_cleanly() {
    assert!(!mass(&["pretrain", "--no-such-flag"]).status.success());
    assert!(!mass(&["frobnicate"]).status.success());
    let out = mass(&["eval", "--hyp", "/nonexistent/h.txt", "--reference", "/nonexistent/r.txt"]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key=1\n").unwrap();
    let f = dir.path().join("a.txt");
    fs::write(&f, "x\n").unwrap();
    let out = mass(&["pretrain", "--config", s(&cfg), "--corpus", s(&f), "--bpe", s(dir.path()), "--checkpoint-out", s(&f)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    assert_eq!(fs::read_to_string(&f).unwrap(), "x\n");
}
