use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_wurstkit"));
    c.env("RUST_LOG", "warn").env("MATMUL_NUM_THREADS", "1");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compares against `tests/golden/<name>.txt`; `UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let path = golden_dir().join(format!("{name}.txt"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_dir()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, expected, "help text for {name} changed; rerun with UPDATE_GOLDEN=1 if intended");
}

#[test]
fn help_texts_match_golden_files() {
    let cases: &[(&str, &[&str])] = &[
        ("root", &[]),
        ("train", &["train"]),
        ("sample", &["sample"]),
        ("merge", &["merge"]),
        ("probe-decode", &["probe-decode"]),
        ("eval", &["eval"]),
        ("eval-fid", &["eval", "fid"]),
        ("eval-fid-audit", &["eval", "fid-audit"]),
        ("eval-is", &["eval", "is"]),
        ("bench-latency", &["bench", "latency"]),
        ("dataset-synth", &["dataset", "synth"]),
        ("inspect", &["inspect"]),
    ];
    let tmp = tempfile::tempdir().unwrap();
    for (name, args) in cases {
        let mut full: Vec<&str> = args.to_vec();
        full.push("--help");
        check_golden(name, &ok(&full, tmp.path()));
    }
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], tmp.path()).status.code(), Some(2));
    assert_eq!(run(&["merge", "--lambda", "x"], tmp.path()).status.code(), Some(2));
    assert_eq!(run(&["probe-decode"], tmp.path()).status.code(), Some(2));

    let out = run(&["train", "stage-b", "--steps", "1"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error[precondition]") && err.contains("stage-a"), "{err}");

    let out = run(&["train", "stage-z"], tmp.path());
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["inspect", "--checkpoint", "missing.ckpt"], tmp.path());
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(tmp.path().join("bad.json"), r#"{"sampler": {"steps": 3}}"#).unwrap();
    let out = run(&["--config", "bad.json", "dataset", "synth", "--count", "2"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]"));
}

#[test]
fn synthetic_corpus_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["--seed", "5", "dataset", "synth", "--count", "6", "--out", "a.jsonl", "--png"], tmp.path());
    ok(&["--seed", "5", "dataset", "synth", "--count", "6", "--out", "b.jsonl"], tmp.path());
    let a = std::fs::read(tmp.path().join("a.jsonl")).unwrap();
    let b = std::fs::read(tmp.path().join("b.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 6);
    assert!(tmp.path().join("a/00005.png").exists());
}

#[test]
fn train_sample_merge_inspect_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for stage in ["stage-a", "stage-b", "stage-c", "probe"] {
        let out = ok(&["train", stage, "--synth", "8", "--steps", "2", "--batch-size", "2", "--lr", "1e-3"], d);
        assert!(out.contains(&format!("{stage}.ckpt")), "{out}");
        assert!(d.join(format!("runs/{stage}_loss.csv")).exists());
    }

    let args = ["--seed", "3", "sample", "--prompt", "red circle", "--count", "2", "--steps-c", "4", "--steps-b", "3"];
    ok(&[&args[..], &["--out", "s1"]].concat(), d);
    ok(&[&args[..], &["--out", "s2"]].concat(), d);
    for f in ["sample_000.png", "sample_001.png", "semantic.ckpt"] {
        assert_eq!(std::fs::read(d.join("s1").join(f)).unwrap(), std::fs::read(d.join("s2").join(f)).unwrap(), "{f}");
    }
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("s1/generation.json")).unwrap()).unwrap();
    // two guided passes per step for both stages
    assert_eq!(record["stage_c_passes"], 8);
    assert_eq!(record["stage_b_passes"], 6);

    let out = ok(&["probe-decode", "--latent", "s1/semantic.ckpt", "--out", "p"], d);
    assert_eq!(out.lines().count(), 2);

    let out = ok(&["merge", "--a", "runs/stage-c.ckpt", "--b", "runs/stage-c.ckpt", "--lambda", "0.5", "--out", "m.ckpt"], d);
    assert!(out.contains("m.ckpt"));
    let out = run(&["merge", "--a", "runs/stage-c.ckpt", "--b", "runs/probe.ckpt", "--out", "x.ckpt"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[checkpoint]"));

    let info: serde_json::Value = serde_json::from_str(&ok(&["inspect", "--checkpoint", "m.ckpt"], d)).unwrap();
    assert_eq!(info["stage"], "stage-c");
    let total = info["compression"]["total"].as_str().unwrap();
    assert!(total.starts_with("64 -> 4: 16:1"), "{total}");
    assert!(info["parameters"].as_u64().unwrap() > 0);
}
