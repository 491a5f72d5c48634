use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus() -> String {
    format!(
        "data.path={}",
        concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus.txt")
    )
}

fn fineprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fineprune"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn train(out: &Path, sets: &[&str]) -> Output {
    let corpus = corpus();
    let mut args = vec![
        "train",
        "--config",
        "tiny",
        "--set",
        &corpus,
        "--set",
        "train.max_steps=30",
    ];
    for s in sets {
        args.extend(["--set", s]);
    }
    args.extend(["--out", out.to_str().unwrap()]);
    fineprune(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_analyze_compact_compare() {
    let dir = tempfile::tempdir().unwrap();
    let run: PathBuf = dir.path().join("gum");
    let o = train(&run, &["method=gum", "leftover=0.25"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "metrics.csv",
        "masks.txt",
        "model.ckpt",
        "summary.json",
        "report/report.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }

    let base = dir.path().join("base");
    assert!(train(&base, &["leftover=1.0"]).status.success());

    let o = fineprune(&["compare", run.to_str().unwrap(), base.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("capped") && text.contains("raw"), "{text}");

    let ckpt = base.join("model.ckpt");
    let corpus_file = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus.txt");
    let report = dir.path().join("baseline-report");
    let o = fineprune(&[
        "analyze",
        ckpt.to_str().unwrap(),
        corpus_file,
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(report.join("report.json").exists());
    assert!(stdout(&o).contains("uniqueness"));

    let small = dir.path().join("small.ckpt");
    let o = fineprune(&[
        "compact",
        run.join("model.ckpt").to_str().unwrap(),
        "--out",
        small.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(small.exists());

    let data = corpus();
    let o = fineprune(&[
        "evaluate",
        small.to_str().unwrap(),
        "--config",
        "tiny",
        "--set",
        &data,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = stdout(&o);
    let o = fineprune(&[
        "evaluate",
        run.join("model.ckpt").to_str().unwrap(),
        "--config",
        "tiny",
        "--set",
        &data,
    ]);
    let b = stdout(&o);
    let ppl = |s: &str| -> f64 {
        let v: serde_json::Value = serde_json::from_str(s).unwrap();
        v["perplexity"].as_f64().unwrap()
    };
    assert!((ppl(&a) - ppl(&b)).abs() <= 1e-6);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = fineprune(&[
        "train",
        "--config",
        "tiny",
        "--set",
        "no_such_key=1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "method = [unclosed").unwrap();
    let o = fineprune(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = fineprune(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));

    let o = fineprune(&["compare", "/nonexistent/a", "/nonexistent/b"]);
    assert_eq!(o.status.code(), Some(1));
}
