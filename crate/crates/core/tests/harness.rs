use std::path::PathBuf;

use fineprune::harness::*;
use fineprune::pruning::{select_local_topv, Method};

fn corpus() -> PathBuf {
    PathBuf::from(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../data/corpus.txt"
    ))
}

fn tiny(sets: &[&str]) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset("tiny").unwrap();
    c.data.path = corpus();
    c.with_overrides(&[
        "train.max_steps=40",
        "train.eval_interval=10",
        "pruning.recompute_interval=4",
    ])
    .unwrap()
    .with_overrides(sets)
    .unwrap()
}

fn run(c: ExperimentConfig) -> (Trainer, Vec<StepReport>) {
    let mut t = Trainer::new(c, None).unwrap();
    let mut reports = Vec::new();
    while !t.is_done() {
        reports.push(t.step().unwrap());
    }
    (t, reports)
}

#[test]
fn full_leftover_matches_plain_finetuning() {
    let (_, plain) = run(tiny(&["method=magnitude", "leftover=1.0"]));
    for m in ["gum", "soft", "random"] {
        let (t, reports) = run(tiny(&[&format!("method={m}"), "leftover=1.0"]));
        assert!(t.state.masks.iter().flatten().all(|&k| k));
        let a: Vec<_> = plain.iter().map(|r| (r.loss, r.row.clone())).collect();
        let b: Vec<_> = reports.iter().map(|r| (r.loss, r.row.clone())).collect();
        assert_eq!(a, b, "{m}");
    }
}

#[test]
fn random_method_masks_half_by_frozen_scores() {
    let (t, _) = run(tiny(&["method=random", "leftover=0.5"]));
    let widths = t.model.layer_widths();
    assert_eq!(t.state.kept() * 2, widths.iter().sum::<usize>());
    let init = fineprune::pruning::MaskState::init(Method::Random, &t.model, t.config.seed);
    assert_eq!(init.scores, t.state.scores);
    assert_eq!(select_local_topv(&init.scores, 0.5).unwrap(), t.state.masks);
    assert_eq!(t.model.masks(), t.state.masks);
}

#[test]
fn loss_components_sum_to_total() {
    let teacher = init_model(&tiny(&["seed=9"])).unwrap();
    let c = tiny(&[
        "method=gum",
        "leftover=0.5",
        "distill.alpha=0.7",
        "distill.temperature=2.0",
    ]);
    let mut t = Trainer::new(c, Some(teacher)).unwrap();
    while !t.is_done() {
        let r = t.step().unwrap();
        assert!((r.loss.total - r.loss.component_sum()).abs() <= 1e-10);
        assert!(r.loss.distill > 0.0 && r.loss.reg_gum > 0.0 && r.loss.reg_mvp > 0.0);
    }
    for r in &t.rows {
        assert!(
            (r.train_loss - (r.task_loss + r.distill_loss + r.reg_mvp + r.reg_gum)).abs() <= 1e-10
        );
    }
}

#[test]
fn rows_keep_their_invariants() {
    for m in Method::ALL {
        let (t, _) = run(tiny(&[&format!("method={m}"), "leftover=0.25"]));
        let rows = &t.rows;
        assert_eq!(rows.len(), 4);
        for w in rows.windows(2) {
            assert!(w[1].leftover <= w[0].leftover, "{m}");
        }
        for r in rows {
            assert!(r.perplexity >= 1.0 && r.train_loss.is_finite());
        }
        assert!(rows.last().unwrap().leftover <= 0.25 + 1e-12 || rows.last().unwrap().under_pruned);
    }
}

#[test]
fn runs_are_bit_identical_and_resume_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(&["method=gum", "leftover=0.5"]);
    let (_, a) = run(c.clone());
    let (full, b) = run(c.clone());
    let key = |r: &[StepReport]| {
        r.iter()
            .map(|x| (x.loss, x.row.clone(), x.score_grads.clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(key(&a), key(&b));

    let mut first = Trainer::new(c.clone(), None).unwrap();
    for _ in 0..17 {
        first.step().unwrap();
    }
    let state = dir.path().join("state.ckpt");
    first.save_state(&state).unwrap();
    let mut resumed = Trainer::resume(c.clone(), None, &state).unwrap();
    let mut tail = Vec::new();
    while !resumed.is_done() {
        tail.push(resumed.step().unwrap());
    }
    assert_eq!(key(&tail), key(&b[17..]));
    assert_eq!(resumed.rows, full.rows);
    assert_eq!(resumed.state, full.state);

    let other = tiny(&["method=gum", "leftover=0.25"]);
    assert!(Trainer::resume(other, None, &state).is_err());
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(&[
        "method=hard",
        "leftover=0.5",
        "train.checkpoint_interval=15",
    ]);
    c.out_dir = Some(dir.path().join("a"));
    let out = train(&c).unwrap();
    for f in [
        METRICS_FILE,
        SUMMARY_FILE,
        MODEL_FILE,
        COMPACT_FILE,
        MASKS_FILE,
        STATE_FILE,
        "config.toml",
    ] {
        assert!(out.dir.join(f).exists(), "{f}");
    }
    for f in [
        "report.json",
        "layers.csv",
        "histogram.csv",
        "similarity.bin",
    ] {
        assert!(out.dir.join(REPORT_DIR).join(f).exists(), "{f}");
    }
    assert_eq!(read_metrics(&out.dir.join(METRICS_FILE)).unwrap(), out.rows);
    assert!(out.summary.compaction_max_abs_diff <= compaction_tolerance());
    assert!(out.summary.params_after < out.summary.params_before);

    c.out_dir = Some(dir.path().join("b"));
    let again = train(&c).unwrap();
    let bytes = |p: &PathBuf| std::fs::read(p.join(METRICS_FILE)).unwrap();
    assert_eq!(bytes(&out.dir), bytes(&again.dir));
    assert_eq!(out.summary.data_hash, again.summary.data_hash);

    let saved = ExperimentConfig::load(out.dir.join("config.toml").to_str().unwrap()).unwrap();
    assert_eq!(saved.hash().unwrap(), c.hash().unwrap());
}

#[test]
fn distillation_trains_its_own_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(&[
        "method=soft",
        "leftover=0.5",
        "distill.alpha=0.5",
        "train.max_steps=20",
    ]);
    c.out_dir = Some(dir.path().to_path_buf());
    let out = train(&c).unwrap();
    let teacher = out.summary.teacher.clone().unwrap();
    assert!(teacher.starts_with(dir.path().join("teacher")));
    let (tm, _) = fineprune::model::TransformerModel::load(&teacher).unwrap();
    assert!(tm.masks().iter().flatten().all(|&k| k));
    assert!(out.rows.iter().all(|r| r.distill_loss > 0.0));
}

#[test]
fn sort_task_reports_exact_match() {
    let c = tiny(&[
        "data.kind=sort",
        "data.sort_train=64",
        "data.sort_valid=16",
        "method=magnitude",
        "leftover=0.5",
    ]);
    let (t, _) = run(c);
    let last = t.rows.last().unwrap();
    let em = last.exact_match.unwrap();
    assert!((0.0..=1.0).contains(&em));
}

#[test]
fn non_finite_loss_aborts_with_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(&["method=hard", "leftover=0.5"]);
    c.out_dir = Some(dir.path().to_path_buf());
    let mut model = init_model(&c).unwrap();
    model.lnf_gamma.data_mut()[0] = f64::NAN as fineprune::Real;
    let data = load_dataset(&c).unwrap();
    let mut t = Trainer::with_parts(c, model, None, data).unwrap();
    assert!(matches!(t.step(), Err(fineprune::Error::NonFinite(_))));
    assert!(dir.path().join("diagnostic.txt").exists());
    assert!(dir.path().join("diagnostic.ckpt").exists());
}

#[test]
fn corpus_loading_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, b"").unwrap();
    assert!(Corpus::load(&empty, 4, 0.1, 0).is_err());
    let short = dir.path().join("short.txt");
    std::fs::write(&short, b"abc").unwrap();
    assert!(Corpus::load(&short, 4, 0.1, 0).is_err());
    let a = Corpus::load(&corpus(), 16, 0.1, 5).unwrap();
    let b = Corpus::load(&corpus(), 16, 0.1, 5).unwrap();
    assert_eq!(a.stream_hash(), b.stream_hash());
}
