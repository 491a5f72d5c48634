//! The fine-pruning training loop and the end-to-end `train` pipeline.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, write_report_bundle, AnalysisOptions};
use crate::autodiff::{Tape, Var};
use crate::distill::distill_loss;
use crate::error::{Error, Result};
use crate::model::{
    read_checkpoint, write_checkpoint, Checkpoint, ForwardOptions, TransformerModel,
};
use crate::pruning::{
    compact, gum_regularization, movement_score_grads, score_regularization, select_global_topv,
    MaskState, Method, Selection, SelectionOutcome,
};
use crate::schedule::PruneSchedule;
use crate::similarity::{SimilarityMode, SimilarityTracker};
use crate::tensor::{Real, Tensor};

use super::config::{DataKind, ExperimentConfig};
use super::data::{sort_splits, Corpus, Dataset};
use super::eval::{exact_match, perplexity, EvalMetrics};
use super::optim::{AdamW, LinearSchedule};

/// Loss components of one step. `total` is the left-to-right sum of the
/// other four.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: Real,
    /// Task cross-entropy, weighted by `1 − α` under distillation.
    pub task: Real,
    /// `α·T²·KL`, zero without distillation.
    pub distill: Real,
    pub reg_mvp: Real,
    pub reg_gum: Real,
}

impl LossTerms {
    pub fn component_sum(&self) -> Real {
        self.task + self.distill + self.reg_mvp + self.reg_gum
    }
}

/// One row of the metrics CSV, written at each evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub task_loss: f64,
    pub distill_loss: f64,
    pub reg_mvp: f64,
    pub reg_gum: f64,
    pub valid_loss: f64,
    pub perplexity: f64,
    pub exact_match: Option<f64>,
    pub leftover: f64,
    pub target_leftover: f64,
    pub kept: usize,
    pub fallback: bool,
    pub under_pruned: bool,
}

/// What happened during a single optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    /// 0-based index of the step just taken.
    pub step: usize,
    pub lr: Real,
    pub loss: LossTerms,
    pub target_leftover: Real,
    pub outcome: Option<SelectionOutcome>,
    /// Per-layer movement statistics fed to the scores (movement methods only).
    pub movement_grads: Option<Vec<Vec<Real>>>,
    /// Movement statistics plus regularizer gradients: the full score gradient.
    pub score_grads: Option<Vec<Vec<Real>>>,
    /// Present when this step ended at an evaluation point.
    pub row: Option<MetricsRow>,
}

/// Builds the dataset described by `config`.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let d = &config.data;
    match d.kind {
        DataKind::Corpus => {
            let corpus = Corpus::load(
                &d.path,
                config.model.max_seq_len,
                d.valid_fraction as f64,
                config.seed,
            )?;
            Ok(Dataset::from_corpus(
                corpus,
                config.train.batch_size,
                config.seed,
            ))
        }
        DataKind::Sort => {
            let (train, valid) =
                sort_splits(config.seed, d.sort_digits, d.sort_train, d.sort_valid)?;
            let len = train.first().map_or(0, |e| e.prompt.len() + e.answer.len());
            if len > config.model.max_seq_len {
                return Err(Error::Config(format!(
                    "sort examples need max_seq_len ≥ {len}, got {}",
                    config.model.max_seq_len
                )));
            }
            Ok(Dataset::from_sort(
                &train,
                valid,
                config.train.batch_size,
                config.seed,
            ))
        }
    }
}

/// Number of optimizer steps implied by `config` for `dataset`.
pub fn total_steps(config: &ExperimentConfig, dataset: &Dataset) -> usize {
    let steps = config.train.epochs * dataset.batches_per_epoch();
    if config.train.max_steps > 0 {
        steps.min(config.train.max_steps)
    } else {
        steps
    }
}

/// Fresh model for `config`; the experiment seed drives initialization.
pub fn init_model(config: &ExperimentConfig) -> Result<TransformerModel> {
    if let Some(path) = &config.init_checkpoint {
        let (model, _) = TransformerModel::load(path)?;
        if model.config.vocab_size != config.model.vocab_size
            || model.config.d_model != config.model.d_model
        {
            return Err(Error::Config(format!(
                "init checkpoint {} does not match the configured model",
                path.display()
            )));
        }
        return Ok(model);
    }
    let mut mc = config.model.clone();
    mc.seed = config.seed;
    TransformerModel::new(mc)
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: TransformerModel,
    pub teacher: Option<TransformerModel>,
    pub dataset: Dataset,
    pub state: MaskState,
    pub tracker: Option<SimilarityTracker>,
    pub schedule: PruneSchedule,
    pub lr_schedule: LinearSchedule,
    pub optimizer: AdamW,
    pub score_optimizer: AdamW,
    pub step: usize,
    pub total_steps: usize,
    pub rows: Vec<MetricsRow>,
    last_outcome: Option<SelectionOutcome>,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, teacher: Option<TransformerModel>) -> Result<Self> {
        config.validate()?;
        let dataset = load_dataset(&config)?;
        let model = init_model(&config)?;
        Self::with_parts(config, model, teacher, dataset)
    }

    /// Like [`new`](Self::new) but with a prebuilt model and dataset.
    pub fn with_parts(
        config: ExperimentConfig,
        model: TransformerModel,
        teacher: Option<TransformerModel>,
        dataset: Dataset,
    ) -> Result<Self> {
        config.validate()?;
        if config.distill.is_some() != teacher.is_some() {
            return Err(Error::Config(
                "distillation needs exactly one teacher model".into(),
            ));
        }
        if let Some(t) = &teacher {
            if t.config.vocab_size != model.config.vocab_size {
                return Err(Error::Config(
                    "teacher and student vocabularies differ".into(),
                ));
            }
        }
        let total = total_steps(&config, &dataset);
        if total == 0 {
            return Err(Error::Config("run has zero training steps".into()));
        }
        let p = &config.pruning;
        let schedule = PruneSchedule::from_fractions(
            total,
            config.leftover,
            p.warmup_fraction,
            p.ramp_end_fraction,
            p.recompute_interval,
        )?;
        let mut state = MaskState::init(config.method, &model, config.seed);
        state.selection = config.selection();
        state.mask_lr = config.mask_lr();
        state.threshold = p.threshold;
        let tracker = if config.method == Method::Gum {
            Some(SimilarityTracker::new(
                &model.layer_widths(),
                SimilarityMode::Running,
                p.similarity_retention,
            )?)
        } else {
            None
        };
        let t = &config.train;
        let sizes: Vec<usize> = model
            .named_params()
            .iter()
            .map(|(_, x)| x.numel())
            .collect();
        let optimizer = AdamW::new(
            &sizes,
            t.adam_beta1,
            t.adam_beta2,
            t.adam_eps,
            t.weight_decay,
        );
        let score_optimizer =
            AdamW::new(&state.widths(), t.adam_beta1, t.adam_beta2, t.adam_eps, 0.0);
        Ok(Trainer {
            lr_schedule: LinearSchedule::from_fraction(t.lr, t.warmup_fraction, total),
            config,
            model,
            teacher,
            dataset,
            state,
            tracker,
            schedule,
            optimizer,
            score_optimizer,
            step: 0,
            total_steps: total,
            rows: Vec::new(),
            last_outcome: None,
        })
    }

    /// Pruning is skipped entirely at a leftover target of 1.
    pub fn pruning_active(&self) -> bool {
        self.config.leftover < 1.0
    }

    fn learns_scores(&self) -> bool {
        self.pruning_active() && self.config.method.is_movement()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    fn is_recompute(&self, t: usize) -> bool {
        self.schedule.is_recompute_step(t)
            || (t + 1 == self.total_steps && self.schedule.ramp_end() >= self.total_steps)
    }

    /// Recomputes masks at target `v`. Threshold selection never regrows
    /// neurons: if it would keep more than are alive now, the current count
    /// is re-selected by global top scores instead.
    fn recompute(&mut self, v: Real) -> Result<SelectionOutcome> {
        self.state.refresh_magnitude(&self.model);
        let before = self.state.kept();
        let mut outcome = self.state.select(v)?;
        if self.state.selection == Selection::Threshold && outcome.kept > before {
            let frac = before as Real / self.state.total() as Real;
            self.state.masks = select_global_topv(&self.state.scores, frac)?;
            outcome.kept = self.state.kept();
        }
        self.state.apply(&mut self.model)?;
        Ok(outcome)
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<StepReport> {
        let t = self.step;
        if self.is_done() {
            return Err(Error::invalid(
                "train",
                format!("all {} steps already taken", self.total_steps),
            ));
        }
        let lr = self.lr_schedule.at(t);
        let target = if self.pruning_active() {
            self.schedule.target_leftover(t)?
        } else {
            1.0
        };
        let mut outcome = None;
        if self.pruning_active() && self.is_recompute(t) {
            let o = self.recompute(target)?;
            self.last_outcome = Some(o);
            outcome = Some(o);
        }

        let batch = self.dataset.train_batch(t);
        let teacher_logits = match &self.teacher {
            Some(teacher) => Some(teacher.logits(&batch.tokens)?),
            None => None,
        };
        let smoothing = self.config.model.label_smoothing;
        let mut tape = Tape::new();
        let fwd = self.model.forward(
            &mut tape,
            &batch.tokens,
            ForwardOptions {
                grad: true,
                ..ForwardOptions::default()
            },
        )?;

        let mut terms = LossTerms::default();
        let mut total = match (&self.config.distill, &teacher_logits) {
            (Some(d), Some(tl)) => {
                let parts = distill_loss(
                    &mut tape,
                    fwd.logits,
                    tl,
                    &batch.targets,
                    d.alpha,
                    d.temperature,
                    smoothing,
                )?;
                terms.distill =
                    tape.value(parts.kl).item() * (d.alpha * d.temperature * d.temperature);
                terms.task = tape.value(parts.ce).item() * (1.0 - d.alpha);
                parts.total
            }
            _ => {
                let ce = tape.cross_entropy(fwd.logits, &batch.targets, smoothing)?;
                terms.task = tape.value(ce).item();
                ce
            }
        };

        let mut score_vars: Vec<Var> = Vec::new();
        if self.learns_scores() {
            score_vars = self.state.score_leaves(&mut tape);
            let p = &self.config.pruning;
            let r = score_regularization(&mut tape, &score_vars, p.lambda_mvp)?;
            terms.reg_mvp = tape.value(r).item();
            total = tape.add(total, r)?;
            if let Some(tracker) = self.tracker.as_mut() {
                let acts: Vec<&[Real]> = fwd.h.iter().map(|&h| tape.data(h)).collect();
                tracker.update(&acts)?;
                let u = tracker.mean_abs_similarity(&self.state.masks, p.leftover_scope)?;
                let rs = gum_regularization(&mut tape, &score_vars, &u, p.lambda_gum)?;
                terms.reg_gum = tape.value(rs).item();
                total = tape.add(total, rs)?;
            }
        }
        terms.total = tape.value(total).item();
        if !terms.total.is_finite() {
            self.write_diagnostic(t, &terms)?;
            return Err(Error::NonFinite(format!("training loss at step {t}")));
        }
        tape.backward(total)?;

        let grads: Vec<Vec<Real>> = fwd
            .params
            .iter()
            .zip(self.model.named_params())
            .map(|(&v, (_, p))| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; p.numel()], <[Real]>::to_vec)
            })
            .collect();

        let (mut movement_grads, mut score_grads) = (None, None);
        if self.learns_scores() {
            let slots: Vec<Option<&[Real]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
            let movement =
                movement_score_grads(&self.model, &slots, self.config.pruning.aggregation)?;
            let full: Vec<Vec<Real>> = movement
                .iter()
                .zip(&score_vars)
                .map(|(mv, &s)| match tape.grad(s) {
                    Some(rg) => mv.iter().zip(rg).map(|(a, b)| a + b).collect(),
                    None => mv.clone(),
                })
                .collect();
            movement_grads = Some(movement);
            score_grads = Some(full);
        }

        self.optimizer.begin_step();
        for (i, (_, p)) in self.model.named_params_mut().into_iter().enumerate() {
            let decay = p.shape().len() == 2;
            self.optimizer.update(i, p.data_mut(), &grads[i], lr, decay);
        }
        if let Some(g) = &score_grads {
            if self.config.pruning.raw_score_sgd {
                self.state.sgd_step(g)?;
            } else {
                let mask_lr = self.state.mask_lr * self.lr_schedule.factor(t);
                self.score_optimizer.begin_step();
                for (l, (s, g)) in self.state.scores.iter_mut().zip(g).enumerate() {
                    self.score_optimizer.update(l, s, g, mask_lr, false);
                }
            }
        }

        self.step += 1;
        let ev = self.config.train.eval_interval;
        let row = if self.is_done() || (ev > 0 && self.step % ev == 0) {
            let m = self.evaluate()?;
            let last = self.last_outcome;
            let row = MetricsRow {
                step: self.step,
                lr: lr as f64,
                train_loss: terms.total as f64,
                task_loss: terms.task as f64,
                distill_loss: terms.distill as f64,
                reg_mvp: terms.reg_mvp as f64,
                reg_gum: terms.reg_gum as f64,
                valid_loss: m.loss as f64,
                perplexity: m.perplexity as f64,
                exact_match: m.exact_match.map(|x| x as f64),
                leftover: self.state.leftover() as f64,
                target_leftover: target as f64,
                kept: self.state.kept(),
                fallback: last.is_some_and(|o| o.fallback),
                under_pruned: last.is_some_and(|o| o.under_pruned),
            };
            self.rows.push(row.clone());
            Some(row)
        } else {
            None
        };

        Ok(StepReport {
            step: t,
            lr,
            loss: terms,
            target_leftover: target,
            outcome,
            movement_grads,
            score_grads,
            row,
        })
    }

    /// Validation loss, perplexity and, for the sorting task, exact match.
    pub fn evaluate(&self) -> Result<EvalMetrics> {
        evaluate_model(
            &self.model,
            &self.dataset,
            self.config.train.eval_max_blocks,
        )
    }

    /// Steps until done, returning the evaluation rows produced.
    pub fn run(&mut self) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while !self.is_done() {
            if let Some(r) = self.step()?.row {
                rows.push(r);
            }
        }
        Ok(rows)
    }

    fn write_diagnostic(&self, step: usize, terms: &LossTerms) -> Result<()> {
        let Some(dir) = &self.config.out_dir else {
            return Ok(());
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = toml::Table::new();
        meta.insert("step".into(), toml::Value::Integer(step as i64));
        meta.insert("terms".into(), toml::Value::String(format!("{terms:?}")));
        self.model.save(&dir.join("diagnostic.ckpt"), meta)?;
        let p = dir.join("diagnostic.txt");
        fs::write(&p, format!("non-finite loss at step {step}\n{terms:#?}\n"))
            .map_err(|e| Error::io(p, e))
    }

    /// Writes everything needed to continue this run bit-identically.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut meta = toml::Table::new();
        let int = |x: u64| toml::Value::Integer(x as i64);
        meta.insert("step".into(), int(self.step as u64));
        meta.insert("optimizer_step".into(), int(self.optimizer.step));
        meta.insert(
            "score_optimizer_step".into(),
            int(self.score_optimizer.step),
        );
        meta.insert(
            "config_hash".into(),
            toml::Value::String(self.config.hash()?),
        );
        meta.insert(
            "rows".into(),
            toml::Value::String(serde_json::to_string(&self.rows)?),
        );
        meta.insert(
            "last_outcome".into(),
            toml::Value::String(serde_json::to_string(
                &self.last_outcome.map(OutcomeRecord::from),
            )?),
        );
        if let Some(tr) = &self.tracker {
            meta.insert("tracker_updates".into(), int(tr.updates));
        }
        let mut ckpt = self.model.to_checkpoint(meta)?;
        let vec = |v: &[Real]| Tensor::from_vec(v.to_vec());
        for (i, (m, v)) in self.optimizer.m.iter().zip(&self.optimizer.v).enumerate() {
            ckpt.tensors
                .push((format!("trainer.optimizer.m.{i}"), vec(m)));
            ckpt.tensors
                .push((format!("trainer.optimizer.v.{i}"), vec(v)));
        }
        for (l, s) in self.state.scores.iter().enumerate() {
            ckpt.tensors.push((format!("trainer.scores.{l}"), vec(s)));
            let mask: Vec<Real> = self.state.masks[l]
                .iter()
                .map(|&k| if k { 1.0 } else { 0.0 })
                .collect();
            ckpt.tensors
                .push((format!("trainer.state_mask.{l}"), vec(&mask)));
            ckpt.tensors.push((
                format!("trainer.score_optimizer.m.{l}"),
                vec(&self.score_optimizer.m[l]),
            ));
            ckpt.tensors.push((
                format!("trainer.score_optimizer.v.{l}"),
                vec(&self.score_optimizer.v[l]),
            ));
        }
        if let Some(tr) = &self.tracker {
            for (l, acc) in tr.layers.iter().enumerate() {
                ckpt.tensors
                    .push((format!("trainer.similarity.c.{l}"), vec(&acc.c)));
                ckpt.tensors
                    .push((format!("trainer.similarity.q.{l}"), vec(&acc.q)));
            }
        }
        write_checkpoint(path, &ckpt)
    }

    /// Rebuilds a trainer from [`save_state`](Self::save_state) output. The
    /// config must hash identically to the one that wrote the state.
    pub fn resume(
        config: ExperimentConfig,
        teacher: Option<TransformerModel>,
        path: &Path,
    ) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        let meta = &ckpt.meta;
        let hash = meta
            .get("config_hash")
            .and_then(toml::Value::as_str)
            .unwrap_or_default();
        if hash != config.hash()? {
            return Err(Error::Checkpoint(
                "state file was written by a different config".into(),
            ));
        }
        let int = |k: &str| -> Result<u64> {
            meta.get(k)
                .and_then(toml::Value::as_integer)
                .map(|x| x as u64)
                .ok_or_else(|| Error::Checkpoint(format!("state missing {k}")))
        };
        let text = |k: &str| -> Result<&str> {
            meta.get(k)
                .and_then(toml::Value::as_str)
                .ok_or_else(|| Error::Checkpoint(format!("state missing {k}")))
        };
        let dataset = load_dataset(&config)?;
        let model_only = Checkpoint {
            tensors: ckpt
                .tensors
                .iter()
                .filter(|(n, _)| !n.starts_with(TRAINER_PREFIX))
                .cloned()
                .collect(),
            ..ckpt.clone()
        };
        let model = TransformerModel::from_checkpoint(&model_only)?;
        let mut tr = Self::with_parts(config, model, teacher, dataset)?;
        tr.step = int("step")? as usize;
        tr.optimizer.step = int("optimizer_step")?;
        tr.score_optimizer.step = int("score_optimizer_step")?;
        tr.rows = serde_json::from_str(text("rows")?)?;
        let last: Option<OutcomeRecord> = serde_json::from_str(text("last_outcome")?)?;
        tr.last_outcome = last.map(SelectionOutcome::from);
        let fetch = |name: String, len: usize| -> Result<Vec<Real>> {
            let t = ckpt
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("state missing tensor {name}")))?;
            if t.numel() != len {
                return Err(Error::Checkpoint(format!(
                    "state tensor {name} has wrong size"
                )));
            }
            Ok(t.data().to_vec())
        };
        for i in 0..tr.optimizer.m.len() {
            let n = tr.optimizer.m[i].len();
            tr.optimizer.m[i] = fetch(format!("trainer.optimizer.m.{i}"), n)?;
            tr.optimizer.v[i] = fetch(format!("trainer.optimizer.v.{i}"), n)?;
        }
        for l in 0..tr.state.scores.len() {
            let n = tr.state.scores[l].len();
            tr.state.scores[l] = fetch(format!("trainer.scores.{l}"), n)?;
            tr.state.masks[l] = fetch(format!("trainer.state_mask.{l}"), n)?
                .iter()
                .map(|&x| x != 0.0)
                .collect();
            tr.score_optimizer.m[l] = fetch(format!("trainer.score_optimizer.m.{l}"), n)?;
            tr.score_optimizer.v[l] = fetch(format!("trainer.score_optimizer.v.{l}"), n)?;
        }
        if let Some(tracker) = tr.tracker.as_mut() {
            tracker.updates = int("tracker_updates")?;
            for (l, acc) in tracker.layers.iter_mut().enumerate() {
                acc.c = fetch(format!("trainer.similarity.c.{l}"), acc.c.len())?;
                acc.q = fetch(format!("trainer.similarity.q.{l}"), acc.q.len())?;
            }
        }
        Ok(tr)
    }
}

/// Namespace of optimizer, score and similarity tensors in a state file.
const TRAINER_PREFIX: &str = "trainer.";

#[derive(Serialize, Deserialize)]
struct OutcomeRecord {
    kept: usize,
    target: usize,
    fallback: bool,
    under_pruned: bool,
}

impl From<SelectionOutcome> for OutcomeRecord {
    fn from(o: SelectionOutcome) -> Self {
        OutcomeRecord {
            kept: o.kept,
            target: o.target,
            fallback: o.fallback,
            under_pruned: o.under_pruned,
        }
    }
}

impl From<OutcomeRecord> for SelectionOutcome {
    fn from(o: OutcomeRecord) -> Self {
        SelectionOutcome {
            kept: o.kept,
            target: o.target,
            fallback: o.fallback,
            under_pruned: o.under_pruned,
        }
    }
}

/// Validation metrics of `model` on `dataset`, using at most `max_blocks`
/// examples (0 = all).
pub fn evaluate_model(
    model: &TransformerModel,
    dataset: &Dataset,
    max_blocks: usize,
) -> Result<EvalMetrics> {
    let batches = dataset.valid_batches(max_blocks);
    super::eval::check_vocab(model, &batches)?;
    let (loss, ppl, tokens) = perplexity(model, &batches)?;
    let exact = if dataset.valid_sort.is_empty() {
        None
    } else {
        let n = if max_blocks == 0 {
            dataset.valid_sort.len()
        } else {
            max_blocks.min(dataset.valid_sort.len())
        };
        Some(exact_match(model, &dataset.valid_sort[..n])?)
    };
    Ok(EvalMetrics {
        loss,
        perplexity: ppl,
        tokens,
        exact_match: exact,
    })
}

/// Final structured summary of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub method: Method,
    pub selection: Selection,
    pub target_leftover: f64,
    pub final_leftover: f64,
    pub kept_per_layer: Vec<usize>,
    pub steps: usize,
    pub data_hash: String,
    pub final_metrics: Option<MetricsRow>,
    pub params_before: usize,
    pub params_after: usize,
    pub compact_widths: Vec<usize>,
    /// Largest logit difference between masked and compacted models.
    pub compaction_max_abs_diff: f64,
    pub under_pruned: bool,
    pub teacher: Option<PathBuf>,
    pub elapsed_secs: f64,
}

/// Files produced by [`train`].
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const COMPACT_FILE: &str = "compact.ckpt";
pub const MASKS_FILE: &str = "masks.txt";
pub const STATE_FILE: &str = "state.ckpt";
pub const REPORT_DIR: &str = "report";

/// Tolerance of the post-training compaction check.
pub fn compaction_tolerance() -> f64 {
    if cfg!(feature = "f32") {
        1e-3
    } else {
        1e-6
    }
}

fn default_out_dir(config: &ExperimentConfig) -> PathBuf {
    let distill = if config.distill.is_some() { "-kd" } else { "" };
    PathBuf::from("runs").join(format!(
        "{}-{}{}-s{}",
        config.method, config.leftover, distill, config.seed
    ))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains and loads the teacher for a distillation run that names none.
fn prepare_teacher(
    config: &ExperimentConfig,
    dir: &Path,
) -> Result<Option<(TransformerModel, PathBuf)>> {
    let Some(d) = &config.distill else {
        return Ok(None);
    };
    let path = match &d.teacher {
        Some(p) => p.clone(),
        None => {
            let teacher_cfg = ExperimentConfig {
                leftover: 1.0,
                distill: None,
                out_dir: Some(dir.join("teacher")),
                analysis: super::config::AnalysisConfig {
                    enabled: false,
                    ..config.analysis.clone()
                },
                ..config.clone()
            };
            log::info!("training teacher in {}", dir.join("teacher").display());
            train(&teacher_cfg)?.dir.join(MODEL_FILE)
        }
    };
    let (teacher, _) = TransformerModel::load(&path)?;
    Ok(Some((teacher, path)))
}

/// Runs a full experiment: training, compaction check and report bundle.
pub fn train(config: &ExperimentConfig) -> Result<RunOutput> {
    train_from(config, None)
}

/// [`train`], optionally continuing from a state file.
pub fn train_from(config: &ExperimentConfig, resume: Option<&Path>) -> Result<RunOutput> {
    let started = Instant::now();
    config.validate()?;
    let dir = config
        .out_dir
        .clone()
        .unwrap_or_else(|| default_out_dir(config));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let config = ExperimentConfig {
        out_dir: Some(dir.clone()),
        ..config.clone()
    };
    write_file(&dir.join("config.toml"), config.to_toml()?.as_bytes())?;

    let teacher = prepare_teacher(&config, &dir)?;
    let (teacher_model, teacher_path) = match teacher {
        Some((m, p)) => (Some(m), Some(p)),
        None => (None, None),
    };
    let mut trainer = match resume {
        Some(state) => Trainer::resume(config.clone(), teacher_model, state)?,
        None => Trainer::new(config.clone(), teacher_model)?,
    };

    let metrics_path = dir.join(METRICS_FILE);
    let mut csv = csv::Writer::from_path(&metrics_path).map_err(|e| Error::Data(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Data(format!("writing {}: {e}", metrics_path.display()));
    for r in &trainer.rows {
        csv.serialize(r).map_err(csv_err)?;
    }
    csv.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let interval = config.train.checkpoint_interval;
    while !trainer.is_done() {
        let report = trainer.step()?;
        if let Some(row) = &report.row {
            log::info!(
                "step {} loss {:.4} valid {:.4} ppl {:.2} leftover {:.3}",
                row.step,
                row.train_loss,
                row.valid_loss,
                row.perplexity,
                row.leftover
            );
            csv.serialize(row).map_err(csv_err)?;
            csv.flush().map_err(|e| Error::io(&metrics_path, e))?;
        }
        if interval > 0 && trainer.step % interval == 0 && !trainer.is_done() {
            trainer.save_state(&dir.join(STATE_FILE))?;
        }
    }
    drop(csv);
    trainer.save_state(&dir.join(STATE_FILE))?;

    let hash = config.hash()?;
    let mut meta = toml::Table::new();
    meta.insert("config_hash".into(), toml::Value::String(hash.clone()));
    meta.insert(
        "method".into(),
        toml::Value::String(config.method.to_string()),
    );
    trainer.model.save(&dir.join(MODEL_FILE), meta.clone())?;
    write_file(&dir.join(MASKS_FILE), trainer.state.to_dump()?.as_bytes())?;

    let masks = trainer.model.masks();
    let (compacted, info) = compact(&trainer.model, &masks)?;
    let check = trainer.dataset.valid_batches(
        config
            .train
            .eval_max_blocks
            .max(1)
            .min(4 * config.train.batch_size),
    );
    let mut max_diff = 0.0f64;
    for b in &check {
        let a = trainer.model.logits(&b.tokens)?;
        let c = compacted.logits(&b.tokens)?;
        for (x, y) in a.data().iter().zip(c.data()) {
            max_diff = max_diff.max((*x as f64 - *y as f64).abs());
        }
    }
    if max_diff > compaction_tolerance() {
        return Err(Error::Pruning(format!(
            "compacted model deviates from the masked model by {max_diff:e}"
        )));
    }
    compacted.save(&dir.join(COMPACT_FILE), meta)?;

    if config.analysis.enabled {
        let blocks: Vec<Vec<Vec<usize>>> = trainer
            .dataset
            .train_prefix_batches(config.analysis.max_blocks)
            .into_iter()
            .map(|b| b.tokens)
            .collect();
        let (report, tracker) = analyze(
            &trainer.model,
            &blocks,
            AnalysisOptions {
                threshold: config.analysis.threshold,
                bins: config.analysis.bins,
                label_smoothing: config.model.label_smoothing,
            },
        )?;
        write_report_bundle(&dir.join(REPORT_DIR), &report, Some(&tracker), &hash)?;
    }

    let summary = RunSummary {
        config_hash: hash,
        method: config.method,
        selection: config.selection(),
        target_leftover: config.leftover as f64,
        final_leftover: trainer.state.leftover() as f64,
        kept_per_layer: trainer.state.kept_per_layer(),
        steps: trainer.step,
        data_hash: dataset_hash(&trainer.dataset),
        final_metrics: trainer.rows.last().cloned(),
        params_before: info.params_before,
        params_after: info.params_after,
        compact_widths: info.widths_after,
        compaction_max_abs_diff: max_diff,
        under_pruned: trainer.rows.last().is_some_and(|r| r.under_pruned),
        teacher: teacher_path,
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    let mut f = fs::File::create(dir.join(SUMMARY_FILE))
        .map_err(|e| Error::io(dir.join(SUMMARY_FILE), e))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f).map_err(|e| Error::io(dir.join(SUMMARY_FILE), e))?;
    Ok(RunOutput {
        dir,
        rows: trainer.rows,
        summary,
    })
}

/// SHA-256 over the training and validation token streams.
pub fn dataset_hash(dataset: &Dataset) -> String {
    Corpus {
        train: dataset.train.iter().map(|e| e.tokens.clone()).collect(),
        valid: dataset.valid.iter().map(|e| e.tokens.clone()).collect(),
    }
    .stream_hash()
}

/// Reads a metrics CSV written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
