//! Experiment runner: configuration, datasets, training loop and evaluation.

mod config;
mod data;
mod eval;
mod optim;
mod train;

pub use config::{
    AnalysisConfig, DataConfig, DataKind, ExperimentConfig, PruningConfig, TrainConfig,
    SCHEMA_VERSION,
};
pub use data::{
    blocks, sort_splits, synth_sort_task, tokenize, Batch, Corpus, Dataset, Example, SortExample,
    SORT_END, SORT_PREFIX, SORT_SEPARATOR,
};
pub use eval::{
    argmax, batch_nll, check_vocab, exact_match, exact_match_with, greedy_decode, perplexity,
    EvalMetrics,
};
pub use optim::{AdamW, LinearSchedule};
pub use train::{
    compaction_tolerance, dataset_hash, evaluate_model, init_model, load_dataset, read_metrics,
    total_steps, train, train_from, LossTerms, MetricsRow, RunOutput, RunSummary, StepReport,
    Trainer, COMPACT_FILE, MASKS_FILE, METRICS_FILE, MODEL_FILE, REPORT_DIR, STATE_FILE,
    SUMMARY_FILE,
};
