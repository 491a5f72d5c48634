use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fineprune::analysis::{analyze, read_report, write_report_bundle, AnalysisOptions};
use fineprune::harness::{
    evaluate_model, load_dataset, train_from, Corpus, ExperimentConfig, COMPACT_FILE, REPORT_DIR,
};
use fineprune::model::TransformerModel;
use fineprune::pruning::compact;

#[derive(Parser)]
#[command(
    name = "fineprune",
    version,
    about = "Structured fine-pruning of small transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Preset name (demo, tiny) or path to a TOML config.
    #[arg(long, default_value = "demo")]
    config: String,
    /// Override a config key, e.g. `--set pruning.lambda_gum=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, out: Option<&Path>) -> Result<ExperimentConfig, fineprune::Error> {
        let mut c = ExperimentConfig::load(&self.config)?.with_overrides(&self.sets)?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = out {
            c.out_dir = Some(o.to_path_buf());
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train (and prune) a model, writing a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to runs/<method>-<leftover>-s<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a state file written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Validation perplexity (and exact match for the sort task) of a checkpoint.
    Evaluate {
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sensitivity and uniqueness of a checkpoint on a text corpus.
    Analyze {
        checkpoint: PathBuf,
        corpus: PathBuf,
        /// Report directory; defaults to <checkpoint dir>/report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        max_blocks: usize,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Physically remove masked neurons from a checkpoint.
    Compact {
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sensitivity and uniqueness ratios of a run against a baseline run.
    Compare {
        run: PathBuf,
        baseline: PathBuf,
        /// Also write the ratio report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<fineprune::Error>(),
            Some(fineprune::Error::Config(_) | fineprune::Error::TomlDe(_))
        )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn report_dir(path: &Path) -> PathBuf {
    if path.join("report.json").exists() {
        path.to_path_buf()
    } else {
        path.join(REPORT_DIR)
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { cfg, out, resume } => {
            let config = cfg.resolve(out.as_deref())?;
            let output = train_from(&config, resume.as_deref())?;
            let s = &output.summary;
            println!("run directory: {}", output.dir.display());
            if let Some(m) = &s.final_metrics {
                println!(
                    "final: valid loss {:.4}, perplexity {:.3}, leftover {:.4} (target {})",
                    m.valid_loss, m.perplexity, s.final_leftover, s.target_leftover
                );
            }
            println!(
                "parameters: {} -> {} after compaction",
                s.params_before, s.params_after
            );
        }
        Command::Evaluate { checkpoint, cfg } => {
            let mut config = cfg.resolve(None)?;
            let (model, _) = TransformerModel::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            config.model = model.config.clone();
            let dataset = load_dataset(&config)?;
            let m = evaluate_model(&model, &dataset, config.train.eval_max_blocks)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Analyze {
            checkpoint,
            corpus,
            out,
            max_blocks,
            threshold,
            seed,
        } => {
            let (model, meta) = TransformerModel::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let data = Corpus::load(&corpus, model.config.max_seq_len, 0.0, seed.unwrap_or(0))?;
            let mut blocks = data.train;
            if max_blocks > 0 {
                blocks.truncate(max_blocks);
            }
            let batches: Vec<Vec<Vec<usize>>> =
                blocks.chunks(8).map(<[Vec<usize>]>::to_vec).collect();
            let (report, tracker) = analyze(
                &model,
                &batches,
                AnalysisOptions {
                    threshold: threshold as fineprune::Real,
                    label_smoothing: model.config.label_smoothing,
                    ..AnalysisOptions::default()
                },
            )?;
            let hash = meta
                .get("config_hash")
                .and_then(|v| v.as_str())
                .unwrap_or("unknown")
                .to_string();
            let dir = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(REPORT_DIR)
            });
            write_report_bundle(&dir, &report, Some(&tracker), &hash)?;
            println!(
                "sensitivity {:.6e}, uniqueness {:.4} over {} examples; report in {}",
                report.sensitivity_total,
                report.uniqueness,
                report.examples,
                dir.display()
            );
        }
        Command::Compact { checkpoint, out } => {
            let (model, meta) = TransformerModel::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let (small, info) = compact(&model, &model.masks())?;
            let out = out.unwrap_or_else(|| checkpoint.with_file_name(COMPACT_FILE));
            if out == checkpoint {
                bail!("refusing to overwrite the input checkpoint");
            }
            small.save(&out, meta)?;
            println!(
                "widths {:?} -> {:?}, parameters {} -> {}; wrote {}",
                info.widths_before,
                info.widths_after,
                info.params_before,
                info.params_after,
                out.display()
            );
        }
        Command::Compare { run, baseline, out } => {
            let (r, _) = read_report(&report_dir(&run))
                .with_context(|| format!("reading report of {}", run.display()))?;
            let (b, _) = read_report(&report_dir(&baseline))
                .with_context(|| format!("reading report of {}", baseline.display()))?;
            let cmp = r.ratio_report(&b, &baseline.display().to_string())?;
            let ratios = cmp.ratios.expect("ratio_report fills ratios");
            let json = serde_json::to_string_pretty(&ratios)?;
            println!("{json}");
            if let Some(o) = out {
                std::fs::write(&o, json).with_context(|| format!("writing {}", o.display()))?;
            }
        }
    }
    Ok(())
}
