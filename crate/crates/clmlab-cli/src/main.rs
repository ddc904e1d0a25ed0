//! `clmlab` — workbench CLI: corpus ingestion, vocabulary construction,
//! MLM pretraining with interval checkpoints, downstream fine-tuning and
//! probing, transferability metrics, consistency analysis, scaling-law
//! fitting, parameter-space PCA, compute accounting, and an end-to-end
//! pipeline over a chosen experiment axis.

mod config;
mod ops;
mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use clmlab::{Error, Result};

#[derive(Parser)]
#[command(name = "clmlab", version, about = "chemical language model laboratory")]
struct Cli {
    /// Run-directory root (falls back to $CLMLAB_RUN_ROOT, then ./runs)
    #[arg(long, global = true)]
    run_root: Option<PathBuf>,
    /// Configuration document (TOML); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskKindArg {
    Classification,
    Regression,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    RocAuc,
    Mae,
    Rmse,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Axis {
    Model,
    Data,
    Compute,
}

#[derive(Subcommand)]
enum Command {
    /// Deduplicate, length-filter, and split a corpus 90/10
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the atom-wise vocabulary from a corpus
    Vocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain with MLM, emitting interval checkpoints and a loss log
    Pretrain {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Fine-tune a checkpoint on a downstream task
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        task_name: String,
        #[arg(long, value_enum)]
        kind: TaskKindArg,
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a linear probe on frozen representations
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        task_name: String,
        #[arg(long, value_enum)]
        kind: TaskKindArg,
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-LM validation loss of a checkpoint on a corpus
    EvalLoss {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Hutchinson estimate of the loss Hessian trace
    TraceHessian {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Principal gradient mismatch between pretraining and a task
    Pgm {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        task_name: String,
        #[arg(long, value_enum)]
        kind: TaskKindArg,
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Spearman consistency between pretraining loss and downstream series
    Consistency {
        /// Metric-record CSVs (repeatable)
        #[arg(long, required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit loss = E + A/N^alpha + B/D^beta to scaling points
    FitScaling {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PCA of final-block parameters across checkpoints and fine-tuned models
    PcaViz {
        /// CSV listing models: item_id,kind,task,init_id,init_epoch_fraction,epoch_fraction,file
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// FLOPs and PF-days for a training budget
    ComputeBudget {
        #[arg(long)]
        n: f64,
        #[arg(long)]
        d: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain, transfer, metrics, and analysis over one experiment axis
    Pipeline {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        run_id: Option<String>,
    },
}

impl From<TaskKindArg> for clmlab::transfer::TaskKind {
    fn from(k: TaskKindArg) -> Self {
        match k {
            TaskKindArg::Classification => clmlab::transfer::TaskKind::Classification,
            TaskKindArg::Regression => clmlab::transfer::TaskKind::Regression,
        }
    }
}

impl From<MetricArg> for clmlab::transfer::MetricKind {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::RocAuc => clmlab::transfer::MetricKind::RocAuc,
            MetricArg::Mae => clmlab::transfer::MetricKind::Mae,
            MetricArg::Rmse => clmlab::transfer::MetricKind::Rmse,
        }
    }
}

fn error_category(e: &Error) -> &'static str {
    match e {
        Error::Tokenizer(_) => "tokenizer",
        Error::Shape(_) => "shape",
        Error::Config(_) => "config",
        Error::Data(_) => "data",
        Error::Training(_) => "training",
        Error::Metric(_) => "metric",
        Error::Fit(_) => "fit",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io(_) => "io",
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config::WorkbenchConfig::load(cli.config.as_deref())?;
    let root = config::run_root(cli.run_root);
    match cli.command {
        Command::Ingest {
            corpus,
            seed,
            max_len,
            out,
        } => ops::ingest(
            &corpus,
            seed.unwrap_or(cfg.seed),
            max_len.unwrap_or(cfg.corpus.max_len),
            &out,
        ),
        Command::Vocab { corpus, out } => ops::vocab(&corpus, &out),
        Command::Pretrain {
            seed,
            epochs,
            run_id,
        } => {
            let mut cfg = cfg;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.schedule.epochs = e;
            }
            if let Some(id) = run_id {
                cfg.run_id = id;
            }
            ops::pretrain(&cfg, &root).map(|_| ())
        }
        Command::Finetune {
            checkpoint,
            vocab,
            task,
            task_name,
            kind,
            metric,
            out,
        } => ops::transfer(
            &cfg,
            &checkpoint,
            &vocab,
            &task,
            &task_name,
            kind.into(),
            metric.into(),
            ops::TransferMode::Finetune,
            &out,
        ),
        Command::Probe {
            checkpoint,
            vocab,
            task,
            task_name,
            kind,
            metric,
            out,
        } => ops::transfer(
            &cfg,
            &checkpoint,
            &vocab,
            &task,
            &task_name,
            kind.into(),
            metric.into(),
            ops::TransferMode::Probe,
            &out,
        ),
        Command::EvalLoss {
            checkpoint,
            vocab,
            corpus,
        } => ops::eval_loss(&cfg, &checkpoint, &vocab, &corpus),
        Command::TraceHessian {
            checkpoint,
            vocab,
            corpus,
            seed,
        } => ops::trace_hessian(&cfg, &checkpoint, &vocab, &corpus, seed.unwrap_or(cfg.seed)),
        Command::Pgm {
            checkpoint,
            vocab,
            corpus,
            task,
            task_name,
            kind,
            metric,
            seed,
        } => ops::pgm(
            &cfg,
            &checkpoint,
            &vocab,
            &corpus,
            &task,
            &task_name,
            kind.into(),
            metric.into(),
            seed.unwrap_or(cfg.seed),
        ),
        Command::Consistency { metrics, axis, out } => ops::consistency(&metrics, axis, &out),
        Command::FitScaling { points, out } => ops::fit_scaling(&points, &out),
        Command::PcaViz { models, out } => ops::pca_viz(&models, &out),
        Command::ComputeBudget { n, d, out } => ops::compute_budget(n, d, out.as_deref()),
        Command::Pipeline { axis, run_id } => {
            let mut cfg = cfg;
            if let Some(id) = run_id {
                cfg.run_id = id;
            }
            pipeline::run(&cfg, &root, axis)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let msg = e.to_string().replace('\n', "; ");
        eprintln!("error: category={} message={msg:?}", error_category(&e));
        std::process::exit(1);
    }
}
