//! The single structured configuration document (TOML) every subcommand
//! reads; command-line flags override document values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use clmlab::encoder::ModelConfig;
use clmlab::pretrain::TrainSchedule;
use clmlab::transfer::FinetuneRecipe;
use clmlab::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable selecting the run-directory root.
pub const RUN_ROOT_ENV: &str = "CLMLAB_RUN_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkbenchConfig {
    pub schema_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub transfer: TransferSection,
    pub metrics: MetricsSection,
    pub pipeline: PipelineSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Newline-delimited SMILES file; when absent the synthetic generator
    /// provides the corpus.
    pub path: Option<PathBuf>,
    pub synth_tokens: usize,
    pub synth_seed: u64,
    pub max_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_head: usize,
    pub n_layer: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size_seqs: usize,
    pub epochs: u32,
    pub checkpoint_interval_epochs: f64,
    pub include_step0: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub hutchinson_sequences: usize,
    pub hutchinson_minibatch: usize,
    pub pgm_k: usize,
    pub pgm_minibatch: usize,
    pub eval_batch: usize,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    /// (d_model, n_head, n_layer, d_ff) variants for the model axis.
    pub model_axis: Vec<[usize; 4]>,
    /// Nested corpus fractions for the data axis.
    pub data_fractions: Vec<f64>,
    /// Molecules in the synthetic downstream task pool.
    pub task_molecules: usize,
    pub task_seed: u64,
    /// Fine-tuning epochs inside the pipeline (kept small for desk scale).
    pub ft_epochs: usize,
    pub ft_patience: usize,
    pub lp_epochs: usize,
    /// Probe-head learning rate; frozen-feature heads tolerate a much
    /// larger step than full fine-tuning.
    pub lp_lr: f64,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        WorkbenchConfig {
            schema_version: SCHEMA_VERSION,
            run_id: "desk".into(),
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            transfer: TransferSection::default(),
            metrics: MetricsSection::default(),
            pipeline: PipelineSection::default(),
        }
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            path: None,
            synth_tokens: 12_000,
            synth_seed: 7,
            max_len: 512,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 16,
            n_head: 1,
            n_layer: 1,
            d_ff: 32,
            max_len: 64,
            dropout: 0.1,
        }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = TrainSchedule::default();
        ScheduleSection {
            warmup_steps: s.warmup_steps,
            peak_lr: s.peak_lr,
            weight_decay: s.weight_decay,
            beta1: s.beta1,
            beta2: s.beta2,
            batch_size_seqs: 8,
            epochs: s.epochs,
            checkpoint_interval_epochs: s.checkpoint_interval_epochs,
            include_step0: s.include_step0,
        }
    }
}

impl Default for TransferSection {
    fn default() -> Self {
        let r = FinetuneRecipe::default();
        TransferSection {
            lr: r.lr,
            max_epochs: 30,
            patience: r.patience,
            weight_decay: r.weight_decay,
            seeds: vec![1, 2, 3],
        }
    }
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            hutchinson_sequences: 32,
            hutchinson_minibatch: 16,
            pgm_k: 2,
            pgm_minibatch: 8,
            eval_batch: 32,
            eval_seed: 9999,
        }
    }
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            model_axis: vec![[8, 1, 1, 16], [16, 1, 1, 32], [24, 1, 1, 48]],
            data_fractions: vec![0.25, 0.5, 1.0],
            task_molecules: 120,
            task_seed: 23,
            ft_epochs: 4,
            ft_patience: 2,
            lp_epochs: 15,
            lp_lr: 1e-2,
        }
    }
}

impl WorkbenchConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let config = match path {
            None => WorkbenchConfig::default(),
            Some(p) => {
                let body = std::fs::read_to_string(p)?;
                let config: WorkbenchConfig = toml::from_str(&body)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                config
            }
        };
        if config.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} unsupported (expected {SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        Ok(config)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_head: self.model.n_head,
            n_layer: self.model.n_layer,
            d_ff: self.model.d_ff,
            vocab_size,
            max_len: self.model.max_len,
            dropout_rate: self.model.dropout,
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            warmup_steps: self.schedule.warmup_steps,
            peak_lr: self.schedule.peak_lr,
            weight_decay: self.schedule.weight_decay,
            dropout: self.model.dropout,
            beta1: self.schedule.beta1,
            beta2: self.schedule.beta2,
            batch_size_seqs: self.schedule.batch_size_seqs,
            epochs: self.schedule.epochs,
            checkpoint_interval_epochs: self.schedule.checkpoint_interval_epochs,
            include_step0: self.schedule.include_step0,
        }
    }

    pub fn finetune_recipe(&self) -> FinetuneRecipe {
        FinetuneRecipe {
            lr: self.transfer.lr,
            max_epochs: self.transfer.max_epochs,
            patience: self.transfer.patience,
            weight_decay: self.transfer.weight_decay,
            ..FinetuneRecipe::default()
        }
    }
}

/// Run-directory root: `--run-root` flag, else the environment variable,
/// else `./runs`.
pub fn run_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}
