//! End-to-end experiment over one axis. Every axis pretrains on the
//! synthetic corpus (or the configured one), measures pretraining loss and
//! downstream quantities per checkpoint, and writes deterministic CSV
//! reports into the run directory:
//!
//! * `metrics.csv`    — one row per checkpoint (l_pre, zero-shot l_down,
//!   Tr(H), PGM); the compute axis emits exactly 17 rows.
//! * `transfer.csv`   — fine-tune and linear-probe rows per checkpoint.
//! * `consistency.csv`— Spearman rho between l_pre and each series.
//! * `compute.csv`    — FLOPs and PF-days per checkpoint.
//! * `pca.csv`        — final-block PCA of checkpoints and fine-tuned
//!   models (compute axis only; other axes vary the configuration).
//! * `scaling-points.csv` + `fit.txt` — model and data axes only.

use std::fs;
use std::path::Path;

use clmlab::analysis::{fit_scaling_law, pf_days, write_compute_csv, write_fit_report, ComputeBudget};
use clmlab::encoder::{count_non_embedding_params, EncoderParameters, ModelConfig};
use clmlab::io::{load_checkpoint, nested_subsample};
use clmlab::metrics::{
    downstream_principal_gradient, model_hessian_trace, pgm_distance,
    pretrain_principal_gradient, write_metric_records, HutchinsonConfig, MetricRecord,
    zero_shot_downstream_loss,
};
use clmlab::pretrain::{eval_pretrain_loss, CheckpointMeta, MaskingPolicy};
use clmlab::synth::{generate_corpus, generate_corpus_tokens, toy_classification_task,
    write_corpus, write_task_csv};
use clmlab::tokenizer::Vocabulary;
use clmlab::transfer::{finetune, linear_probe, DownstreamTask, FinetuneRecipe};
use clmlab::viz::{collect_block_vectors, pca_project, relative_coords, write_projection_csv,
    Provenance};
use clmlab::{Error, Result};

use crate::config::WorkbenchConfig;
use crate::ops::{self, ingest_to_dir, metric_name, to_model_inputs, train_to_dir};
use crate::Axis;

pub fn run(cfg: &WorkbenchConfig, root: &Path, axis: Axis) -> Result<()> {
    let run_dir = root.join(format!("{}-{}", cfg.run_id, axis.label()));
    fs::create_dir_all(&run_dir)?;

    // Shared corpus and downstream task.
    let corpus_path = match &cfg.corpus.path {
        Some(p) => p.clone(),
        None => {
            let lines = generate_corpus_tokens(cfg.corpus.synth_tokens, cfg.corpus.synth_seed)?;
            let p = run_dir.join("corpus.txt");
            write_corpus(&p, &lines)?;
            p
        }
    };
    let ingested = ingest_to_dir(&run_dir, &corpus_path, cfg.seed, cfg.corpus.max_len)?;
    let vocab = ingested.vocab.clone();
    let task_smiles = generate_corpus(cfg.pipeline.task_molecules, cfg.pipeline.task_seed);
    let task = toy_classification_task(&task_smiles, cfg.pipeline.task_seed)?;
    write_task_csv(&run_dir.join("task.csv"), &task)?;
    println!(
        "pipeline: axis={} run_dir={} train={} valid={} task={}",
        axis.label(),
        run_dir.display(),
        ingested.train.len(),
        ingested.valid.len(),
        task.smiles.len()
    );

    match axis {
        Axis::Compute => compute_axis(cfg, &run_dir, &vocab, &ingested, &task),
        Axis::Model => series_axis(cfg, &run_dir, &vocab, &ingested, &task, Axis::Model),
        Axis::Data => series_axis(cfg, &run_dir, &vocab, &ingested, &task, Axis::Data),
    }
}

struct CheckpointMeasurement {
    id: String,
    params: EncoderParameters,
    meta: CheckpointMeta,
    l_pre: f64,
}

fn measure_checkpoint(
    cfg: &WorkbenchConfig,
    id: &str,
    path: &Path,
    valid_inputs: &[Vec<u32>],
    vocab: &Vocabulary,
) -> Result<CheckpointMeasurement> {
    let (params, meta) = load_checkpoint(path)?;
    let l_pre = eval_pretrain_loss(
        &params,
        valid_inputs,
        vocab,
        &MaskingPolicy::default(),
        cfg.metrics.eval_seed,
        cfg.metrics.eval_batch,
    )?;
    Ok(CheckpointMeasurement {
        id: id.to_string(),
        params,
        meta,
        l_pre,
    })
}

fn ft_recipe(cfg: &WorkbenchConfig) -> FinetuneRecipe {
    FinetuneRecipe {
        lr: cfg.transfer.lr,
        max_epochs: cfg.pipeline.ft_epochs,
        patience: cfg.pipeline.ft_patience,
        weight_decay: cfg.transfer.weight_decay,
        ..FinetuneRecipe::default()
    }
}

fn lp_recipe(cfg: &WorkbenchConfig) -> FinetuneRecipe {
    FinetuneRecipe {
        lr: cfg.pipeline.lp_lr,
        max_epochs: cfg.pipeline.lp_epochs,
        patience: cfg.pipeline.lp_epochs,
        weight_decay: cfg.transfer.weight_decay,
        ..FinetuneRecipe::default()
    }
}

fn transfer_row(
    m: &CheckpointMeasurement,
    task: &DownstreamTask,
    mode: &str,
    seed: u64,
    value: f64,
) -> MetricRecord {
    MetricRecord {
        checkpoint_id: m.id.clone(),
        epoch_fraction: m.meta.epoch_fraction,
        l_pre: Some(m.l_pre),
        task: task.name.clone(),
        l_down: None,
        mode: mode.to_string(),
        seed,
        metric_name: metric_name(task.metric).to_string(),
        value: Some(value),
        tr_h: None,
        pgm: None,
    }
}

/// One model, one corpus, checkpoints along the training trajectory: the
/// desk-scale analogue of the compute axis (17 snapshots over 4 epochs).
fn compute_axis(
    cfg: &WorkbenchConfig,
    run_dir: &Path,
    vocab: &Vocabulary,
    ingested: &clmlab::io::IngestOutput,
    task: &DownstreamTask,
) -> Result<()> {
    let config = cfg.model_config(vocab.len());
    let train_inputs = to_model_inputs(&ingested.train, vocab, config.max_len);
    let valid_inputs = to_model_inputs(&ingested.valid, vocab, config.max_len);
    let checkpoints = train_to_dir(
        run_dir,
        &cfg.run_id,
        &config,
        &cfg.train_schedule(),
        &train_inputs,
        vocab,
        cfg.seed,
        &ingested.corpus_digest,
    )?;
    println!("pipeline: {} checkpoints emitted", checkpoints.len());

    let policy = MaskingPolicy::default();
    let hutch = HutchinsonConfig {
        n_sequences: cfg.metrics.hutchinson_sequences,
        minibatch: cfg.metrics.hutchinson_minibatch,
    };
    let transfer_seed = *cfg.transfer.seeds.first().unwrap_or(&1);

    let mut metric_rows = Vec::new();
    let mut transfer_rows = Vec::new();
    let mut budgets = Vec::new();
    let mut pca_items: Vec<(Provenance, EncoderParameters)> = Vec::new();
    let n_params = count_non_embedding_params(&config) as f64;

    for (id, _, path) in &checkpoints {
        let m = measure_checkpoint(cfg, id, path, &valid_inputs, vocab)?;
        let l_down =
            zero_shot_downstream_loss(&m.params, task, vocab, &policy, cfg.metrics.eval_seed,
                cfg.metrics.eval_batch)?;
        let tr_h = model_hessian_trace(&m.params, &valid_inputs, vocab, &policy, &hutch, cfg.seed)?;
        let g_src = pretrain_principal_gradient(
            &m.params,
            &valid_inputs,
            vocab,
            &policy,
            cfg.metrics.pgm_k,
            cfg.metrics.pgm_minibatch,
            cfg.seed,
        )?;
        let g_tgt = downstream_principal_gradient(&m.params, task, vocab, cfg.metrics.pgm_k,
            cfg.seed)?;
        let pgm = pgm_distance(&g_src, &g_tgt)?;
        metric_rows.push(MetricRecord {
            checkpoint_id: m.id.clone(),
            epoch_fraction: m.meta.epoch_fraction,
            l_pre: Some(m.l_pre),
            task: task.name.clone(),
            l_down: Some(l_down),
            mode: "zero_shot".to_string(),
            seed: cfg.seed,
            metric_name: "l_down".to_string(),
            value: None,
            tr_h: Some(tr_h.trace),
            pgm: Some(pgm),
        });
        budgets.push(pf_days(n_params, m.meta.tokens_seen as f64));

        let (ft_outcome, ft_params) = finetune(&m.params, task, vocab, &ft_recipe(cfg),
            transfer_seed)?;
        transfer_rows.push(transfer_row(&m, task, "ft", transfer_seed, ft_outcome.metric_value));
        let lp_outcome = linear_probe(&m.params, task, vocab, &lp_recipe(cfg), transfer_seed)?;
        transfer_rows.push(transfer_row(&m, task, "lp", transfer_seed, lp_outcome.metric_value));
        println!(
            "pipeline: {} l_pre={:.4} l_down={:.4} tr_h={:.4} pgm={:.4e} ft={:.4} lp={:.4}",
            m.id, m.l_pre, l_down, tr_h.trace, pgm, ft_outcome.metric_value,
            lp_outcome.metric_value
        );

        pca_items.push((
            Provenance::Checkpoint {
                id: m.id.clone(),
                epoch_fraction: m.meta.epoch_fraction,
            },
            m.params,
        ));
        pca_items.push((
            Provenance::Finetuned {
                id: format!("ft-{}", m.id),
                task: task.name.clone(),
                init_id: m.id.clone(),
                init_epoch_fraction: m.meta.epoch_fraction,
            },
            ft_params,
        ));
    }

    write_metric_records(&run_dir.join("metrics.csv"), &metric_rows)?;
    write_metric_records(&run_dir.join("transfer.csv"), &transfer_rows)?;
    write_compute_csv(&run_dir.join("compute.csv"), &budgets)?;
    ops::consistency(
        &[run_dir.join("metrics.csv"), run_dir.join("transfer.csv")],
        Axis::Compute,
        &run_dir.join("consistency.csv"),
    )?;

    let refs: Vec<(Provenance, &EncoderParameters)> =
        pca_items.iter().map(|(p, params)| (p.clone(), params)).collect();
    let vectors = collect_block_vectors(&refs)?;
    let provenances: Vec<Provenance> = vectors.iter().map(|v| v.provenance.clone()).collect();
    let data: Vec<Vec<f64>> = vectors.into_iter().map(|v| v.data).collect();
    let projection = pca_project(&data, 2)?;
    let relative = relative_coords(&projection, &provenances)?;
    write_projection_csv(&run_dir.join("pca.csv"), &provenances, &projection, &relative)?;
    println!("pipeline: wrote metrics.csv ({} rows), transfer.csv ({} rows), consistency.csv, compute.csv, pca.csv",
        metric_rows.len(), transfer_rows.len());
    Ok(())
}

/// Model and data axes: several runs that differ in configuration or corpus
/// size, one final checkpoint each, with a scaling-law fit attempt.
fn series_axis(
    cfg: &WorkbenchConfig,
    run_dir: &Path,
    vocab: &Vocabulary,
    ingested: &clmlab::io::IngestOutput,
    task: &DownstreamTask,
    axis: Axis,
) -> Result<()> {
    // Final checkpoint only: interval = full horizon, no step-0 snapshot.
    let mut schedule = cfg.train_schedule();
    schedule.checkpoint_interval_epochs = schedule.epochs as f64;
    schedule.include_step0 = false;

    let mut variants: Vec<(String, ModelConfig, Vec<Vec<u32>>)> = Vec::new();
    match axis {
        Axis::Model => {
            let inputs = to_model_inputs(&ingested.train, vocab, cfg.model.max_len);
            for (i, &[d_model, n_head, n_layer, d_ff]) in cfg.pipeline.model_axis.iter().enumerate()
            {
                let config = ModelConfig {
                    d_model,
                    n_head,
                    n_layer,
                    d_ff,
                    vocab_size: vocab.len(),
                    max_len: cfg.model.max_len,
                    dropout_rate: cfg.model.dropout,
                };
                config.validate()?;
                variants.push((format!("m{i}"), config, inputs.clone()));
            }
        }
        Axis::Data => {
            let config = cfg.model_config(vocab.len());
            let inputs = to_model_inputs(&ingested.train, vocab, config.max_len);
            let subsets = nested_subsample(&inputs, &cfg.pipeline.data_fractions, cfg.seed)?;
            for (i, subset) in subsets.into_iter().enumerate() {
                variants.push((format!("d{i}"), config.clone(), subset));
            }
        }
        Axis::Compute => unreachable!("compute axis handled separately"),
    }

    let transfer_seed = *cfg.transfer.seeds.first().unwrap_or(&1);
    let mut metric_rows = Vec::new();
    let mut transfer_rows = Vec::new();
    let mut budgets: Vec<ComputeBudget> = Vec::new();
    let mut points = String::from("n,d,loss\n");

    for (tag, config, train_inputs) in &variants {
        let sub_dir = run_dir.join(tag);
        let valid_inputs = to_model_inputs(&ingested.valid, vocab, config.max_len);
        let checkpoints = train_to_dir(
            &sub_dir,
            &format!("{}-{tag}", cfg.run_id),
            config,
            &schedule,
            train_inputs,
            vocab,
            cfg.seed,
            &ingested.corpus_digest,
        )?;
        let (id, _, path) = checkpoints.last().ok_or_else(|| {
            Error::Training(format!("variant {tag} emitted no checkpoints"))
        })?;
        let m = measure_checkpoint(cfg, &format!("{tag}-{id}"), path, &valid_inputs, vocab)?;
        let l_down = zero_shot_downstream_loss(
            &m.params,
            task,
            vocab,
            &MaskingPolicy::default(),
            cfg.metrics.eval_seed,
            cfg.metrics.eval_batch,
        )?;
        metric_rows.push(MetricRecord {
            checkpoint_id: m.id.clone(),
            epoch_fraction: m.meta.epoch_fraction,
            l_pre: Some(m.l_pre),
            task: task.name.clone(),
            l_down: Some(l_down),
            mode: "zero_shot".to_string(),
            seed: cfg.seed,
            metric_name: "l_down".to_string(),
            value: None,
            tr_h: None,
            pgm: None,
        });
        let (ft_outcome, _) = finetune(&m.params, task, vocab, &ft_recipe(cfg), transfer_seed)?;
        transfer_rows.push(transfer_row(&m, task, "ft", transfer_seed, ft_outcome.metric_value));
        let lp_outcome = linear_probe(&m.params, task, vocab, &lp_recipe(cfg), transfer_seed)?;
        transfer_rows.push(transfer_row(&m, task, "lp", transfer_seed, lp_outcome.metric_value));

        let n_params = count_non_embedding_params(config) as f64;
        let d_tokens = m.meta.tokens_seen as f64;
        budgets.push(pf_days(n_params, d_tokens));
        points.push_str(&format!("{:.17e},{:.17e},{:.17e}\n", n_params, d_tokens, m.l_pre));
        println!(
            "pipeline: {tag} n={n_params} d={d_tokens} l_pre={:.4} l_down={:.4} ft={:.4} lp={:.4}",
            m.l_pre, l_down, ft_outcome.metric_value, lp_outcome.metric_value
        );
    }

    write_metric_records(&run_dir.join("metrics.csv"), &metric_rows)?;
    write_metric_records(&run_dir.join("transfer.csv"), &transfer_rows)?;
    write_compute_csv(&run_dir.join("compute.csv"), &budgets)?;
    fs::write(run_dir.join("scaling-points.csv"), points)?;
    ops::consistency(
        &[run_dir.join("metrics.csv"), run_dir.join("transfer.csv")],
        axis,
        &run_dir.join("consistency.csv"),
    )?;

    // A 3-point series badly underdetermines the 5-parameter law; report
    // the fit when the solver accepts it and say so plainly when it does not.
    let scaling: Vec<clmlab::analysis::ScalingPoint> =
        clmlab::analysis::read_scaling_points(&run_dir.join("scaling-points.csv"))?;
    match fit_scaling_law(&scaling) {
        Ok(fit) => {
            write_fit_report(&run_dir.join("fit.txt"), &fit)?;
            println!(
                "pipeline: fit alpha={} beta={} r_squared={}",
                fit.alpha, fit.beta, fit.r_squared
            );
        }
        Err(e) => println!("fit skipped: {e}"),
    }
    Ok(())
}
