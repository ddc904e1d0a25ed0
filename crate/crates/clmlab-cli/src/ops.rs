//! One function per subcommand, plus the shared ingest/train plumbing the
//! pipeline composes. All CSV floats use `{:.17e}` so reruns are
//! byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use clmlab::analysis::{
    fit_scaling_law, pf_days, read_scaling_points, spearman_rho, to_lower_is_better,
    write_compute_csv, write_consistency_csv, write_fit_report, ConsistencyRow,
};
use clmlab::encoder::ModelConfig;
use clmlab::io::{
    ingest_corpus, load_checkpoint, save_checkpoint, IngestOutput, ManifestCheckpoint,
    RunManifest,
};
use clmlab::metrics::{
    downstream_principal_gradient, model_hessian_trace, pgm_distance,
    pretrain_principal_gradient, read_metric_records, HutchinsonConfig, MetricRecord,
};
use clmlab::pretrain::{eval_pretrain_loss, train, MaskingPolicy, TrainSchedule};
use clmlab::tokenizer::{tokenize, TokenSequence, Vocabulary};
use clmlab::transfer::{
    finetune, linear_probe, DownstreamTask, MetricKind, TaskKind, TransferOutcome,
};
use clmlab::viz::{collect_block_vectors, pca_project, relative_coords, write_projection_csv,
    Provenance};
use clmlab::{Error, Result};

use crate::config::WorkbenchConfig;
use crate::Axis;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferMode {
    Finetune,
    Probe,
}

impl TransferMode {
    pub fn label(self) -> &'static str {
        match self {
            TransferMode::Finetune => "ft",
            TransferMode::Probe => "lp",
        }
    }
}

impl Axis {
    pub fn label(self) -> &'static str {
        match self {
            Axis::Model => "model",
            Axis::Data => "data",
            Axis::Compute => "compute",
        }
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

/// Deduplicate/split a corpus into `run_dir` and persist the vocabulary.
pub fn ingest_to_dir(
    run_dir: &Path,
    corpus_path: &Path,
    seed: u64,
    max_len: usize,
) -> Result<IngestOutput> {
    fs::create_dir_all(run_dir)?;
    let out = ingest_corpus(corpus_path, seed, max_len)?;
    out.vocab.save(&run_dir.join("vocab.txt"))?;
    write_lines(
        &run_dir.join("train.txt"),
        out.train.iter().map(|s| s.source.as_str()),
    )?;
    write_lines(
        &run_dir.join("valid.txt"),
        out.valid.iter().map(|s| s.source.as_str()),
    )?;
    Ok(out)
}

fn write_lines<'a, I: Iterator<Item = &'a str>>(path: &Path, lines: I) -> Result<()> {
    let mut body = String::new();
    for line in lines {
        body.push_str(line);
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

/// Attach <bos>/<eos> and truncate content to the model context window.
pub fn to_model_inputs(
    seqs: &[TokenSequence],
    vocab: &Vocabulary,
    model_max_len: usize,
) -> Vec<Vec<u32>> {
    let keep = model_max_len.saturating_sub(2);
    seqs.iter()
        .map(|s| {
            let mut ids = Vec::with_capacity(s.ids.len().min(keep) + 2);
            ids.push(vocab.bos_id());
            ids.extend(s.ids.iter().take(keep));
            ids.push(vocab.eos_id());
            ids
        })
        .collect()
}

/// Pretrain into `run_dir`: fresh manifest, interval checkpoints named
/// `ckpt-NNNN.ckpt` by emission order, and `loss_log.csv`.
#[allow(clippy::too_many_arguments)]
pub fn train_to_dir(
    run_dir: &Path,
    run_id: &str,
    config: &ModelConfig,
    schedule: &TrainSchedule,
    train_inputs: &[Vec<u32>],
    vocab: &Vocabulary,
    seed: u64,
    corpus_digest: &str,
) -> Result<Vec<(String, f64, PathBuf)>> {
    fs::create_dir_all(run_dir)?;
    RunManifest::new(run_id, &config.hash(), corpus_digest, vec![seed]).save(run_dir)?;
    let policy = MaskingPolicy::default();
    let mut emitted: Vec<(String, f64, PathBuf)> = Vec::new();
    let run_dir_owned = run_dir.to_path_buf();
    let config_hash = config.hash();
    let mut sink = |params: &clmlab::encoder::EncoderParameters,
                    meta: &clmlab::pretrain::CheckpointMeta|
     -> Result<()> {
        let id = format!("ckpt-{:04}", emitted.len());
        let file = format!("{id}.ckpt");
        let path = run_dir_owned.join(&file);
        save_checkpoint(params, meta, &path)?;
        RunManifest::append_checkpoint(
            &run_dir_owned,
            ManifestCheckpoint {
                id: id.clone(),
                epoch_fraction: meta.epoch_fraction,
                file,
                config_hash: config_hash.clone(),
            },
        )?;
        emitted.push((id, meta.epoch_fraction, path));
        Ok(())
    };
    let output = train(
        config,
        schedule,
        &policy,
        train_inputs,
        vocab,
        seed,
        run_id,
        &mut sink,
    )?;
    let mut log = String::from("step,epoch_fraction,train_loss,lr\n");
    for row in &output.loss_log {
        log.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e}\n",
            row.step, row.epoch_fraction, row.train_loss, row.lr
        ));
    }
    fs::write(run_dir.join("loss_log.csv"), log)?;
    Ok(emitted)
}

fn read_corpus_inputs(
    path: &Path,
    vocab: &Vocabulary,
    model_max_len: usize,
) -> Result<Vec<Vec<u32>>> {
    let body = fs::read_to_string(path)?;
    let seqs: Vec<TokenSequence> = body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| tokenize(l, vocab))
        .collect::<Result<_>>()?;
    if seqs.is_empty() {
        return Err(Error::Data(format!("{}: empty corpus", path.display())));
    }
    Ok(to_model_inputs(&seqs, vocab, model_max_len))
}

// ---------------------------------------------------------------------------
// subcommands

pub fn ingest(corpus: &Path, seed: u64, max_len: usize, out: &Path) -> Result<()> {
    let result = ingest_to_dir(out, corpus, seed, max_len)?;
    let stats = serde_json::json!({
        "corpus_digest": result.corpus_digest,
        "n_train": result.train.len(),
        "n_valid": result.valid.len(),
        "n_duplicates": result.n_duplicates,
        "n_too_long": result.n_too_long,
        "vocab_size": result.vocab.len(),
    });
    fs::write(
        out.join("ingest.json"),
        serde_json::to_string_pretty(&stats)
            .map_err(|e| Error::Data(e.to_string()))?
            + "\n",
    )?;
    println!(
        "ingested: train={} valid={} duplicates={} too_long={} vocab={}",
        result.train.len(),
        result.valid.len(),
        result.n_duplicates,
        result.n_too_long,
        result.vocab.len()
    );
    Ok(())
}

pub fn vocab(corpus: &Path, out: &Path) -> Result<()> {
    let file = fs::File::open(corpus)?;
    let v = Vocabulary::build(std::io::BufReader::new(file))?;
    v.save(out)?;
    println!("vocab_size = {}", v.len());
    Ok(())
}

pub fn pretrain(cfg: &WorkbenchConfig, root: &Path) -> Result<()> {
    let run_dir = root.join(&cfg.run_id);
    fs::create_dir_all(&run_dir)?;
    let corpus_path = match &cfg.corpus.path {
        Some(p) => p.clone(),
        None => {
            let lines =
                clmlab::synth::generate_corpus_tokens(cfg.corpus.synth_tokens, cfg.corpus.synth_seed)?;
            let p = run_dir.join("corpus.txt");
            clmlab::synth::write_corpus(&p, &lines)?;
            p
        }
    };
    let ingested = ingest_to_dir(&run_dir, &corpus_path, cfg.seed, cfg.corpus.max_len)?;
    let config = cfg.model_config(ingested.vocab.len());
    config.validate()?;
    let train_inputs = to_model_inputs(&ingested.train, &ingested.vocab, config.max_len);
    let valid_inputs = to_model_inputs(&ingested.valid, &ingested.vocab, config.max_len);
    let checkpoints = train_to_dir(
        &run_dir,
        &cfg.run_id,
        &config,
        &cfg.train_schedule(),
        &train_inputs,
        &ingested.vocab,
        cfg.seed,
        &ingested.corpus_digest,
    )?;
    let (final_params, _) = load_checkpoint(&checkpoints.last().expect("checkpoints").2)?;
    let l_pre = eval_pretrain_loss(
        &final_params,
        &valid_inputs,
        &ingested.vocab,
        &MaskingPolicy::default(),
        cfg.metrics.eval_seed,
        cfg.metrics.eval_batch,
    )?;
    println!(
        "pretrained: run_dir={} checkpoints={} l_pre={l_pre}",
        run_dir.display(),
        checkpoints.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn transfer(
    cfg: &WorkbenchConfig,
    checkpoint: &Path,
    vocab_path: &Path,
    task_path: &Path,
    task_name: &str,
    kind: TaskKind,
    metric: MetricKind,
    mode: TransferMode,
    out: &Path,
) -> Result<()> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let task = DownstreamTask::from_csv(task_path, task_name, kind, metric)?;
    let recipe = cfg.finetune_recipe();
    let mut rows = String::from("seed,mode,metric_name,value,best_epoch,best_valid_loss\n");
    let mut values = Vec::new();
    for &seed in &cfg.transfer.seeds {
        let outcome: TransferOutcome = match mode {
            TransferMode::Finetune => finetune(&params, &task, &vocab, &recipe, seed)?.0,
            TransferMode::Probe => linear_probe(&params, &task, &vocab, &recipe, seed)?,
        };
        rows.push_str(&format!(
            "{seed},{},{},{:.17e},{},{:.17e}\n",
            mode.label(),
            metric_name(metric),
            outcome.metric_value,
            outcome.best_epoch,
            outcome.best_valid_loss
        ));
        values.push(outcome.metric_value);
    }
    fs::write(out, rows)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    println!(
        "{} {} mean = {mean} std = {std} over {} seeds",
        mode.label(),
        metric_name(metric),
        values.len()
    );
    Ok(())
}

pub fn metric_name(metric: MetricKind) -> &'static str {
    match metric {
        MetricKind::RocAuc => "roc_auc",
        MetricKind::Mae => "mae",
        MetricKind::Rmse => "rmse",
    }
}

pub fn eval_loss(
    cfg: &WorkbenchConfig,
    checkpoint: &Path,
    vocab_path: &Path,
    corpus: &Path,
) -> Result<()> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let inputs = read_corpus_inputs(corpus, &vocab, params.config().max_len)?;
    let l_pre = eval_pretrain_loss(
        &params,
        &inputs,
        &vocab,
        &MaskingPolicy::default(),
        cfg.metrics.eval_seed,
        cfg.metrics.eval_batch,
    )?;
    println!("l_pre = {l_pre}");
    Ok(())
}

pub fn trace_hessian(
    cfg: &WorkbenchConfig,
    checkpoint: &Path,
    vocab_path: &Path,
    corpus: &Path,
    seed: u64,
) -> Result<()> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let inputs = read_corpus_inputs(corpus, &vocab, params.config().max_len)?;
    let hutch = HutchinsonConfig {
        n_sequences: cfg.metrics.hutchinson_sequences,
        minibatch: cfg.metrics.hutchinson_minibatch,
    };
    let est = model_hessian_trace(&params, &inputs, &vocab, &MaskingPolicy::default(), &hutch, seed)?;
    println!("tr_h = {} (probes = {})", est.trace, est.n_probes);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn pgm(
    cfg: &WorkbenchConfig,
    checkpoint: &Path,
    vocab_path: &Path,
    corpus: &Path,
    task_path: &Path,
    task_name: &str,
    kind: TaskKind,
    metric: MetricKind,
    seed: u64,
) -> Result<()> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let inputs = read_corpus_inputs(corpus, &vocab, params.config().max_len)?;
    let task = DownstreamTask::from_csv(task_path, task_name, kind, metric)?;
    let g_source = pretrain_principal_gradient(
        &params,
        &inputs,
        &vocab,
        &MaskingPolicy::default(),
        cfg.metrics.pgm_k,
        cfg.metrics.pgm_minibatch,
        seed,
    )?;
    let g_target = downstream_principal_gradient(&params, &task, &vocab, cfg.metrics.pgm_k, seed)?;
    let d = pgm_distance(&g_source, &g_target)?;
    println!("pgm = {d}");
    Ok(())
}

/// Spearman rank consistency between pretraining loss and each downstream
/// series found in the metric records. Fine-tune and probe series use the
/// task metric transformed to lower-is-better; zero-shot series use the
/// downstream MLM loss directly.
pub fn consistency(metrics: &[PathBuf], axis: Axis, out: &Path) -> Result<()> {
    let mut records: Vec<MetricRecord> = Vec::new();
    for path in metrics {
        records.extend(read_metric_records(path)?);
    }
    if records.is_empty() {
        return Err(Error::Data("no metric records supplied".into()));
    }
    let l_pre_of = |r: &MetricRecord| -> Option<f64> {
        r.l_pre.or_else(|| {
            records
                .iter()
                .find(|o| o.checkpoint_id == r.checkpoint_id && o.l_pre.is_some())
                .and_then(|o| o.l_pre)
        })
    };

    // (task, mode) -> parallel (l_pre, lower-is-better downstream) series
    let mut series: Vec<(String, String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut push = |task: &str, mode: &str, x: f64, y: f64| {
        match series
            .iter_mut()
            .find(|(t, m, _, _)| t == task && m == mode)
        {
            Some((_, _, xs, ys)) => {
                xs.push(x);
                ys.push(y);
            }
            None => series.push((task.into(), mode.into(), vec![x], vec![y])),
        }
    };
    for r in &records {
        let Some(l_pre) = l_pre_of(r) else { continue };
        match r.mode.as_str() {
            "ft" | "lp" => {
                let Some(value) = r.value else { continue };
                let kind = if r.metric_name == "roc_auc" {
                    TaskKind::Classification
                } else {
                    TaskKind::Regression
                };
                push(&r.task, &r.mode, l_pre, to_lower_is_better(value, kind)?);
            }
            _ => {
                if let Some(l_down) = r.l_down {
                    push(&r.task, "zero_shot", l_pre, l_down);
                }
            }
        }
    }

    let mut rows = Vec::new();
    for (task, mode, xs, ys) in &series {
        match spearman_rho(xs, ys) {
            Ok(rho) => {
                println!("consistency: task={task} mode={mode} rho={rho}");
                rows.push(ConsistencyRow {
                    task: task.clone(),
                    axis: axis.label().to_string(),
                    mode: mode.clone(),
                    rho,
                });
            }
            Err(e) => println!("consistency: task={task} mode={mode} skipped ({e})"),
        }
    }
    if rows.is_empty() {
        return Err(Error::Metric(
            "no rankable series in the metric records".into(),
        ));
    }
    write_consistency_csv(out, &rows)?;
    Ok(())
}

pub fn fit_scaling(points: &Path, out: &Path) -> Result<()> {
    let points = read_scaling_points(points)?;
    let fit = fit_scaling_law(&points)?;
    write_fit_report(out, &fit)?;
    println!(
        "fit: A={} B={} E={} alpha={} beta={} r_squared={}",
        fit.a, fit.b, fit.e, fit.alpha, fit.beta, fit.r_squared
    );
    Ok(())
}

/// Models-list CSV schema:
/// item_id,kind,task,init_id,init_epoch_fraction,epoch_fraction,file
pub fn pca_viz(models: &Path, out: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(models).map_err(|e| Error::Data(e.to_string()))?;
    let expected = [
        "item_id",
        "kind",
        "task",
        "init_id",
        "init_epoch_fraction",
        "epoch_fraction",
        "file",
    ];
    let header = reader.headers().map_err(|e| Error::Data(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "models list header must be {}",
            expected.join(",")
        )));
    }
    let base = models.parent().unwrap_or_else(|| Path::new("."));
    let mut items: Vec<(Provenance, clmlab::encoder::EncoderParameters)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|e| Error::Data(format!("{}: bad float: {e}", models.display())))
        };
        let provenance = match field(1).as_str() {
            "checkpoint" => Provenance::Checkpoint {
                id: field(0),
                epoch_fraction: parse(5)?,
            },
            "finetuned" => Provenance::Finetuned {
                id: field(0),
                task: field(2),
                init_id: field(3),
                init_epoch_fraction: parse(4)?,
            },
            other => {
                return Err(Error::Data(format!(
                    "unknown model kind {other:?} (expected checkpoint or finetuned)"
                )))
            }
        };
        let file = PathBuf::from(field(6));
        let path = if file.is_absolute() { file } else { base.join(file) };
        let (params, _) = load_checkpoint(&path)?;
        items.push((provenance, params));
    }
    let refs: Vec<(Provenance, &clmlab::encoder::EncoderParameters)> = items
        .iter()
        .map(|(p, params)| (p.clone(), params))
        .collect();
    let vectors = collect_block_vectors(&refs)?;
    let provenances: Vec<Provenance> = vectors.iter().map(|v| v.provenance.clone()).collect();
    let data: Vec<Vec<f64>> = vectors.into_iter().map(|v| v.data).collect();
    let projection = pca_project(&data, 2)?;
    let relative = relative_coords(&projection, &provenances)?;
    write_projection_csv(out, &provenances, &projection, &relative)?;
    println!(
        "pca: items={} explained=[{}, {}]",
        provenances.len(),
        projection.explained[0],
        projection.explained[1]
    );
    Ok(())
}

pub fn compute_budget(n: f64, d: f64, out: Option<&Path>) -> Result<()> {
    if !(n > 0.0) || !(d > 0.0) {
        return Err(Error::Config("n and d must be positive".into()));
    }
    let budget = pf_days(n, d);
    println!("flops_total = {:?}", budget.flops_total);
    println!("pf_days = {:?}", budget.pf_days);
    if let Some(path) = out {
        write_compute_csv(path, &[budget])?;
    }
    Ok(())
}
