//! Downstream adaptation: fine-tuning and linear probing, task losses with
//! missing-label masking, target normalization, evaluation metrics, the
//! dataset-size batch rule, and epoch-level early stopping.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Precision, Tape, Tensor, VarId};
use crate::encoder::{
    forward_hidden, pool_bos, pool_mean, BoundParams, EncoderParameters, Mode,
};
use crate::error::{Error, Result};
use crate::pretrain::AdamW;
use crate::tokenizer::{self, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    RocAuc,
    Mae,
    Rmse,
}

/// Labeled molecular task with fixed train/valid/test splits, read from
/// input and never generated here. Missing labels are `None`.
#[derive(Debug, Clone)]
pub struct DownstreamTask {
    pub name: String,
    pub kind: TaskKind,
    pub metric: MetricKind,
    pub n_targets: usize,
    pub smiles: Vec<String>,
    pub labels: Vec<Vec<Option<f64>>>,
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl DownstreamTask {
    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.metric) {
            (TaskKind::Classification, MetricKind::RocAuc) => {}
            (TaskKind::Regression, MetricKind::Mae | MetricKind::Rmse) => {}
            _ => {
                return Err(Error::Config(format!(
                    "task {}: metric does not match task kind",
                    self.name
                )))
            }
        }
        if self.labels.len() != self.smiles.len() {
            return Err(Error::Config("label/molecule count mismatch".into()));
        }
        for row in &self.labels {
            if row.len() != self.n_targets {
                return Err(Error::Config("ragged label matrix".into()));
            }
            for v in row.iter().flatten() {
                if !v.is_finite() {
                    return Err(Error::Config("non-finite label".into()));
                }
                if self.kind == TaskKind::Classification && *v != 0.0 && *v != 1.0 {
                    return Err(Error::Config(format!(
                        "classification label {v} outside {{0,1}}"
                    )));
                }
            }
        }
        let mut seen = vec![false; self.smiles.len()];
        for idx in [&self.train_idx, &self.valid_idx, &self.test_idx] {
            for &i in idx {
                if i >= self.smiles.len() || seen[i] {
                    return Err(Error::Config(
                        "splits must be disjoint and in range".into(),
                    ));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    /// CSV with header `smiles,split,<target_1>,...`; split in
    /// {train,valid,test}; missing labels are empty fields.
    pub fn from_csv(
        path: &Path,
        name: &str,
        kind: TaskKind,
        metric: MetricKind,
    ) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        let headers = rdr
            .headers()
            .map_err(|e| Error::Data(e.to_string()))?
            .clone();
        if headers.len() < 3 || &headers[0] != "smiles" || &headers[1] != "split" {
            return Err(Error::Data(format!(
                "{}: expected header smiles,split,<targets...>",
                path.display()
            )));
        }
        let n_targets = headers.len() - 2;
        let mut task = DownstreamTask {
            name: name.to_string(),
            kind,
            metric,
            n_targets,
            smiles: Vec::new(),
            labels: Vec::new(),
            train_idx: Vec::new(),
            valid_idx: Vec::new(),
            test_idx: Vec::new(),
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
            task.smiles.push(rec[0].to_string());
            match &rec[1] {
                "train" => task.train_idx.push(i),
                "valid" => task.valid_idx.push(i),
                "test" => task.test_idx.push(i),
                other => {
                    return Err(Error::Data(format!(
                        "{}: unknown split {other:?} on row {}",
                        path.display(),
                        i + 2
                    )))
                }
            }
            let mut row = Vec::with_capacity(n_targets);
            for t in 0..n_targets {
                let field = rec[t + 2].trim();
                if field.is_empty() {
                    row.push(None);
                } else {
                    row.push(Some(field.parse::<f64>().map_err(|e| {
                        Error::Data(format!("{}: row {}: {e}", path.display(), i + 2))
                    })?));
                }
            }
            task.labels.push(row);
        }
        task.validate()?;
        Ok(task)
    }
}

// ---------------------------------------------------------------------------
// target normalization

/// Per-target mean and population standard deviation from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetNormalizer {
    pub fn fit(task: &DownstreamTask) -> Result<Self> {
        let mut mean = vec![0.0; task.n_targets];
        let mut std = vec![0.0; task.n_targets];
        for t in 0..task.n_targets {
            let obs: Vec<f64> = task
                .train_idx
                .iter()
                .filter_map(|&i| task.labels[i][t])
                .collect();
            if obs.len() < 2 {
                return Err(Error::Data(format!(
                    "target {t}: needs at least 2 observed training labels"
                )));
            }
            let m = obs.iter().sum::<f64>() / obs.len() as f64;
            let v = obs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / obs.len() as f64;
            if v <= 0.0 {
                return Err(Error::Data(format!("target {t}: constant training labels")));
            }
            mean[t] = m;
            std[t] = v.sqrt();
        }
        Ok(TargetNormalizer { mean, std })
    }

    /// Identity transform (all regression math skipped for classification).
    pub fn identity(n_targets: usize) -> Self {
        TargetNormalizer {
            mean: vec![0.0; n_targets],
            std: vec![1.0; n_targets],
        }
    }

    pub fn normalize(&self, target: usize, y: f64) -> f64 {
        (y - self.mean[target]) / self.std[target]
    }

    pub fn denormalize(&self, target: usize, z: f64) -> f64 {
        z * self.std[target] + self.mean[target]
    }
}

// ---------------------------------------------------------------------------
// metrics

/// 32 for n <= 1000, 256 for 1001..=5000, 512 above.
pub fn batch_size_rule(n_train_samples: usize) -> usize {
    if n_train_samples <= 1000 {
        32
    } else if n_train_samples <= 5000 {
        256
    } else {
        512
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half (Mann-Whitney via average ranks).
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric("scores/labels length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("roc_auc needs both classes present".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1.0)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// 1-based ranks with ties assigned their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mean absolute error; pairs with a missing side are excluded upstream.
pub fn mae(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() || pred.is_empty() {
        return Err(Error::Metric("mae needs equal nonzero lengths".into()));
    }
    Ok(pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() || pred.is_empty() {
        return Err(Error::Metric("rmse needs equal nonzero lengths".into()));
    }
    let mse = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

// ---------------------------------------------------------------------------
// task loss on a tape

/// Numerically stable softplus via a detached shift: ln(1+e^x) =
/// m + ln(e^{-m} + e^{x-m}) with m = max(x, 0) held constant. The identity
/// holds for any constant shift, so gradients are exact.
fn softplus(tape: &mut Tape, x: VarId) -> Result<VarId> {
    let t = tape.value(x);
    let shape = t.shape().to_vec();
    let m: Vec<f64> = t.data().iter().map(|&v| v.max(0.0)).collect();
    let mc = tape.constant(Tensor::new(shape, m)?);
    let neg_m = tape.neg(mc);
    let e1 = tape.exp(neg_m);
    let xm = tape.sub(x, mc)?;
    let e2 = tape.exp(xm);
    let s = tape.add(e1, e2)?;
    let l = tape.ln(s);
    tape.add(mc, l)
}

/// Mean of per-cell losses over observed (sample, target) cells:
/// sigmoid cross-entropy for classification, squared error for regression.
/// `labels` and `mask` are (n, T) tensors; masked cells carry label 0.
pub fn multitask_loss(
    tape: &mut Tape,
    logits: VarId,
    labels: &Tensor,
    mask: &Tensor,
    kind: TaskKind,
) -> Result<VarId> {
    let n_obs: f64 = mask.data().iter().sum();
    if n_obs == 0.0 {
        return Err(Error::Training("batch has no observed labels".into()));
    }
    let y = tape.constant(labels.clone());
    let m = tape.constant(mask.clone());
    let cells = match kind {
        TaskKind::Classification => {
            let sp = softplus(tape, logits)?;
            let yx = tape.mul(y, logits)?;
            tape.sub(sp, yx)?
        }
        TaskKind::Regression => {
            let d = tape.sub(logits, y)?;
            tape.mul(d, d)?
        }
    };
    let masked = tape.mul(cells, m)?;
    let s = tape.sum_all(masked);
    Ok(tape.scale(s, 1.0 / n_obs))
}

// ---------------------------------------------------------------------------
// adaptation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneRecipe {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for FinetuneRecipe {
    fn default() -> Self {
        FinetuneRecipe {
            lr: 3e-5,
            max_epochs: 500,
            patience: 10,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
        }
    }
}

/// Linear-to-zero polynomial decay (degree 1) over the max-epoch horizon.
pub fn finetune_lr_at(epoch: usize, recipe: &FinetuneRecipe) -> f64 {
    recipe.lr * (1.0 - epoch as f64 / recipe.max_epochs.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub metric_value: f64,
    pub per_target: Vec<f64>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
}

fn encode_inputs(
    task: &DownstreamTask,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Vec<u32>>> {
    task.smiles
        .iter()
        .map(|s| {
            let seq = tokenizer::tokenize(s, vocab)?;
            let mut ids = Vec::with_capacity(seq.len() + 2);
            ids.push(vocab.bos_id());
            ids.extend(seq.ids.iter().take(max_len - 2));
            ids.push(vocab.eos_id());
            Ok(ids)
        })
        .collect()
}

fn label_matrix(
    task: &DownstreamTask,
    idx: &[usize],
    norm: &TargetNormalizer,
) -> (Tensor, Tensor) {
    let t = task.n_targets;
    let mut labels = vec![0.0; idx.len() * t];
    let mut mask = vec![0.0; idx.len() * t];
    for (r, &i) in idx.iter().enumerate() {
        for c in 0..t {
            if let Some(y) = task.labels[i][c] {
                labels[r * t + c] = match task.kind {
                    TaskKind::Classification => y,
                    TaskKind::Regression => norm.normalize(c, y),
                };
                mask[r * t + c] = 1.0;
            }
        }
    }
    (
        Tensor::new(vec![idx.len(), t], labels).unwrap(),
        Tensor::new(vec![idx.len(), t], mask).unwrap(),
    )
}

/// (1,d) rows stacked into an (n,d) matrix, staying on-tape.
fn stack_rows(tape: &mut Tape, rows: &[VarId]) -> VarId {
    let cols: Vec<VarId> = rows.iter().map(|&r| tape.transpose(r)).collect();
    let cat = tape.concat_cols(&cols);
    tape.transpose(cat)
}

/// Test-metric evaluation on the denormalized scale. Returns the unweighted
/// mean over targets plus per-target values.
fn task_metric(
    task: &DownstreamTask,
    idx: &[usize],
    preds: &Tensor,
    norm: &TargetNormalizer,
) -> Result<(f64, Vec<f64>)> {
    let t = task.n_targets;
    let mut per_target = Vec::with_capacity(t);
    for c in 0..t {
        let mut p = Vec::new();
        let mut y = Vec::new();
        for (r, &i) in idx.iter().enumerate() {
            if let Some(label) = task.labels[i][c] {
                let raw = preds.data()[r * t + c];
                p.push(match task.kind {
                    TaskKind::Classification => raw, // rank-based metric, logits suffice
                    TaskKind::Regression => norm.denormalize(c, raw),
                });
                y.push(label);
            }
        }
        let v = match task.metric {
            MetricKind::RocAuc => roc_auc(&p, &y)?,
            MetricKind::Mae => mae(&p, &y)?,
            MetricKind::Rmse => rmse(&p, &y)?,
        };
        per_target.push(v);
    }
    let mean = per_target.iter().sum::<f64>() / t as f64;
    Ok((mean, per_target))
}

struct HeadTensors {
    w: Tensor,
    b: Tensor,
}

impl HeadTensors {
    fn init(d: usize, t: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        HeadTensors {
            w: Tensor::trunc_normal(vec![d, t], 0.02, &mut rng),
            b: Tensor::zeros(vec![1, t]),
        }
    }
}

/// Representations of every molecule under the frozen encoder (eval mode);
/// pooling per the probe rule (mean over non-special tokens).
fn frozen_representations(
    params: &EncoderParameters,
    inputs: &[Vec<u32>],
    vocab: &Vocabulary,
) -> Result<Tensor> {
    let config = params.config().clone();
    let d = config.d_model;
    let mut out = Vec::with_capacity(inputs.len() * d);
    for ids in inputs {
        let mut tape = Tape::new(Precision::F32);
        let bound = BoundParams::bind_partial(&mut tape, params, |_| false);
        let hidden = forward_hidden(&mut tape, &bound, &config, ids, &mut Mode::Eval)?;
        let special: Vec<bool> = ids.iter().map(|&i| vocab.is_special(i)).collect();
        let rep = pool_mean(&mut tape, hidden, &special)?;
        out.extend_from_slice(tape.value(rep).data());
    }
    Tensor::new(vec![inputs.len(), d], out)
}

/// Train a linear head on fixed representations with the downstream recipe.
/// Exposed separately so probing can be tested against stubbed encoders.
#[allow(clippy::too_many_arguments)]
pub fn train_linear_head(
    reps: &Tensor,
    task: &DownstreamTask,
    norm: &TargetNormalizer,
    recipe: &FinetuneRecipe,
    seed: u64,
) -> Result<(TransferOutcome, Tensor, Tensor)> {
    let d = reps.cols();
    let t = task.n_targets;
    let mut head = HeadTensors::init(d, t, seed);
    let mut best = (f64::INFINITY, 0usize, head.w.clone(), head.b.clone());
    let batch = batch_size_rule(task.train_idx.len());
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x73687566);

    let gather_reps = |idx: &[usize]| -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&reps.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![idx.len(), d], data).unwrap()
    };

    let head_loss = |w: &Tensor, b: &Tensor, idx: &[usize]| -> Result<f64> {
        let (labels, mask) = label_matrix(task, idx, norm);
        let mut tape = Tape::new(Precision::F32);
        let x = tape.constant(gather_reps(idx));
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let z = tape.matmul(x, wv)?;
        let z = tape.add_bias(z, bv)?;
        let loss = multitask_loss(&mut tape, z, &labels, &mask, task.kind)?;
        Ok(tape.value(loss).item())
    };

    // AdamW state for the two head tensors
    let mut m = [Tensor::zeros(vec![d, t]), Tensor::zeros(vec![1, t])];
    let mut v = [Tensor::zeros(vec![d, t]), Tensor::zeros(vec![1, t])];
    let mut step = 0u64;

    let mut since_best = 0usize;
    for epoch in 0..recipe.max_epochs {
        let lr = finetune_lr_at(epoch, recipe);
        let mut order = task.train_idx.clone();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            let (labels, mask) = label_matrix(task, chunk, norm);
            if mask.data().iter().sum::<f64>() == 0.0 {
                continue;
            }
            let mut tape = Tape::new(Precision::F32);
            let x = tape.constant(gather_reps(chunk));
            let wv = tape.param(head.w.clone());
            let bv = tape.param(head.b.clone());
            let z = tape.matmul(x, wv)?;
            let z = tape.add_bias(z, bv)?;
            let loss = multitask_loss(&mut tape, z, &labels, &mask, task.kind)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Training("non-finite head loss".into()));
            }
            let grads = tape.grad(loss, &[wv, bv])?;
            step += 1;
            let bc1 = 1.0 - recipe.beta1.powi(step as i32);
            let bc2 = 1.0 - recipe.beta2.powi(step as i32);
            for (k, (p, decay)) in [(&mut head.w, recipe.weight_decay), (&mut head.b, 0.0)]
                .into_iter()
                .enumerate()
            {
                let g = tape.value(grads[k]).clone();
                let md = m[k].data_mut();
                let vd = v[k].data_mut();
                let pd = p.data_mut();
                for j in 0..pd.len() {
                    md[j] = recipe.beta1 * md[j] + (1.0 - recipe.beta1) * g.data()[j];
                    vd[j] = recipe.beta2 * vd[j] + (1.0 - recipe.beta2) * g.data()[j].powi(2);
                    pd[j] -= lr * ((md[j] / bc1) / ((vd[j] / bc2).sqrt() + 1e-8) + decay * pd[j]);
                }
                p.round_to_f32();
            }
        }
        let val = head_loss(&head.w, &head.b, &task.valid_idx)?;
        if val < best.0 {
            best = (val, epoch + 1, head.w.clone(), head.b.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= recipe.patience {
                break;
            }
        }
    }

    let (best_val, best_epoch, bw, bb) = best;
    let x = gather_reps(&task.test_idx);
    let preds = x.matmul(&bw)?;
    let mut preds = preds;
    for r in 0..preds.rows() {
        for c in 0..t {
            preds.data_mut()[r * t + c] += bb.data()[c];
        }
    }
    let (metric_value, per_target) = task_metric(task, &task.test_idx, &preds, norm)?;
    Ok((
        TransferOutcome {
            metric_value,
            per_target,
            best_epoch,
            best_valid_loss: best_val,
        },
        bw,
        bb,
    ))
}

/// Freeze the encoder, compute mean-pooled representations once, and train
/// only the linear head. The encoder is bit-identical before and after.
pub fn linear_probe(
    params: &EncoderParameters,
    task: &DownstreamTask,
    vocab: &Vocabulary,
    recipe: &FinetuneRecipe,
    seed: u64,
) -> Result<TransferOutcome> {
    task.validate()?;
    let norm = match task.kind {
        TaskKind::Regression => TargetNormalizer::fit(task)?,
        TaskKind::Classification => TargetNormalizer::identity(task.n_targets),
    };
    let inputs = encode_inputs(task, vocab, params.config().max_len)?;
    let reps = frozen_representations(params, &inputs, vocab)?;
    let (outcome, _, _) = train_linear_head(&reps, task, &norm, recipe, seed)?;
    Ok(outcome)
}

/// Joint encoder+head training on the <bos> representation with the
/// downstream recipe; returns the test metric of the best-validation state.
pub fn finetune(
    params: &EncoderParameters,
    task: &DownstreamTask,
    vocab: &Vocabulary,
    recipe: &FinetuneRecipe,
    seed: u64,
) -> Result<(TransferOutcome, EncoderParameters)> {
    task.validate()?;
    let norm = match task.kind {
        TaskKind::Regression => TargetNormalizer::fit(task)?,
        TaskKind::Classification => TargetNormalizer::identity(task.n_targets),
    };
    let config = params.config().clone();
    let inputs = encode_inputs(task, vocab, config.max_len)?;
    let d = config.d_model;
    let t = task.n_targets;

    let mut enc = params.clone();
    let mut head = HeadTensors::init(d, t, seed);
    let all_names: Vec<String> = enc.names().map(str::to_string).collect();
    let mut opt = AdamW::new(&enc, recipe.beta1, recipe.beta2);
    let mut head_m = [Tensor::zeros(vec![d, t]), Tensor::zeros(vec![1, t])];
    let mut head_v = [Tensor::zeros(vec![d, t]), Tensor::zeros(vec![1, t])];
    let mut head_step = 0u64;

    let batch = batch_size_rule(task.train_idx.len());
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x73687566);
    let mut drop_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x64726f70);

    let forward_batch = |enc: &EncoderParameters,
                         head: &HeadTensors,
                         idx: &[usize],
                         tape: &mut Tape,
                         mode: &mut Mode,
                         trainable: bool|
     -> Result<(VarId, VarId, VarId, Vec<VarId>)> {
        let bound = if trainable {
            BoundParams::bind(tape, enc)
        } else {
            BoundParams::bind_partial(tape, enc, |_| false)
        };
        let enc_vars = bound.ordered_vars(&all_names);
        let mut rows = Vec::with_capacity(idx.len());
        for &i in idx {
            let hidden = forward_hidden(tape, &bound, &config, &inputs[i], mode)?;
            rows.push(pool_bos(tape, hidden, &inputs[i], vocab.bos_id())?);
        }
        let reps = stack_rows(tape, &rows);
        let wv = if trainable {
            tape.param(head.w.clone())
        } else {
            tape.constant(head.w.clone())
        };
        let bv = if trainable {
            tape.param(head.b.clone())
        } else {
            tape.constant(head.b.clone())
        };
        let z = tape.matmul(reps, wv)?;
        let z = tape.add_bias(z, bv)?;
        Ok((z, wv, bv, enc_vars))
    };

    let eval_loss = |enc: &EncoderParameters, head: &HeadTensors, idx: &[usize]| -> Result<f64> {
        let (labels, mask) = label_matrix(task, idx, &norm);
        let mut tape = Tape::new(Precision::F32);
        let (z, _, _, _) = forward_batch(enc, head, idx, &mut tape, &mut Mode::Eval, false)?;
        let loss = multitask_loss(&mut tape, z, &labels, &mask, task.kind)?;
        Ok(tape.value(loss).item())
    };

    let mut best = (
        f64::INFINITY,
        0usize,
        enc.clone(),
        head.w.clone(),
        head.b.clone(),
    );
    let mut since_best = 0usize;
    for epoch in 0..recipe.max_epochs {
        let lr = finetune_lr_at(epoch, recipe);
        let mut order = task.train_idx.clone();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            let (labels, mask) = label_matrix(task, chunk, &norm);
            if mask.data().iter().sum::<f64>() == 0.0 {
                continue;
            }
            let mut tape = Tape::new(Precision::F32);
            let mut mode = Mode::Train {
                rng: &mut drop_rng,
                rate: config.dropout_rate,
            };
            let (z, wv, bv, enc_vars) =
                forward_batch(&enc, &head, chunk, &mut tape, &mut mode, true)?;
            let loss = multitask_loss(&mut tape, z, &labels, &mask, task.kind)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Training("non-finite fine-tuning loss".into()));
            }
            let mut wrt = enc_vars;
            wrt.push(wv);
            wrt.push(bv);
            let grads = tape.grad(loss, &wrt)?;
            let enc_grads: Vec<Tensor> = grads[..all_names.len()]
                .iter()
                .map(|&g| tape.value(g).clone())
                .collect();
            opt.update(&mut enc, &enc_grads, lr, recipe.weight_decay);
            head_step += 1;
            let bc1 = 1.0 - recipe.beta1.powi(head_step as i32);
            let bc2 = 1.0 - recipe.beta2.powi(head_step as i32);
            for (k, (p, decay)) in [(&mut head.w, recipe.weight_decay), (&mut head.b, 0.0)]
                .into_iter()
                .enumerate()
            {
                let g = tape.value(grads[all_names.len() + k]).clone();
                let md = head_m[k].data_mut();
                let vd = head_v[k].data_mut();
                let pd = p.data_mut();
                for j in 0..pd.len() {
                    md[j] = recipe.beta1 * md[j] + (1.0 - recipe.beta1) * g.data()[j];
                    vd[j] = recipe.beta2 * vd[j] + (1.0 - recipe.beta2) * g.data()[j].powi(2);
                    pd[j] -= lr * ((md[j] / bc1) / ((vd[j] / bc2).sqrt() + 1e-8) + decay * pd[j]);
                }
                p.round_to_f32();
            }
        }
        let val = eval_loss(&enc, &head, &task.valid_idx)?;
        if val < best.0 {
            best = (val, epoch + 1, enc.clone(), head.w.clone(), head.b.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= recipe.patience {
                break;
            }
        }
    }

    let (best_val, best_epoch, best_enc, bw, bb) = best;
    let best_head = HeadTensors { w: bw, b: bb };
    let mut tape = Tape::new(Precision::F32);
    let (z, _, _, _) = forward_batch(
        &best_enc,
        &best_head,
        &task.test_idx,
        &mut tape,
        &mut Mode::Eval,
        false,
    )?;
    let preds = tape.value(z).clone();
    let (metric_value, per_target) = task_metric(task, &task.test_idx, &preds, &norm)?;
    Ok((
        TransferOutcome {
            metric_value,
            per_target,
            best_epoch,
            best_valid_loss: best_val,
        },
        best_enc,
    ))
}
