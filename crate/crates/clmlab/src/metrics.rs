//! Transferability metrics measured on pretraining checkpoints: Hutchinson
//! curvature traces, principal gradients and the principal gradient mismatch
//! (PGM) distance, and zero-shot masked-language-model loss on downstream
//! molecules.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Precision, Tape, Tensor, VarId};
use crate::encoder::{forward_hidden, pool_bos, BoundParams, EncoderParameters, Mode};
use crate::error::{Error, Result};
use crate::pretrain::{apply_mlm_mask, mlm_example_loss, MaskingPolicy};
use crate::tokenizer::Vocabulary;
use crate::transfer::{batch_size_rule, multitask_loss, DownstreamTask, TargetNormalizer, TaskKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HutchinsonConfig {
    /// Sequences drawn from the head of the evaluation stream.
    pub n_sequences: usize,
    /// Sequences per minibatch; one probe vector per minibatch.
    pub minibatch: usize,
}

impl Default for HutchinsonConfig {
    fn default() -> Self {
        // Desk-scale defaults; the reference estimate uses 50,000 sequences.
        HutchinsonConfig {
            n_sequences: 2048,
            minibatch: 128,
        }
    }
}

fn gaussian_probe(shapes: &[Vec<usize>], rng: &mut ChaCha20Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            Tensor::new(s.clone(), data).unwrap()
        })
        .collect()
}

/// Hutchinson estimator over an arbitrary scalar loss builder:
/// Tr(H) ~= (1/M) sum_m v_m' H v_m with v_m ~ N(0, I). The builder receives
/// a fresh tape and the parameter leaves in `param_values` order and must
/// return a scalar loss on that tape.
pub fn hutchinson_trace_fn<F>(
    build_loss: F,
    param_values: &[Tensor],
    n_probes: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    if n_probes == 0 {
        return Err(Error::Metric("hutchinson needs at least one probe".into()));
    }
    let shapes: Vec<Vec<usize>> = param_values.iter().map(|t| t.shape().to_vec()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for probe_idx in 0..n_probes {
        let v = gaussian_probe(&shapes, &mut rng);
        let mut tape = Tape::new(Precision::F64);
        let vars: Vec<VarId> = param_values
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        let loss = build_loss(&mut tape, &vars)?;
        let hv = tape.hvp_from(loss, &vars, &v)?;
        let mut quad = 0.0;
        for (h, vi) in hv.iter().zip(&v) {
            quad += tape.value(*h).dot(vi);
        }
        if !quad.is_finite() {
            return Err(Error::Metric(format!(
                "non-finite curvature on probe {probe_idx}"
            )));
        }
        acc += quad;
    }
    Ok(acc / n_probes as f64)
}

#[derive(Debug, Clone)]
pub struct TraceEstimate {
    pub trace: f64,
    pub n_probes: usize,
    pub per_probe: Vec<f64>,
}

/// Tr(H) of the masked-LM loss with respect to the encoder parameters
/// (Transformer blocks plus MLM head transform; embeddings excluded).
/// One N(0, I) probe per minibatch; the estimate averages v'Hv over
/// minibatches. Seeds are derived from `seed` so different checkpoints can
/// index disjoint streams.
pub fn model_hessian_trace(
    params: &EncoderParameters,
    sequences: &[Vec<u32>],
    vocab: &Vocabulary,
    policy: &MaskingPolicy,
    hutch: &HutchinsonConfig,
    seed: u64,
) -> Result<TraceEstimate> {
    if sequences.is_empty() {
        return Err(Error::Metric("hessian trace needs sequences".into()));
    }
    let take = hutch.n_sequences.min(sequences.len());
    let config = params.config().clone();
    let enc_names = params.encoder_names();
    let shapes: Vec<Vec<usize>> = enc_names
        .iter()
        .map(|n| params.get(n).shape().to_vec())
        .collect();
    let mut mask_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6d61736b);
    let mut probe_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x70726f62); // "prob"
    let mut per_probe = Vec::new();
    for chunk in sequences[..take].chunks(hutch.minibatch) {
        let examples: Vec<_> = chunk
            .iter()
            .map(|ids| apply_mlm_mask(ids, vocab, policy, &mut mask_rng))
            .collect::<Result<_>>()?;
        let v = gaussian_probe(&shapes, &mut probe_rng);
        let mut tape = Tape::new(Precision::F32);
        let bound = BoundParams::bind_partial(&mut tape, params, EncoderParameters::is_encoder_param);
        let enc_vars = bound.ordered_vars(&enc_names);
        let loss = mlm_example_loss(&mut tape, &bound, &config, &examples, &mut Mode::Eval)?;
        let hv = tape.hvp_from(loss, &enc_vars, &v)?;
        let mut quad = 0.0;
        for (h, vi) in hv.iter().zip(&v) {
            quad += tape.value(*h).dot(vi);
        }
        if !quad.is_finite() {
            return Err(Error::Metric(format!(
                "non-finite curvature on minibatch probe {}",
                per_probe.len()
            )));
        }
        per_probe.push(quad);
    }
    let trace = per_probe.iter().sum::<f64>() / per_probe.len() as f64;
    Ok(TraceEstimate {
        trace,
        n_probes: per_probe.len(),
        per_probe,
    })
}

// ---------------------------------------------------------------------------
// principal gradients

/// Mean over K minibatch gradients of the pretraining MLM loss, flattened
/// over the encoder parameters in canonical order.
pub fn pretrain_principal_gradient(
    params: &EncoderParameters,
    sequences: &[Vec<u32>],
    vocab: &Vocabulary,
    policy: &MaskingPolicy,
    k: usize,
    minibatch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if k == 0 || minibatch == 0 {
        return Err(Error::Metric("principal gradient needs k, minibatch > 0".into()));
    }
    if sequences.len() < k * minibatch {
        return Err(Error::Metric(format!(
            "principal gradient needs {} sequences, have {}",
            k * minibatch,
            sequences.len()
        )));
    }
    let config = params.config().clone();
    let enc_names = params.encoder_names();
    let mut mask_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6d61736b);
    let mut mean: Vec<f64> = Vec::new();
    for b in 0..k {
        let chunk = &sequences[b * minibatch..(b + 1) * minibatch];
        let examples: Vec<_> = chunk
            .iter()
            .map(|ids| apply_mlm_mask(ids, vocab, policy, &mut mask_rng))
            .collect::<Result<_>>()?;
        let mut tape = Tape::new(Precision::F32);
        let bound =
            BoundParams::bind_partial(&mut tape, params, EncoderParameters::is_encoder_param);
        let enc_vars = bound.ordered_vars(&enc_names);
        let loss = mlm_example_loss(&mut tape, &bound, &config, &examples, &mut Mode::Eval)?;
        let grads = tape.grad(loss, &enc_vars)?;
        accumulate_flat(&mut mean, &tape, &grads, k)?;
    }
    Ok(mean)
}

/// Mean over K minibatch gradients of the downstream task loss, taken with
/// a fixed-seed random linear head on the <bos> representation. Gradients
/// are restricted to the encoder parameters; head components are discarded.
pub fn downstream_principal_gradient(
    params: &EncoderParameters,
    task: &DownstreamTask,
    vocab: &Vocabulary,
    k: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    task.validate()?;
    if k == 0 {
        return Err(Error::Metric("principal gradient needs k > 0".into()));
    }
    let config = params.config().clone();
    let enc_names = params.encoder_names();
    let norm = match task.kind {
        TaskKind::Regression => TargetNormalizer::fit(task)?,
        TaskKind::Classification => TargetNormalizer::identity(task.n_targets),
    };
    let d = config.d_model;
    let t = task.n_targets;
    let mut head_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x68656164); // "head"
    let head_w = Tensor::trunc_normal(vec![d, t], 0.02, &mut head_rng);
    let head_b = Tensor::zeros(vec![1, t]);

    let minibatch = batch_size_rule(task.train_idx.len()).min(task.train_idx.len());
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x73687566);
    let mut mean: Vec<f64> = Vec::new();
    for _ in 0..k {
        let idx: Vec<usize> = rand::seq::index::sample(
            &mut shuffle_rng,
            task.train_idx.len(),
            minibatch,
        )
        .iter()
        .map(|i| task.train_idx[i])
        .collect();
        let tn = task.n_targets;
        let mut labels = vec![0.0; idx.len() * tn];
        let mut mask = vec![0.0; idx.len() * tn];
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..tn {
                if let Some(y) = task.labels[i][c] {
                    labels[r * tn + c] = match task.kind {
                        TaskKind::Classification => y,
                        TaskKind::Regression => norm.normalize(c, y),
                    };
                    mask[r * tn + c] = 1.0;
                }
            }
        }
        let labels = Tensor::new(vec![idx.len(), tn], labels)?;
        let mask = Tensor::new(vec![idx.len(), tn], mask)?;

        let mut tape = Tape::new(Precision::F32);
        let bound =
            BoundParams::bind_partial(&mut tape, params, EncoderParameters::is_encoder_param);
        let enc_vars = bound.ordered_vars(&enc_names);
        let mut rows = Vec::with_capacity(idx.len());
        for &i in &idx {
            let ids = model_input_ids(&task.smiles[i], vocab, config.max_len)?;
            let hidden = forward_hidden(&mut tape, &bound, &config, &ids, &mut Mode::Eval)?;
            rows.push(pool_bos(&mut tape, hidden, &ids, vocab.bos_id())?);
        }
        let cols: Vec<VarId> = rows.iter().map(|&r| tape.transpose(r)).collect();
        let cat = tape.concat_cols(&cols);
        let reps = tape.transpose(cat);
        let wv = tape.constant(head_w.clone());
        let bv = tape.constant(head_b.clone());
        let z = tape.matmul(reps, wv)?;
        let z = tape.add_bias(z, bv)?;
        let loss = multitask_loss(&mut tape, z, &labels, &mask, task.kind)?;
        let grads = tape.grad(loss, &enc_vars)?;
        accumulate_flat(&mut mean, &tape, &grads, k)?;
    }
    Ok(mean)
}

fn accumulate_flat(mean: &mut Vec<f64>, tape: &Tape, grads: &[VarId], k: usize) -> Result<()> {
    let mut flat = Vec::new();
    for &g in grads {
        flat.extend_from_slice(tape.value(g).data());
    }
    if flat.iter().any(|x| !x.is_finite()) {
        return Err(Error::Metric("non-finite principal gradient".into()));
    }
    if mean.is_empty() {
        *mean = vec![0.0; flat.len()];
    }
    for (m, g) in mean.iter_mut().zip(&flat) {
        *m += g / k as f64;
    }
    Ok(())
}

fn model_input_ids(smiles: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>> {
    let seq = crate::tokenizer::tokenize(smiles, vocab)?;
    let mut ids = Vec::with_capacity(seq.ids.len() + 2);
    ids.push(vocab.bos_id());
    ids.extend(seq.ids.iter().take(max_len - 2));
    ids.push(vocab.eos_id());
    Ok(ids)
}

/// Principal gradient mismatch: ||g_t - g_s||_2 / (||g_s||_2 ||g_t||_2).
pub fn pgm_distance(g_source: &[f64], g_target: &[f64]) -> Result<f64> {
    if g_source.len() != g_target.len() {
        return Err(Error::Metric(format!(
            "gradient dimension mismatch: {} vs {}",
            g_source.len(),
            g_target.len()
        )));
    }
    let ns = g_source.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nt = g_target.iter().map(|x| x * x).sum::<f64>().sqrt();
    if ns == 0.0 || nt == 0.0 {
        return Err(Error::Metric("pgm undefined for a zero gradient".into()));
    }
    let diff = g_source
        .iter()
        .zip(g_target)
        .map(|(s, t)| (t - s) * (t - s))
        .sum::<f64>()
        .sqrt();
    Ok(diff / (ns * nt))
}

/// Masked-LM loss of the pretrained model evaluated on downstream-task
/// molecules under the pretraining vocabulary, without any adaptation.
pub fn zero_shot_downstream_loss(
    params: &EncoderParameters,
    task: &DownstreamTask,
    vocab: &Vocabulary,
    policy: &MaskingPolicy,
    eval_seed: u64,
    batch: usize,
) -> Result<f64> {
    let max_len = params.config().max_len;
    let data: Vec<Vec<u32>> = task
        .smiles
        .iter()
        .map(|s| model_input_ids(s, vocab, max_len))
        .collect::<Result<_>>()?;
    crate::pretrain::eval_pretrain_loss(params, &data, vocab, policy, eval_seed, batch)
}

// ---------------------------------------------------------------------------
// metric records

/// One measured value for one checkpoint. Optional fields are empty in CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub checkpoint_id: String,
    pub epoch_fraction: f64,
    pub l_pre: Option<f64>,
    pub task: String,
    pub l_down: Option<f64>,
    pub mode: String,
    pub seed: u64,
    pub metric_name: String,
    pub value: Option<f64>,
    pub tr_h: Option<f64>,
    pub pgm: Option<f64>,
}

pub fn write_metric_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record([
        "checkpoint_id",
        "epoch_fraction",
        "l_pre",
        "task",
        "l_down",
        "mode",
        "seed",
        "metric_name",
        "value",
        "tr_h",
        "pgm",
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    for r in records {
        w.write_record([
            r.checkpoint_id.clone(),
            format!("{}", r.epoch_fraction),
            fmt(r.l_pre),
            r.task.clone(),
            fmt(r.l_down),
            r.mode.clone(),
            format!("{}", r.seed),
            r.metric_name.clone(),
            fmt(r.value),
            fmt(r.tr_h),
            fmt(r.pgm),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let parse = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        }
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        out.push(MetricRecord {
            checkpoint_id: rec[0].to_string(),
            epoch_fraction: rec[1]
                .parse()
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
            l_pre: parse(&rec[2])?,
            task: rec[3].to_string(),
            l_down: parse(&rec[4])?,
            mode: rec[5].to_string(),
            seed: rec[6]
                .parse()
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
            metric_name: rec[7].to_string(),
            value: parse(&rec[8])?,
            tr_h: parse(&rec[9])?,
            pgm: parse(&rec[10])?,
        });
    }
    Ok(out)
}
