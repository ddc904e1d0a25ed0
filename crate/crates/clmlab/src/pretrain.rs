//! MLM pretraining: masking policy, AdamW with linear warmup then constant
//! learning rate, periodic checkpointing, and validation-loss evaluation.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Precision, Tape, Tensor, VarId};
use crate::encoder::{forward_mlm_batch, BoundParams, EncoderParameters, Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub select_rate: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            select_rate: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.select_rate) || self.select_rate == 0.0 {
            return Err(Error::Config("select_rate must be in (0,1)".into()));
        }
        let sum = self.mask_frac + self.random_frac + self.keep_frac;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mask/random/keep fractions sum to {sum}, not 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size_seqs: usize,
    pub epochs: u32,
    pub checkpoint_interval_epochs: f64,
    pub include_step0: bool,
}

impl Default for TrainSchedule {
    /// Desk-scale defaults; the published full-scale values (warmup 5000,
    /// batch 4096 sequences) remain expressible.
    fn default() -> Self {
        TrainSchedule {
            warmup_steps: 100,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            dropout: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            batch_size_seqs: 16,
            epochs: 4,
            checkpoint_interval_epochs: 0.25,
            include_step0: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.checkpoint_interval_epochs <= 0.0
            || self.checkpoint_interval_epochs > self.epochs as f64
        {
            return Err(Error::Config(
                "checkpoint interval must be in (0, epochs]".into(),
            ));
        }
        if self.batch_size_seqs == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Linear ramp to peak_lr over warmup_steps, constant thereafter.
pub fn lr_at(step: u64, schedule: &TrainSchedule) -> f64 {
    if schedule.warmup_steps > 0 && step < schedule.warmup_steps {
        schedule.peak_lr * step as f64 / schedule.warmup_steps as f64
    } else {
        schedule.peak_lr
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run_id: String,
    pub step: u64,
    pub epoch_fraction: f64,
    pub tokens_seen: u64,
    pub rng_digest: String,
    pub config_hash: String,
    /// Recorded in the run manifest, never in the checkpoint file, so reruns
    /// stay byte-identical.
    #[serde(skip)]
    pub wallclock: Option<String>,
}

/// One sequence with its MLM corruption applied.
#[derive(Debug, Clone)]
pub struct MaskedExample {
    /// Model-input ids after corruption (<bos>/<eos> attached).
    pub corrupted: Vec<u32>,
    /// Positions that were selected for prediction.
    pub selected: Vec<usize>,
    /// Original token ids at the selected positions.
    pub targets: Vec<u32>,
}

/// Select round(select_rate * content_length), floored at one, positions
/// uniformly without replacement among non-special positions; each becomes
/// <mask> (0.8), a random non-special vocabulary token (0.1), or stays (0.1).
pub fn apply_mlm_mask(
    ids: &[u32],
    vocab: &Vocabulary,
    policy: &MaskingPolicy,
    rng: &mut ChaCha20Rng,
) -> Result<MaskedExample> {
    let maskable: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| !vocab.is_special(id))
        .map(|(i, _)| i)
        .collect();
    if maskable.is_empty() {
        return Err(Error::Training("no maskable positions".into()));
    }
    let n_sel = ((policy.select_rate * maskable.len() as f64).round() as usize).max(1);
    // partial Fisher-Yates for a uniform sample without replacement
    let mut pool = maskable;
    let mut selected = Vec::with_capacity(n_sel);
    for k in 0..n_sel {
        let j = k + rng.gen_range(0..pool.len() - k);
        pool.swap(k, j);
        selected.push(pool[k]);
    }
    selected.sort_unstable();

    let n_content = vocab.len() as u32 - 5;
    let mut corrupted = ids.to_vec();
    let mut targets = Vec::with_capacity(n_sel);
    for &pos in &selected {
        targets.push(ids[pos]);
        let r: f64 = rng.gen();
        if r < policy.mask_frac {
            corrupted[pos] = vocab.mask_id();
        } else if r < policy.mask_frac + policy.random_frac {
            corrupted[pos] = 5 + rng.gen_range(0..n_content);
        } // else keep
    }
    Ok(MaskedExample {
        corrupted,
        selected,
        targets,
    })
}

/// Mean cross-entropy over the selected positions of a batch, given
/// per-sequence logit vars of shape (len_i, vocab).
pub fn mlm_loss_from_logits(
    tape: &mut Tape,
    logits: &[VarId],
    examples: &[MaskedExample],
) -> Result<VarId> {
    let total: usize = examples.iter().map(|e| e.selected.len()).sum();
    if total == 0 {
        return Err(Error::Training("empty selection".into()));
    }
    let mut acc: Option<VarId> = None;
    for (lv, ex) in logits.iter().zip(examples) {
        if ex.selected.is_empty() {
            continue;
        }
        let rows = tape.gather_rows(*lv, Rc::new(ex.selected.clone()));
        let lsm = tape.log_softmax_rows(rows)?;
        let idx: Vec<(usize, usize)> = ex
            .targets
            .iter()
            .enumerate()
            .map(|(i, &t)| (i, t as usize))
            .collect();
        let picked = tape.gather_elems(lsm, Rc::new(idx));
        let s = tape.sum_all(picked);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let acc = acc.expect("total > 0 implies at least one example");
    let neg = tape.neg(acc);
    Ok(tape.scale(neg, 1.0 / total as f64))
}

/// Forward the corrupted batch and compute the masked cross-entropy.
pub fn mlm_example_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    examples: &[MaskedExample],
    mode: &mut Mode,
) -> Result<VarId> {
    let batch: Vec<Vec<u32>> = examples.iter().map(|e| e.corrupted.clone()).collect();
    let logits = forward_mlm_batch(tape, bound, config, &batch, mode)?;
    mlm_loss_from_logits(tape, &logits, examples)
}

/// Decoupled AdamW. Weight decay applies only to weight matrices (names
/// ending in a `.w*` component); biases, layer norms, and embedding tables
/// are excluded.
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    last.starts_with('w') && !name.starts_with("tok_emb") && !name.starts_with("pos_emb")
}

impl AdamW {
    pub fn new(params: &EncoderParameters, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    /// Gradients are given in parameter order; missing-path params carry
    /// zeros. Updated parameters are rounded to f32 (the storage dtype).
    pub fn update(
        &mut self,
        params: &mut EncoderParameters,
        grads: &[Tensor],
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (name, p)) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let decay = if decays(name) { weight_decay } else { 0.0 };
            let pd = p.data_mut();
            for j in 0..pd.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                pd[j] -= lr * (mh / (vh.sqrt() + self.eps) + decay * pd[j]);
            }
            p.round_to_f32();
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossRow {
    pub step: u64,
    pub epoch_fraction: f64,
    pub train_loss: f64,
    pub lr: f64,
}

pub struct TrainOutput {
    pub final_params: EncoderParameters,
    pub loss_log: Vec<LossRow>,
    pub checkpoints_emitted: usize,
}

fn rng_digest(seed: u64, step: u64) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(step.to_le_bytes());
    format!("{:x}", h.finalize())
}

/// MLM pretraining over `train_data` (model-input id sequences). Emits a
/// checkpoint through `sink` at every `checkpoint_interval_epochs` boundary,
/// plus an optional step-0 snapshot. Bit-identical under identical inputs.
#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &ModelConfig,
    schedule: &TrainSchedule,
    policy: &MaskingPolicy,
    train_data: &[Vec<u32>],
    vocab: &Vocabulary,
    seed: u64,
    run_id: &str,
    sink: &mut dyn FnMut(&EncoderParameters, &CheckpointMeta) -> Result<()>,
) -> Result<TrainOutput> {
    schedule.validate()?;
    policy.validate()?;
    let batch = schedule.batch_size_seqs;
    if train_data.len() < batch {
        return Err(Error::Training(format!(
            "corpus of {} sequences is smaller than one batch of {batch}",
            train_data.len()
        )));
    }
    let steps_per_epoch = (train_data.len() / batch) as u64;
    if (steps_per_epoch as f64 * schedule.checkpoint_interval_epochs) < 1.0 {
        return Err(Error::Training(
            "checkpoint interval shorter than one optimizer step".into(),
        ));
    }
    let config_hash = config.hash();

    let mut params = crate::encoder::init_model(config, seed)?;
    let mut opt = AdamW::new(&params, schedule.beta1, schedule.beta2);
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x73687566); // "shuf"
    let mut mask_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6d61736b); // "mask"
    let mut drop_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x64726f70); // "drop"

    let all_names: Vec<String> = params.names().map(str::to_string).collect();
    let mut loss_log = Vec::new();
    let mut tokens_seen: u64 = 0;
    let mut emitted = 0usize;
    let mut next_boundary = schedule.checkpoint_interval_epochs;

    let mut emit = |params: &EncoderParameters,
                    step: u64,
                    tokens_seen: u64,
                    emitted: &mut usize|
     -> Result<()> {
        let meta = CheckpointMeta {
            run_id: run_id.to_string(),
            step,
            epoch_fraction: step as f64 / steps_per_epoch as f64,
            tokens_seen,
            rng_digest: rng_digest(seed, step),
            config_hash: config_hash.clone(),
            wallclock: None,
        };
        *emitted += 1;
        sink(params, &meta)
    };

    if schedule.include_step0 {
        emit(&params, 0, 0, &mut emitted)?;
    }

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut step: u64 = 0;
    for _epoch in 0..schedule.epochs {
        // seeded per-epoch shuffle
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks_exact(batch) {
            step += 1;
            let mut examples = Vec::with_capacity(batch);
            for &i in chunk {
                examples.push(apply_mlm_mask(&train_data[i], vocab, policy, &mut mask_rng)?);
                tokens_seen += (train_data[i].len() as u64).saturating_sub(2);
            }
            let mut tape = Tape::new(Precision::F32);
            let bound = BoundParams::bind(&mut tape, &params);
            let mut mode = Mode::Train {
                rng: &mut drop_rng,
                rate: schedule.dropout,
            };
            let loss = mlm_example_loss(&mut tape, &bound, config, &examples, &mut mode)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                let meta = CheckpointMeta {
                    run_id: format!("{run_id}-diagnostic"),
                    step,
                    epoch_fraction: step as f64 / steps_per_epoch as f64,
                    tokens_seen,
                    rng_digest: rng_digest(seed, step),
                    config_hash: config_hash.clone(),
                    wallclock: None,
                };
                sink(&params, &meta)?;
                return Err(Error::Training(format!(
                    "non-finite loss {loss_val} at step {step}; diagnostic checkpoint emitted"
                )));
            }
            let wrt = bound.ordered_vars(&all_names);
            let grad_vars = tape.grad(loss, &wrt)?;
            let grads: Vec<Tensor> =
                grad_vars.iter().map(|&g| tape.value(g).clone()).collect();
            let lr = lr_at(step, schedule);
            opt.update(&mut params, &grads, lr, schedule.weight_decay);
            loss_log.push(LossRow {
                step,
                epoch_fraction: step as f64 / steps_per_epoch as f64,
                train_loss: loss_val,
                lr,
            });

            let frac = step as f64 / steps_per_epoch as f64;
            while frac + 1e-12 >= next_boundary && emitted < expected_total(schedule) {
                emit(&params, step, tokens_seen, &mut emitted)?;
                next_boundary += schedule.checkpoint_interval_epochs;
            }
        }
    }
    Ok(TrainOutput {
        final_params: params,
        loss_log,
        checkpoints_emitted: emitted,
    })
}

fn expected_total(schedule: &TrainSchedule) -> usize {
    let intervals =
        (schedule.epochs as f64 / schedule.checkpoint_interval_epochs).round() as usize;
    intervals + usize::from(schedule.include_step0)
}

/// Validation MLM loss with a fixed evaluation masking seed and dropout off.
pub fn eval_pretrain_loss(
    params: &EncoderParameters,
    valid_data: &[Vec<u32>],
    vocab: &Vocabulary,
    policy: &MaskingPolicy,
    eval_seed: u64,
    batch: usize,
) -> Result<f64> {
    if valid_data.is_empty() {
        return Err(Error::Training("empty validation set".into()));
    }
    let mut mask_rng = ChaCha20Rng::seed_from_u64(eval_seed);
    let config = params.config().clone();
    let mut total_nll = 0.0;
    let mut total_sel = 0usize;
    for chunk in valid_data.chunks(batch.max(1)) {
        let mut examples = Vec::with_capacity(chunk.len());
        for ids in chunk {
            examples.push(apply_mlm_mask(ids, vocab, policy, &mut mask_rng)?);
        }
        let sel: usize = examples.iter().map(|e| e.selected.len()).sum();
        let mut tape = Tape::new(Precision::F32);
        let bound = BoundParams::bind(&mut tape, params);
        let loss = mlm_example_loss(&mut tape, &bound, &config, &examples, &mut Mode::Eval)?;
        total_nll += tape.value(loss).item() * sel as f64;
        total_sel += sel;
    }
    Ok(total_nll / total_sel as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_model;

    fn small_vocab() -> Vocabulary {
        Vocabulary::build_from_lines(["CCONS(=O)c1ccccc1Cl"]).unwrap()
    }

    fn with_specials(v: &Vocabulary, content: &[u32]) -> Vec<u32> {
        let mut ids = vec![v.bos_id()];
        ids.extend_from_slice(content);
        ids.push(v.eos_id());
        ids
    }

    #[test]
    fn lr_schedule_points() {
        let mut s = TrainSchedule::default();
        s.warmup_steps = 5000;
        s.peak_lr = 1e-3;
        assert_eq!(lr_at(2500, &s), 5e-4);
        assert_eq!(lr_at(5000, &s), 1e-3);
        assert_eq!(lr_at(1_000_000, &s), 1e-3);
    }

    #[test]
    fn mask_selects_fifteen_of_hundred() {
        let v = small_vocab();
        let ids = with_specials(&v, &vec![5u32; 100]);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let ex = apply_mlm_mask(&ids, &v, &MaskingPolicy::default(), &mut rng).unwrap();
        assert_eq!(ex.selected.len(), 15);
    }

    #[test]
    fn mask_minimum_one_selection() {
        let v = small_vocab();
        let ids = with_specials(&v, &[5]);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let ex = apply_mlm_mask(&ids, &v, &MaskingPolicy::default(), &mut rng).unwrap();
        assert_eq!(ex.selected, vec![1]);
    }

    #[test]
    fn mask_rejects_all_special_sequence() {
        let v = small_vocab();
        let ids = vec![v.bos_id(), v.eos_id()];
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(apply_mlm_mask(&ids, &v, &MaskingPolicy::default(), &mut rng).is_err());
    }

    #[test]
    fn mask_fractions_empirical() {
        // 2000 seeded trials on 20-token sequences; 80/10/10 within a few %.
        let v = small_vocab();
        let ids = with_specials(&v, &vec![5u32; 20]);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (mut masked, mut random, mut kept, mut total) = (0u64, 0u64, 0u64, 0u64);
        for _ in 0..2000 {
            let ex = apply_mlm_mask(&ids, &v, &MaskingPolicy::default(), &mut rng).unwrap();
            for (&pos, &orig) in ex.selected.iter().zip(&ex.targets) {
                total += 1;
                let now = ex.corrupted[pos];
                if now == v.mask_id() {
                    masked += 1;
                } else if now == orig {
                    kept += 1;
                } else {
                    random += 1;
                }
            }
        }
        let f = |n: u64| n as f64 / total as f64;
        assert!((f(masked) - 0.8).abs() < 0.03, "mask {}", f(masked));
        // random replacement can coincide with the original token, so the
        // observed random fraction runs slightly under 0.10
        assert!((f(random) - 0.1).abs() < 0.03, "random {}", f(random));
        assert!((f(kept) - 0.1).abs() < 0.03, "keep {}", f(kept));
    }

    #[test]
    fn mlm_loss_uniform_is_ln_vocab() {
        let mut tape = Tape::new(Precision::F64);
        let logits = tape.constant(Tensor::zeros(vec![3, 7]));
        let ex = MaskedExample {
            corrupted: vec![4, 4, 5],
            selected: vec![0, 1],
            targets: vec![5, 6],
        };
        let loss = mlm_loss_from_logits(&mut tape, &[logits], &[ex]).unwrap();
        assert!((tape.value(loss).item() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_perfect_logits_is_zero() {
        let mut tape = Tape::new(Precision::F64);
        let mut t = Tensor::zeros(vec![2, 5]);
        t.data_mut()[0 * 5 + 3] = 60.0;
        t.data_mut()[1 * 5 + 2] = 60.0;
        let logits = tape.constant(t);
        let ex = MaskedExample {
            corrupted: vec![4, 4],
            selected: vec![0, 1],
            targets: vec![3, 2],
        };
        let loss = mlm_loss_from_logits(&mut tape, &[logits], &[ex]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-9);
    }

    #[test]
    fn mlm_loss_is_mean_over_selected() {
        let mut tape = Tape::new(Precision::F64);
        let mut t = Tensor::zeros(vec![2, 4]);
        // row 0: uniform -> ln 4; row 1: peaked on target -> ~0
        t.data_mut()[4 + 1] = 50.0;
        let logits = tape.constant(t);
        let ex = MaskedExample {
            corrupted: vec![4, 4],
            selected: vec![0, 1],
            targets: vec![0, 1],
        };
        let loss = mlm_loss_from_logits(&mut tape, &[logits], &[ex]).unwrap();
        let want = (4.0f64).ln() / 2.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-9);
    }

    #[test]
    fn mlm_loss_empty_selection_errors() {
        let mut tape = Tape::new(Precision::F64);
        let logits = tape.constant(Tensor::zeros(vec![2, 4]));
        let ex = MaskedExample {
            corrupted: vec![4, 4],
            selected: vec![],
            targets: vec![],
        };
        assert!(mlm_loss_from_logits(&mut tape, &[logits], &[ex]).is_err());
    }

    #[test]
    fn gradient_zero_at_non_selected_positions() {
        let mut tape = Tape::new(Precision::F64);
        let logits = tape.param(Tensor::ones(vec![3, 4]));
        let ex = MaskedExample {
            corrupted: vec![4, 5, 6],
            selected: vec![1],
            targets: vec![2],
        };
        let loss = mlm_loss_from_logits(&mut tape, &[logits], &[ex]).unwrap();
        let g = tape.grad(loss, &[logits]).unwrap();
        let gt = tape.value(g[0]);
        for j in 0..4 {
            assert_eq!(gt.data()[j], 0.0, "row 0 col {j}");
            assert_eq!(gt.data()[2 * 4 + j], 0.0, "row 2 col {j}");
        }
        assert!(gt.data()[4..8].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn weight_decay_shrinks_zero_gradient_weights() {
        let cfg = crate::encoder::ModelConfig {
            d_model: 8,
            n_head: 2,
            n_layer: 1,
            d_ff: 16,
            vocab_size: 9,
            max_len: 8,
            dropout_rate: 0.0,
        };
        let mut params = init_model(&cfg, 0).unwrap();
        let before = params.get("pooler.w").clone();
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let mut opt = AdamW::new(&params, 0.9, 0.98);
        let (lr, wd) = (0.1, 0.01);
        opt.update(&mut params, &zeros, lr, wd);
        let after = params.get("pooler.w");
        for (a, b) in before.data().iter().zip(after.data()) {
            let want = (a * (1.0 - lr * wd)) as f32 as f64;
            assert!((b - want).abs() < 1e-12, "{a} -> {b}, want {want}");
        }
        // layer norms and biases do not decay
        assert_eq!(params.get("layer0.attn_ln.g").data(), Tensor::ones(vec![1, 8]).data());
    }

    fn toy_training_inputs() -> (Vocabulary, Vec<Vec<u32>>) {
        let v = small_vocab();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let data: Vec<Vec<u32>> = (0..80)
            .map(|_| {
                let len = 6 + rng.gen_range(0..6);
                let content: Vec<u32> = (0..len).map(|_| 5 + rng.gen_range(0..(v.len() as u32 - 5))).collect();
                with_specials(&v, &content)
            })
            .collect();
        (v, data)
    }

    #[test]
    fn train_emits_seventeen_checkpoints_and_is_deterministic() {
        let (v, data) = toy_training_inputs();
        let cfg = crate::encoder::ModelConfig {
            d_model: 8,
            n_head: 1,
            n_layer: 1,
            d_ff: 16,
            vocab_size: v.len(),
            max_len: 16,
            dropout_rate: 0.1,
        };
        let mut sched = TrainSchedule::default();
        sched.batch_size_seqs = 8;
        sched.warmup_steps = 10;
        let run = || {
            let mut metas = Vec::new();
            let mut digests = Vec::new();
            let out = train(
                &cfg,
                &sched,
                &MaskingPolicy::default(),
                &data,
                &v,
                7,
                "run-a",
                &mut |p, m| {
                    metas.push(m.clone());
                    digests.push(p.digest());
                    Ok(())
                },
            )
            .unwrap();
            (metas, digests, out.final_params.digest())
        };
        let (metas, digests, final_digest) = run();
        assert_eq!(metas.len(), 17);
        assert_eq!(metas[0].step, 0);
        for w in metas.windows(2) {
            assert!(w[1].epoch_fraction > w[0].epoch_fraction);
            assert_eq!(w[0].config_hash, w[1].config_hash);
        }
        let (_, digests2, final2) = run();
        assert_eq!(digests, digests2);
        assert_eq!(final_digest, final2);
    }

    #[test]
    fn train_rejects_corpus_smaller_than_batch() {
        let (v, data) = toy_training_inputs();
        let cfg = crate::encoder::ModelConfig {
            d_model: 8,
            n_head: 1,
            n_layer: 1,
            d_ff: 16,
            vocab_size: v.len(),
            max_len: 16,
            dropout_rate: 0.1,
        };
        let mut sched = TrainSchedule::default();
        sched.batch_size_seqs = data.len() + 1;
        let r = train(
            &cfg,
            &sched,
            &MaskingPolicy::default(),
            &data,
            &v,
            7,
            "r",
            &mut |_, _| Ok(()),
        );
        assert!(r.is_err());
    }

    #[test]
    fn eval_loss_near_ln_vocab_at_init_and_deterministic() {
        let (v, data) = toy_training_inputs();
        let cfg = crate::encoder::ModelConfig {
            d_model: 8,
            n_head: 1,
            n_layer: 1,
            d_ff: 16,
            vocab_size: v.len(),
            max_len: 16,
            dropout_rate: 0.1,
        };
        let params = init_model(&cfg, 0).unwrap();
        let policy = MaskingPolicy::default();
        let l1 = eval_pretrain_loss(&params, &data, &v, &policy, 123, 16).unwrap();
        let l2 = eval_pretrain_loss(&params, &data, &v, &policy, 123, 16).unwrap();
        assert_eq!(l1, l2);
        let lnv = (v.len() as f64).ln();
        assert!((l1 - lnv).abs() < 0.3, "L_pre {l1} vs ln V {lnv}");
        assert!(eval_pretrain_loss(&params, &[], &v, &policy, 1, 16).is_err());
    }
}
