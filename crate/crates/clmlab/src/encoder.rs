//! Transformer encoder with MLM head: post-layer-norm residual blocks,
//! learned absolute positional embeddings, tied output projection with a
//! free bias, and the two pooling rules used for transfer.

use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_head: usize,
    pub n_layer: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_head == 0 || self.n_layer == 0 || self.d_ff == 0 {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_head != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Non-embedding parameter count. Follows the BERT-lineage reference
/// convention: encoder blocks, embedding layer norm, pooler, MLM head
/// transform + layer norm, and the free output bias count; token and
/// positional tables and the tied output projection do not. This convention
/// reproduces the published configuration table to its printed precision.
pub fn count_non_embedding_params(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let ff = config.d_ff;
    let per_layer = 4 * (d * d + d)      // Q,K,V,O projections with biases
        + 2 * d                          // attention layer norm
        + (d * ff + ff) + (ff * d + d)   // FFN
        + 2 * d; // FFN layer norm
    config.n_layer * per_layer
        + 2 * d                          // embedding layer norm
        + (d * d + d)                    // pooler
        + (d * d + d)                    // MLM head transform
        + 2 * d                          // MLM head layer norm
        + config.vocab_size // free output bias
}

/// Parameter count of the final encoder layer (attention + FFN + norms),
/// used by the parameter-space projection.
pub fn count_final_block_params(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let ff = config.d_ff;
    4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d) + 2 * d
}

/// Named parameter snapshot. Tensor order is a deterministic function of the
/// config, so flatten/unflatten is a bijection and checkpoint files are
/// byte-stable.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParameters {
    config: ModelConfig,
    tensors: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

fn tensor_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let ff = config.d_ff;
    let v = config.vocab_size;
    let mut specs = vec![
        ("tok_emb".into(), vec![v, d], Init::Normal),
        ("pos_emb".into(), vec![config.max_len, d], Init::Normal),
        ("emb_ln.g".into(), vec![1, d], Init::One),
        ("emb_ln.b".into(), vec![1, d], Init::Zero),
    ];
    for l in 0..config.n_layer {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("layer{l}.attn.{w}"), vec![d, d], Init::Normal));
            specs.push((
                format!("layer{l}.attn.{}", w.replace('w', "b")),
                vec![1, d],
                Init::Zero,
            ));
        }
        specs.push((format!("layer{l}.attn_ln.g"), vec![1, d], Init::One));
        specs.push((format!("layer{l}.attn_ln.b"), vec![1, d], Init::Zero));
        specs.push((format!("layer{l}.ffn.w1"), vec![d, ff], Init::Normal));
        specs.push((format!("layer{l}.ffn.b1"), vec![1, ff], Init::Zero));
        specs.push((format!("layer{l}.ffn.w2"), vec![ff, d], Init::Normal));
        specs.push((format!("layer{l}.ffn.b2"), vec![1, d], Init::Zero));
        specs.push((format!("layer{l}.ffn_ln.g"), vec![1, d], Init::One));
        specs.push((format!("layer{l}.ffn_ln.b"), vec![1, d], Init::Zero));
    }
    // Pooler is part of the reference recipe and the parameter count; the MLM
    // objective never reads it.
    specs.push(("pooler.w".into(), vec![d, d], Init::Normal));
    specs.push(("pooler.b".into(), vec![1, d], Init::Zero));
    specs.push(("head.w".into(), vec![d, d], Init::Normal));
    specs.push(("head.b".into(), vec![1, d], Init::Zero));
    specs.push(("head_ln.g".into(), vec![1, d], Init::One));
    specs.push(("head_ln.b".into(), vec![1, d], Init::Zero));
    specs.push(("head.out_bias".into(), vec![1, v], Init::Zero));
    specs
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zero,
    One,
}

/// Deterministic initialization: truncated normal (std 0.02) for weights,
/// zeros for biases and layer-norm shifts, ones for layer-norm scales.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<EncoderParameters> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for (name, shape, init) in tensor_specs(config) {
        let t = match init {
            Init::Normal => Tensor::trunc_normal(shape, 0.02, &mut rng),
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::ones(shape),
        };
        tensors.push((name, t));
    }
    EncoderParameters::from_tensors(config.clone(), tensors)
}

impl EncoderParameters {
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let specs = tensor_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), (got_name, got)) in specs.iter().zip(&tensors) {
            if name != got_name || shape != got.shape() {
                return Err(Error::Config(format!(
                    "tensor {got_name} {:?} does not match spec {name} {:?}",
                    got.shape(),
                    shape
                )));
            }
        }
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Ok(EncoderParameters {
            config,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.tensors[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Encoder parameters in the sense of the curvature/gradient metrics:
    /// Transformer blocks plus the MLM head transform and its norm, excluding
    /// embedding/positional tables, the embedding norm, the pooler, and the
    /// vocab-sized output bias.
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("layer")
            || matches!(name, "head.w" | "head.b" | "head_ln.g" | "head_ln.b")
    }

    pub fn encoder_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(n, _)| Self::is_encoder_param(n))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn final_block_names(&self) -> Vec<String> {
        let prefix = format!("layer{}.", self.config.n_layer - 1);
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn flatten_subset(&self, names: &[String]) -> Vec<f64> {
        let mut out = Vec::new();
        for n in names {
            out.extend_from_slice(self.get(n).data());
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<EncoderParameters> {
        let total: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        if flat.len() != total {
            return Err(Error::shape(format!(
                "flat vector has {} values, parameters need {}",
                flat.len(),
                total
            )));
        }
        let mut off = 0;
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for (n, t) in &self.tensors {
            let next = off + t.len();
            tensors.push((
                n.clone(),
                Tensor::new(t.shape().to_vec(), flat[off..next].to_vec())?,
            ));
            off = next;
        }
        EncoderParameters::from_tensors(self.config.clone(), tensors)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over the f32 little-endian encoding of every tensor in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in &self.tensors {
            for &v in t.data() {
                h.update((v as f32).to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Parameters bound onto a tape as differentiable leaves.
pub struct BoundParams {
    vars: HashMap<String, VarId>,
    order: Vec<String>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &EncoderParameters) -> Self {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for (name, t) in params.iter() {
            vars.insert(name.to_string(), tape.param(t.clone()));
            order.push(name.to_string());
        }
        BoundParams { vars, order }
    }

    /// Bind only `trainable` as differentiable leaves; the rest become
    /// constants (frozen-encoder probing).
    pub fn bind_partial(
        tape: &mut Tape,
        params: &EncoderParameters,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for (name, t) in params.iter() {
            let v = if trainable(name) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.to_string(), v);
            order.push(name.to_string());
        }
        BoundParams { vars, order }
    }

    pub fn var(&self, name: &str) -> VarId {
        self.vars[name]
    }

    pub fn ordered_vars(&self, names: &[String]) -> Vec<VarId> {
        names.iter().map(|n| self.vars[n]).collect()
    }

    pub fn all_names(&self) -> &[String] {
        &self.order
    }
}

/// Dropout control for a forward pass.
pub enum Mode<'r> {
    Eval,
    Train {
        rng: &'r mut ChaCha20Rng,
        rate: f64,
    },
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { rng, rate } => {
                if *rate == 0.0 {
                    return Ok(x);
                }
                use rand::Rng;
                let shape = tape.value(x).shape().to_vec();
                let keep = 1.0 - *rate;
                let n: usize = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let m = tape.constant(Tensor::new(shape, mask)?);
                tape.mul(x, m)
            }
        }
    }
}

/// Final-layer hidden states for one sequence of model-input token ids
/// (with <bos>/<eos> already attached). Returns a (len, d_model) var.
pub fn forward_hidden(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    ids: &[u32],
    mode: &mut Mode,
) -> Result<VarId> {
    let len = ids.len();
    if len == 0 {
        return Err(Error::shape("empty sequence".to_string()));
    }
    if len > config.max_len {
        return Err(Error::shape(format!(
            "sequence length {len} exceeds max_len {}",
            config.max_len
        )));
    }
    let d = config.d_model;
    let n_head = config.n_head;
    let dh = d / n_head;

    let tok_idx: Rc<Vec<usize>> = Rc::new(ids.iter().map(|&i| i as usize).collect());
    let pos_idx: Rc<Vec<usize>> = Rc::new((0..len).collect());
    let te = tape.gather_rows(bound.var("tok_emb"), tok_idx);
    let pe = tape.gather_rows(bound.var("pos_emb"), pos_idx);
    let summed = tape.add(te, pe)?;
    let g = bound.var("emb_ln.g");
    let b = bound.var("emb_ln.b");
    let normed = tape.layer_norm(summed, g, b, LN_EPS)?;
    let mut x = mode.dropout(tape, normed)?;

    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..config.n_layer {
        let p = |s: &str| format!("layer{l}.{s}");
        // attention
        let q = tape.matmul(x, bound.var(&p("attn.wq")))?;
        let q = tape.add_bias(q, bound.var(&p("attn.bq")))?;
        let k = tape.matmul(x, bound.var(&p("attn.wk")))?;
        let k = tape.add_bias(k, bound.var(&p("attn.bk")))?;
        let v = tape.matmul(x, bound.var(&p("attn.wv")))?;
        let v = tape.add_bias(v, bound.var(&p("attn.bv")))?;
        let mut heads = Vec::with_capacity(n_head);
        for h in 0..n_head {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores)?;
            let probs = mode.dropout(tape, probs)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let cat = tape.concat_cols(&heads);
        let attn = tape.matmul(cat, bound.var(&p("attn.wo")))?;
        let attn = tape.add_bias(attn, bound.var(&p("attn.bo")))?;
        let attn = mode.dropout(tape, attn)?;
        let res = tape.add(x, attn)?;
        let g = bound.var(&p("attn_ln.g"));
        let b = bound.var(&p("attn_ln.b"));
        x = tape.layer_norm(res, g, b, LN_EPS)?;
        // FFN
        let h1 = tape.matmul(x, bound.var(&p("ffn.w1")))?;
        let h1 = tape.add_bias(h1, bound.var(&p("ffn.b1")))?;
        let h1 = tape.gelu(h1)?;
        let h2 = tape.matmul(h1, bound.var(&p("ffn.w2")))?;
        let h2 = tape.add_bias(h2, bound.var(&p("ffn.b2")))?;
        let h2 = mode.dropout(tape, h2)?;
        let res = tape.add(x, h2)?;
        let g = bound.var(&p("ffn_ln.g"));
        let b = bound.var(&p("ffn_ln.b"));
        x = tape.layer_norm(res, g, b, LN_EPS)?;
    }
    Ok(x)
}

/// MLM logits for a (len, d_model) hidden state: dense transform, GELU,
/// layer norm, projection tied to the token embedding plus a free bias.
pub fn mlm_logits(tape: &mut Tape, bound: &BoundParams, hidden: VarId) -> Result<VarId> {
    let h = tape.matmul(hidden, bound.var("head.w"))?;
    let h = tape.add_bias(h, bound.var("head.b"))?;
    let h = tape.gelu(h)?;
    let g = bound.var("head_ln.g");
    let b = bound.var("head_ln.b");
    let h = tape.layer_norm(h, g, b, LN_EPS)?;
    let et = tape.transpose(bound.var("tok_emb"));
    let logits = tape.matmul(h, et)?;
    tape.add_bias(logits, bound.var("head.out_bias"))
}

/// Per-position MLM logits for a batch of model-input id sequences. Each
/// returned var has shape (len_i, vocab_size).
pub fn forward_mlm_batch(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    batch: &[Vec<u32>],
    mode: &mut Mode,
) -> Result<Vec<VarId>> {
    let mut out = Vec::with_capacity(batch.len());
    for ids in batch {
        let hidden = forward_hidden(tape, bound, config, ids, mode)?;
        out.push(mlm_logits(tape, bound, hidden)?);
    }
    Ok(out)
}

/// Final-layer hidden state at position 0; the sequence must start with <bos>.
pub fn pool_bos(tape: &mut Tape, hidden: VarId, ids: &[u32], bos_id: u32) -> Result<VarId> {
    if ids.first() != Some(&bos_id) {
        return Err(Error::shape(
            "pool_bos requires a sequence starting with <bos>".to_string(),
        ));
    }
    Ok(tape.gather_rows(hidden, Rc::new(vec![0])))
}

/// Mean over positions not flagged special; errors when every position is
/// special.
pub fn pool_mean(tape: &mut Tape, hidden: VarId, special: &[bool]) -> Result<VarId> {
    let keep: Vec<usize> = special
        .iter()
        .enumerate()
        .filter(|(_, &s)| !s)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::shape(
            "pool_mean requires at least one non-special position".to_string(),
        ));
    }
    let k = keep.len() as f64;
    let rows = tape.gather_rows(hidden, Rc::new(keep));
    let s = tape.col_sum(rows);
    Ok(tape.scale(s, 1.0 / k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;

    pub(crate) fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_head: 2,
            n_layer: 1,
            d_ff: 32,
            vocab_size: vocab,
            max_len: 32,
            dropout_rate: 0.1,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_config(11);
        let a = init_model(&cfg, 1).unwrap();
        let b = init_model(&cfg, 1).unwrap();
        let c = init_model(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let mut cfg = tiny_config(11);
        cfg.d_model = 64;
        cfg.n_head = 3;
        let err = init_model(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
    }

    #[test]
    fn table_row_counts() {
        // (d_model, n_head, n_layer, d_ff) -> published count in millions
        let rows = [
            (64, 1, 1, 256, 0.06),
            (128, 2, 4, 512, 0.83),
            (192, 3, 5, 768, 2.30),
            (256, 4, 6, 1024, 4.87),
            (512, 8, 8, 2048, 25.75),
            (768, 12, 12, 3072, 86.24),
            (1024, 16, 16, 4096, 203.65),
        ];
        for (d, h, l, ff, want_m) in rows {
            let cfg = ModelConfig {
                d_model: d,
                n_head: h,
                n_layer: l,
                d_ff: ff,
                vocab_size: 2362,
                max_len: 512,
                dropout_rate: 0.1,
            };
            let got = count_non_embedding_params(&cfg) as f64 / 1e6;
            let rel = (got - want_m).abs() / want_m;
            assert!(rel < 0.05, "({d},{h},{l},{ff}): got {got}M want {want_m}M");
        }
    }

    #[test]
    fn flatten_unflatten_bijection() {
        let cfg = tiny_config(11);
        let p = init_model(&cfg, 3).unwrap();
        let flat = p.flatten();
        let q = p.unflatten(&flat).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn logits_shape_contract() {
        let cfg = tiny_config(7);
        let p = init_model(&cfg, 0).unwrap();
        let mut tape = Tape::new(Precision::F32);
        let bound = BoundParams::bind(&mut tape, &p);
        let ids = vec![2u32, 5, 6, 3];
        let logits =
            forward_mlm_batch(&mut tape, &bound, &cfg, &[ids], &mut Mode::Eval).unwrap();
        assert_eq!(tape.value(logits[0]).shape(), &[4, 7]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config(9);
        let p = init_model(&cfg, 0).unwrap();
        let run = || {
            let mut tape = Tape::new(Precision::F32);
            let bound = BoundParams::bind(&mut tape, &p);
            let logits =
                forward_mlm_batch(&mut tape, &bound, &cfg, &[vec![2, 5, 6, 7, 3]], &mut Mode::Eval)
                    .unwrap();
            tape.value(logits[0]).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sequence_too_long_errors() {
        let cfg = tiny_config(9);
        let p = init_model(&cfg, 0).unwrap();
        let mut tape = Tape::new(Precision::F32);
        let bound = BoundParams::bind(&mut tape, &p);
        let ids = vec![5u32; cfg.max_len + 1];
        assert!(forward_hidden(&mut tape, &bound, &cfg, &ids, &mut Mode::Eval).is_err());
    }

    #[test]
    fn pool_bos_picks_row_zero() {
        let mut tape = Tape::new(Precision::F64);
        let h = tape.constant(
            Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let v = pool_bos(&mut tape, h, &[2, 5, 3], 2).unwrap();
        assert_eq!(tape.value(v).data(), &[1.0, 2.0]);
        assert!(pool_bos(&mut tape, h, &[5, 5, 3], 2).is_err());
    }

    #[test]
    fn pool_mean_excludes_specials() {
        let mut tape = Tape::new(Precision::F64);
        let h = tape.constant(
            Tensor::new(
                vec![4, 2],
                vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0, 9.0, 9.0],
            )
            .unwrap(),
        );
        let v = pool_mean(&mut tape, h, &[true, false, false, true]).unwrap();
        assert_eq!(tape.value(v).data(), &[2.0, 3.0]);
        assert!(pool_mean(&mut tape, h, &[true, true, true, true]).is_err());
    }

    #[test]
    fn pool_mean_permutation_equivariant_on_stub_hidden() {
        // With identity hidden states the mean over content rows is
        // order-independent.
        let rows = [
            vec![1.0, 2.0],
            vec![4.0, 0.0],
            vec![-1.0, 3.0],
        ];
        let perm = [2usize, 0, 1];
        let mut tape = Tape::new(Precision::F64);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let a = tape.constant(Tensor::new(vec![3, 2], flat).unwrap());
        let flat_p: Vec<f64> = perm.iter().flat_map(|&i| rows[i].clone()).collect();
        let b = tape.constant(Tensor::new(vec![3, 2], flat_p).unwrap());
        let ma = pool_mean(&mut tape, a, &[false, false, false]).unwrap();
        let mb = pool_mean(&mut tape, b, &[false, false, false]).unwrap();
        let (va, vb) = (tape.value(ma).clone(), tape.value(mb).clone());
        for (x, y) in va.data().iter().zip(vb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_invariance_in_eval_mode() {
        // Trailing <pad> tokens are excluded from compute, so logits at
        // content positions are identical.
        let cfg = tiny_config(9);
        let p = init_model(&cfg, 0).unwrap();
        let base = vec![2u32, 5, 6, 3];

        let run = |ids: &[u32]| {
            let content: Vec<u32> = ids.iter().copied().filter(|&i| i != 0).collect();
            let mut tape = Tape::new(Precision::F32);
            let bound = BoundParams::bind(&mut tape, &p);
            let logits =
                forward_mlm_batch(&mut tape, &bound, &cfg, &[content], &mut Mode::Eval).unwrap();
            tape.value(logits[0]).clone()
        };
        let a = run(&base);
        let mut padded = base.clone();
        padded.extend([0, 0, 0]);
        let b = run(&padded);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
