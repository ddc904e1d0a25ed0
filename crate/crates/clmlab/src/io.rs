//! Corpus ingestion, nested subsampling, bit-exact checkpoint serialization,
//! and run manifests.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::encoder::{EncoderParameters, ModelConfig};
use crate::error::{Error, Result};
use crate::pretrain::CheckpointMeta;
use crate::tokenizer::{self, TokenSequence, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLMCKPT1";

// ---------------------------------------------------------------------------
// corpus ingestion

pub struct IngestOutput {
    pub train: Vec<TokenSequence>,
    pub valid: Vec<TokenSequence>,
    pub vocab: Vocabulary,
    pub corpus_digest: String,
    pub n_duplicates: usize,
    pub n_too_long: usize,
}

/// Deduplicated (exact string match), length-filtered, seed-deterministic
/// 90/10 train/validation split. The validation set is fixed once created.
pub fn ingest_corpus(path: &Path, seed: u64, max_len: usize) -> Result<IngestOutput> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut seen = std::collections::HashSet::new();
    let mut lines: Vec<String> = Vec::new();
    let mut n_duplicates = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line =
            line.map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let line = line.trim().to_string();
        if line.is_empty() {
            continue;
        }
        if seen.insert(line.clone()) {
            lines.push(line);
        } else {
            n_duplicates += 1;
        }
    }
    if lines.is_empty() {
        return Err(Error::Data("empty corpus after deduplication".into()));
    }

    let mut digest = Sha256::new();
    for l in &lines {
        digest.update(l.as_bytes());
        digest.update(b"\n");
    }
    let corpus_digest = format!("{:x}", digest.finalize());

    let vocab = Vocabulary::build_from_lines(lines.iter().map(String::as_str))?;
    let mut sequences = Vec::with_capacity(lines.len());
    let mut n_too_long = 0usize;
    for l in &lines {
        let seq = tokenizer::tokenize(l, &vocab)?;
        if seq.len() <= max_len {
            sequences.push(seq);
        } else {
            n_too_long += 1;
        }
    }
    if sequences.is_empty() {
        return Err(Error::Data("empty corpus after length filtering".into()));
    }

    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_valid = ((sequences.len() as f64 * 0.10).round() as usize)
        .max(1)
        .min(sequences.len() - 1);
    let mut valid = Vec::with_capacity(n_valid);
    let mut train = Vec::with_capacity(sequences.len() - n_valid);
    let mut taken = vec![false; sequences.len()];
    for &i in order.iter().take(n_valid) {
        taken[i] = true;
    }
    for (i, s) in sequences.into_iter().enumerate() {
        if taken[i] {
            valid.push(s);
        } else {
            train.push(s);
        }
    }
    Ok(IngestOutput {
        train,
        valid,
        vocab,
        corpus_digest,
        n_duplicates,
        n_too_long,
    })
}

/// One seeded permutation; dataset_i is the first ceil(f_i * n) elements, so
/// smaller datasets are strict subsets of larger ones.
pub fn nested_subsample<T: Clone>(
    train: &[T],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    for w in fractions.windows(2) {
        if w[0] > w[1] {
            return Err(Error::Data("fractions must be sorted ascending".into()));
        }
    }
    if fractions.iter().any(|&f| f <= 0.0 || f > 1.0) {
        return Err(Error::Data("fractions must lie in (0, 1]".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    Ok(fractions
        .iter()
        .map(|&f| {
            let k = (f * train.len() as f64).ceil() as usize;
            order[..k].iter().map(|&i| train[i].clone()).collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// checkpoint files

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    meta: CheckpointMeta,
    payload_sha256: String,
    tensors: Vec<TensorEntry>,
}

fn payload_bytes(params: &EncoderParameters) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in params.iter() {
        let offset = payload.len() as u64;
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len_bytes: payload.len() as u64 - offset,
        });
    }
    (payload, entries)
}

/// Serialize to `path` via a temporary file and atomic rename. The encoding
/// is canonical, so save -> load -> save is byte-identical.
pub fn save_checkpoint(
    params: &EncoderParameters,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let (payload, tensors) = payload_bytes(params);
    let mut h = Sha256::new();
    h.update(&payload);
    let header = CheckpointHeader {
        config: params.config().clone(),
        meta: meta.clone(),
        payload_sha256: format!("{:x}", h.finalize()),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut bytes = Vec::with_capacity(8 + 8 + header_json.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);

    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParameters, CheckpointMeta)> {
    let mut f = File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Checkpoint(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("{}: header decode: {e}", path.display())))?;
    let payload = &bytes[16 + header_len..];

    let expected_len: u64 = header.tensors.iter().map(|t| t.len_bytes).sum();
    if payload.len() as u64 != expected_len {
        return Err(Error::Checkpoint(format!(
            "{}: truncated payload ({} of {} bytes)",
            path.display(),
            payload.len(),
            expected_len
        )));
    }
    // directory must cover the payload exactly, in order
    let mut cursor = 0u64;
    for t in &header.tensors {
        if t.offset != cursor {
            return Err(Error::Checkpoint(format!(
                "{}: tensor directory gap or overlap at {}",
                path.display(),
                t.name
            )));
        }
        cursor += t.len_bytes;
    }
    let mut h = Sha256::new();
    h.update(payload);
    if format!("{:x}", h.finalize()) != header.payload_sha256 {
        return Err(Error::Checkpoint(format!(
            "{}: payload checksum mismatch",
            path.display()
        )));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        if n * 4 != t.len_bytes as usize {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {} shape/bytes mismatch",
                path.display(),
                t.name
            )));
        }
        let start = t.offset as usize;
        let data: Vec<f64> = payload[start..start + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((t.name.clone(), Tensor::new(t.shape.clone(), data)?));
    }
    let params = EncoderParameters::from_tensors(header.config, tensors)?;
    Ok((params, header.meta))
}

/// Load and verify the stored config hash against an expected run config.
pub fn load_checkpoint_checked(
    path: &Path,
    expected_config_hash: &str,
) -> Result<(EncoderParameters, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(path)?;
    if meta.config_hash != expected_config_hash {
        return Err(Error::Checkpoint(format!(
            "{}: config hash {} does not match expected {}",
            path.display(),
            meta.config_hash,
            expected_config_hash
        )));
    }
    Ok((params, meta))
}

// ---------------------------------------------------------------------------
// run manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCheckpoint {
    pub id: String,
    pub epoch_fraction: f64,
    pub file: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub corpus_digest: String,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    pub wallclock: Option<String>,
    pub checkpoints: Vec<ManifestCheckpoint>,
}

impl RunManifest {
    pub fn new(run_id: &str, config_hash: &str, corpus_digest: &str, seeds: Vec<u64>) -> Self {
        RunManifest {
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            corpus_digest: corpus_digest.to_string(),
            seeds,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wallclock: None,
            checkpoints: Vec::new(),
        }
    }

    pub fn manifest_path(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    /// Read-modify-write under an exclusive lock file.
    pub fn append_checkpoint(run_dir: &Path, entry: ManifestCheckpoint) -> Result<()> {
        let _lock = LockFile::acquire(&run_dir.join("manifest.lock"))?;
        let path = Self::manifest_path(run_dir);
        let mut manifest: RunManifest = {
            let body = fs::read_to_string(&path)?;
            serde_json::from_str(&body)
                .map_err(|e| Error::Data(format!("manifest decode: {e}")))?
        };
        manifest.checkpoints.push(entry);
        manifest.save(run_dir)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = Self::manifest_path(run_dir);
        let tmp = path.with_extension("tmp");
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
        fs::write(&tmp, body)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let body = fs::read_to_string(Self::manifest_path(run_dir))?;
        serde_json::from_str(&body).map_err(|e| Error::Data(format!("manifest decode: {e}")))
    }

    /// Every listed checkpoint exists and its header config hash matches.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        for c in &self.checkpoints {
            let path = run_dir.join(&c.file);
            let (_, meta) = load_checkpoint(&path)?;
            if meta.config_hash != c.config_hash {
                return Err(Error::Checkpoint(format!(
                    "manifest entry {} has config hash {}, file has {}",
                    c.id, c.config_hash, meta.config_hash
                )));
            }
        }
        Ok(())
    }
}

struct LockFile {
    path: PathBuf,
}

impl LockFile {
    fn acquire(path: &Path) -> Result<LockFile> {
        // bounded spin; desk-scale runs contend rarely
        for _ in 0..1000 {
            match OpenOptions::new().write(true).create_new(true).open(path) {
                Ok(_) => {
                    return Ok(LockFile {
                        path: path.to_path_buf(),
                    })
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    std::thread::sleep(std::time::Duration::from_millis(10));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(Error::Data(format!(
            "could not acquire lock {}",
            path.display()
        )))
    }
}

impl Drop for LockFile {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_model;

    fn tiny_params() -> EncoderParameters {
        let cfg = ModelConfig {
            d_model: 8,
            n_head: 2,
            n_layer: 1,
            d_ff: 16,
            vocab_size: 9,
            max_len: 8,
            dropout_rate: 0.1,
        };
        init_model(&cfg, 42).unwrap()
    }

    fn meta_for(params: &EncoderParameters) -> CheckpointMeta {
        CheckpointMeta {
            run_id: "t".into(),
            step: 3,
            epoch_fraction: 0.75,
            tokens_seen: 120,
            rng_digest: "d".into(),
            config_hash: params.config().hash(),
            wallclock: None,
        }
    }

    #[test]
    fn checkpoint_roundtrip_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = tiny_params();
        let meta = meta_for(&p);
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&p, &meta, &a).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, p);
        assert_eq!(loaded_meta.step, meta.step);
        save_checkpoint(&loaded, &loaded_meta, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn corrupted_payload_byte_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = tiny_params();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&p, &meta_for(&p), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = tiny_params();
        let path = dir.path().join("d.ckpt");
        save_checkpoint(&p, &meta_for(&p), &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(load_checkpoint(&path)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&path)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }

    #[test]
    fn config_hash_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = tiny_params();
        let path = dir.path().join("e.ckpt");
        save_checkpoint(&p, &meta_for(&p), &path).unwrap();
        let err = load_checkpoint_checked(&path, "другой")
            .unwrap_err()
            .to_string();
        assert!(err.contains("config hash"), "{err}");
    }

    #[test]
    fn ingest_dedupes_filters_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        let mut body = String::new();
        for i in 0..9 {
            body.push_str(&format!("{}O\n", "C".repeat(i + 1)));
        }
        body.push_str("CO\n"); // duplicate of i=1
        body.push_str("N\n");
        fs::write(&path, &body).unwrap();
        let out = ingest_corpus(&path, 5, 512).unwrap();
        assert_eq!(out.n_duplicates, 1);
        assert_eq!(out.train.len() + out.valid.len(), 10);
        assert_eq!(out.valid.len(), 1);
        // rerun gives the identical partition
        let out2 = ingest_corpus(&path, 5, 512).unwrap();
        assert_eq!(
            out.valid.iter().map(|s| s.source.clone()).collect::<Vec<_>>(),
            out2.valid.iter().map(|s| s.source.clone()).collect::<Vec<_>>()
        );
        // splits are disjoint and cover the deduped set
        let mut all: Vec<&str> = out
            .train
            .iter()
            .chain(&out.valid)
            .map(|s| s.source.as_str())
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn ingest_length_filter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        fs::write(&path, format!("CC\n{}\nCN\nCO\nNN\nNO\nON\nOO\nCCC\nNNN\nOOO\n", "C".repeat(600))).unwrap();
        let out = ingest_corpus(&path, 0, 512).unwrap();
        assert_eq!(out.n_too_long, 1);
        assert_eq!(out.train.len() + out.valid.len(), 10);
    }

    #[test]
    fn nested_subsample_prefix_nesting() {
        let data: Vec<u32> = (0..100).collect();
        let fam = nested_subsample(&data, &[0.1, 0.5, 1.0], 3).unwrap();
        assert_eq!(fam[0].len(), 10);
        assert_eq!(fam[1].len(), 50);
        assert_eq!(fam[2].len(), 100);
        for (small, big) in fam.iter().zip(&fam[1..]) {
            let bigset: std::collections::HashSet<_> = big.iter().collect();
            assert!(small.iter().all(|x| bigset.contains(x)));
        }
    }

    #[test]
    fn nested_subsample_full_fraction_is_everything() {
        let data: Vec<u32> = (0..7).collect();
        let fam = nested_subsample(&data, &[1.0], 0).unwrap();
        let mut got = fam[0].clone();
        got.sort_unstable();
        assert_eq!(got, data);
    }

    #[test]
    fn manifest_roundtrip_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let p = tiny_params();
        let meta = meta_for(&p);
        save_checkpoint(&p, &meta, &dir.path().join("c0.ckpt")).unwrap();
        let m = RunManifest::new("r", &p.config().hash(), "digest", vec![7]);
        m.save(dir.path()).unwrap();
        RunManifest::append_checkpoint(
            dir.path(),
            ManifestCheckpoint {
                id: "r-000003".into(),
                epoch_fraction: 0.75,
                file: "c0.ckpt".into(),
                config_hash: p.config().hash(),
            },
        )
        .unwrap();
        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.checkpoints.len(), 1);
        loaded.verify(dir.path()).unwrap();
    }
}
