//! Deterministic synthetic data: a grammar-sampled SMILES generator and two
//! toy downstream tasks with labels derived from token statistics, so the
//! whole pipeline runs in minutes with no external data.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tokenizer::split_surface;
use crate::transfer::{DownstreamTask, MetricKind, TaskKind};

const CHAIN_ATOMS: [(&str, u32); 7] = [
    ("C", 55),
    ("N", 12),
    ("O", 12),
    ("S", 4),
    ("F", 3),
    ("Cl", 3),
    ("Br", 2),
];

fn pick_atom(rng: &mut ChaCha20Rng) -> &'static str {
    let total: u32 = CHAIN_ATOMS.iter().map(|(_, w)| w).sum();
    let mut roll = rng.gen_range(0..total);
    for (a, w) in CHAIN_ATOMS {
        if roll < w {
            return a;
        }
        roll -= w;
    }
    "C"
}

fn emit_chain(out: &mut String, rng: &mut ChaCha20Rng, atoms: usize, depth: usize) {
    let mut i = 0;
    while i < atoms {
        let r: f64 = rng.gen();
        if r < 0.08 && atoms - i >= 6 {
            // aromatic benzene fragment
            out.push_str("c1ccccc1");
            i += 6;
        } else if r < 0.14 && atoms - i >= 5 {
            // aliphatic ring
            let size = rng.gen_range(5..=6);
            out.push_str("C1");
            for _ in 0..size - 2 {
                out.push_str(pick_atom(rng));
            }
            out.push_str("C1");
            i += size;
        } else {
            if i > 0 && r > 0.9 {
                out.push(if rng.gen_bool(0.7) { '=' } else { '#' });
            }
            out.push_str(pick_atom(rng));
            i += 1;
            if depth < 2 && i < atoms && rng.gen_bool(0.18) {
                let branch = rng.gen_range(1..=3.min(atoms - i));
                out.push('(');
                emit_chain(out, rng, branch, depth + 1);
                out.push(')');
                i += branch;
            }
        }
    }
}

/// One grammar-sampled SMILES string with roughly `min_atoms..=max_atoms`
/// heavy atoms. Every emitted string tokenizes cleanly under the atom-wise
/// tokenizer; chemical validity is not a goal.
pub fn generate_molecule(rng: &mut ChaCha20Rng, min_atoms: usize, max_atoms: usize) -> String {
    let atoms = rng.gen_range(min_atoms..=max_atoms);
    let mut out = String::new();
    emit_chain(&mut out, rng, atoms, 0);
    out
}

/// Deduplicated corpus of `n_molecules` distinct synthetic SMILES strings.
pub fn generate_corpus(n_molecules: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n_molecules);
    while out.len() < n_molecules {
        let m = generate_molecule(&mut rng, 4, 40);
        if seen.insert(m.clone()) {
            out.push(m);
        }
    }
    out
}

/// Generate molecules until the corpus holds at least `target_tokens`
/// content tokens under the atom-wise tokenizer.
pub fn generate_corpus_tokens(target_tokens: usize, seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut tokens = 0usize;
    while tokens < target_tokens {
        let m = generate_molecule(&mut rng, 4, 40);
        if seen.insert(m.clone()) {
            tokens += split_surface(&m)?.len();
            out.push(m);
        }
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn assign_splits(
    n: usize,
    strata: &[usize],
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    // stratified 70/15/15 so every split carries every stratum when possible
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // sorted so the stratum order (and hence the RNG stream) is stable
    // across processes
    let groups: std::collections::BTreeSet<usize> = strata.iter().copied().collect();
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for g in groups {
        let mut members: Vec<usize> = (0..n).filter(|&i| strata[i] == g).collect();
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        let n_test = (members.len() * 15 / 100).max(1).min(members.len());
        let n_valid = (members.len() * 15 / 100).max(1).min(members.len() - n_test);
        for (pos, &i) in members.iter().enumerate() {
            if pos < n_test {
                test.push(i);
            } else if pos < n_test + n_valid {
                valid.push(i);
            } else {
                train.push(i);
            }
        }
    }
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    (train, valid, test)
}

/// Toy binary classification: label 1 iff the molecule contains a nitrogen
/// token ("N" or "n" inside aromatic fragments never occurs here, so the
/// surface check is exact). Linearly separable from token statistics.
pub fn toy_classification_task(smiles: &[String], seed: u64) -> Result<DownstreamTask> {
    let labels: Vec<f64> = smiles
        .iter()
        .map(|s| -> Result<f64> {
            Ok(split_surface(s)?.iter().any(|&t| t == "N") as u32 as f64)
        })
        .collect::<Result<_>>()?;
    if labels.iter().all(|&y| y == 0.0) || labels.iter().all(|&y| y == 1.0) {
        return Err(Error::Data(
            "toy classification needs both classes in the corpus".into(),
        ));
    }
    let strata: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    let (train_idx, valid_idx, test_idx) = assign_splits(smiles.len(), &strata, seed);
    let task = DownstreamTask {
        name: "synth_has_nitrogen".into(),
        kind: TaskKind::Classification,
        metric: MetricKind::RocAuc,
        n_targets: 1,
        smiles: smiles.to_vec(),
        labels: labels.into_iter().map(|y| vec![Some(y)]).collect(),
        train_idx,
        valid_idx,
        test_idx,
    };
    task.validate()?;
    Ok(task)
}

/// Toy regression: target is the atom-wise token count, a deterministic
/// statistic of the string.
pub fn toy_regression_task(smiles: &[String], seed: u64) -> Result<DownstreamTask> {
    let labels: Vec<f64> = smiles
        .iter()
        .map(|s| Ok(split_surface(s)?.len() as f64))
        .collect::<Result<_>>()?;
    let strata = vec![0usize; smiles.len()];
    let (train_idx, valid_idx, test_idx) = assign_splits(smiles.len(), &strata, seed);
    let task = DownstreamTask {
        name: "synth_token_count".into(),
        kind: TaskKind::Regression,
        metric: MetricKind::Rmse,
        n_targets: 1,
        smiles: smiles.to_vec(),
        labels: labels.into_iter().map(|y| vec![Some(y)]).collect(),
        train_idx,
        valid_idx,
        test_idx,
    };
    task.validate()?;
    Ok(task)
}

/// Write a task in the downstream CSV format (smiles,split,<target>).
pub fn write_task_csv(path: &Path, task: &DownstreamTask) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let mut header = vec!["smiles".to_string(), "split".to_string()];
    for t in 0..task.n_targets {
        header.push(format!("y{}", t + 1));
    }
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    let split_of = |i: usize| -> &'static str {
        if task.train_idx.contains(&i) {
            "train"
        } else if task.valid_idx.contains(&i) {
            "valid"
        } else {
            "test"
        }
    };
    for i in 0..task.smiles.len() {
        let mut rec = vec![task.smiles[i].clone(), split_of(i).to_string()];
        for t in 0..task.n_targets {
            rec.push(
                task.labels[i][t]
                    .map(|y| format!("{y}"))
                    .unwrap_or_default(),
            );
        }
        w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{detokenize, tokenize, Vocabulary};

    #[test]
    fn corpus_is_deterministic_and_distinct() {
        let a = generate_corpus(200, 5);
        let b = generate_corpus(200, 5);
        assert_eq!(a, b);
        let set: HashSet<&String> = a.iter().collect();
        assert_eq!(set.len(), a.len());
        let c = generate_corpus(200, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn every_molecule_tokenizes_and_round_trips() {
        let corpus = generate_corpus(500, 1);
        let vocab = Vocabulary::build(std::io::Cursor::new(corpus.join("\n"))).unwrap();
        for s in &corpus {
            let seq = tokenize(s, &vocab).unwrap();
            assert_eq!(&detokenize(&seq, &vocab).unwrap(), s);
        }
    }

    #[test]
    fn token_budget_is_reached() {
        let corpus = generate_corpus_tokens(5000, 3).unwrap();
        let total: usize = corpus
            .iter()
            .map(|s| split_surface(s).unwrap().len())
            .sum();
        assert!(total >= 5000);
        assert!(total < 5000 + 200, "overshoot {total}");
    }

    #[test]
    fn classification_task_is_stratified() {
        let corpus = generate_corpus(300, 9);
        let task = toy_classification_task(&corpus, 11).unwrap();
        for idx in [&task.train_idx, &task.valid_idx, &task.test_idx] {
            let ys: Vec<f64> = idx.iter().map(|&i| task.labels[i][0].unwrap()).collect();
            assert!(ys.iter().any(|&y| y == 0.0) && ys.iter().any(|&y| y == 1.0));
        }
        let n = task.train_idx.len() + task.valid_idx.len() + task.test_idx.len();
        assert_eq!(n, corpus.len());
    }

    #[test]
    fn regression_task_has_varying_targets() {
        let corpus = generate_corpus(100, 2);
        let task = toy_regression_task(&corpus, 4).unwrap();
        let ys: HashSet<u64> = task
            .labels
            .iter()
            .map(|row| row[0].unwrap() as u64)
            .collect();
        assert!(ys.len() > 3);
        crate::transfer::TargetNormalizer::fit(&task).unwrap();
    }

    #[test]
    fn task_csv_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.csv");
        let corpus = generate_corpus(60, 8);
        let task = toy_classification_task(&corpus, 1).unwrap();
        write_task_csv(&path, &task).unwrap();
        let back = DownstreamTask::from_csv(&path, &task.name, task.kind, task.metric).unwrap();
        assert_eq!(back.smiles, task.smiles);
        assert_eq!(back.labels, task.labels);
        assert_eq!(back.train_idx, task.train_idx);
        assert_eq!(back.test_idx, task.test_idx);
    }
}
