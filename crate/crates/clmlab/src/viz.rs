//! PCA projection of final-Transformer-block parameter vectors across
//! pretraining checkpoints and fine-tuned models, with absolute and
//! relative (initialization-translated) coordinates.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Checkpoint {
        id: String,
        epoch_fraction: f64,
    },
    Finetuned {
        id: String,
        task: String,
        init_id: String,
        init_epoch_fraction: f64,
    },
}

impl Provenance {
    pub fn id(&self) -> &str {
        match self {
            Provenance::Checkpoint { id, .. } | Provenance::Finetuned { id, .. } => id,
        }
    }
}

/// Flattened parameters of the final Transformer block (attention + FFN +
/// their layer norms; the MLM head is excluded) with provenance.
#[derive(Debug, Clone)]
pub struct BlockVector {
    pub provenance: Provenance,
    pub data: Vec<f64>,
}

/// One vector per model; all models must share a configuration, and every
/// fine-tuned item must name an initialization checkpoint in the set.
pub fn collect_block_vectors(
    models: &[(Provenance, &EncoderParameters)],
) -> Result<Vec<BlockVector>> {
    if models.is_empty() {
        return Err(Error::Config("no models to collect".into()));
    }
    let hash = models[0].1.config().hash();
    let checkpoint_ids: Vec<&str> = models
        .iter()
        .filter(|(p, _)| matches!(p, Provenance::Checkpoint { .. }))
        .map(|(p, _)| p.id())
        .collect();
    let mut out = Vec::with_capacity(models.len());
    for (prov, params) in models {
        if params.config().hash() != hash {
            return Err(Error::Config(format!(
                "model {} has a different configuration",
                prov.id()
            )));
        }
        if let Provenance::Finetuned { init_id, .. } = prov {
            if !checkpoint_ids.contains(&init_id.as_str()) {
                return Err(Error::Config(format!(
                    "fine-tuned model {} names missing initialization {init_id}",
                    prov.id()
                )));
            }
        }
        let names = params.final_block_names();
        out.push(BlockVector {
            provenance: prov.clone(),
            data: params.flatten_subset(&names),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// k orthonormal principal directions in parameter space.
    pub directions: Vec<Vec<f64>>,
    /// Per-item coordinates, one k-vector per input vector.
    pub coords: Vec<Vec<f64>>,
    /// Fraction of total variance carried by each direction.
    pub explained: Vec<f64>,
}

/// Top-k PCA of the centered vectors via the n x n Gram matrix
/// (n vectors of far higher dimension). Deterministic sign convention:
/// the largest-magnitude component of each direction is positive.
pub fn pca_project(vectors: &[Vec<f64>], k: usize) -> Result<Projection> {
    let n = vectors.len();
    if n < k + 1 {
        return Err(Error::Config(format!(
            "pca needs at least {} vectors, have {n}",
            k + 1
        )));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("block vectors differ in dimension".to_string()));
    }
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let gram = DMatrix::from_fn(n, n, |i, j| {
        centered[i]
            .iter()
            .zip(&centered[j])
            .map(|(a, b)| a * b)
            .sum::<f64>()
    });
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let total: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0)).sum();
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let mut directions = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    let mut item_coords = vec![Vec::with_capacity(k); n];
    for &idx in order.iter().take(k) {
        let lambda = eig.eigenvalues[idx];
        if lambda <= 1e-12 * lambda_max.max(1e-300) {
            return Err(Error::Config(format!(
                "requested {k} components but data rank is lower"
            )));
        }
        let w = eig.eigenvectors.column(idx);
        // direction u = X' w / sqrt(lambda); coordinates = sqrt(lambda) w
        let scale = lambda.sqrt();
        let mut u = vec![0.0; dim];
        for (i, c) in centered.iter().enumerate() {
            let wi = w[i] / scale;
            for (uj, xj) in u.iter_mut().zip(c) {
                *uj += wi * xj;
            }
        }
        let mut coords: Vec<f64> = (0..n).map(|i| scale * w[i]).collect();
        // sign convention
        let pivot = u
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if u[pivot] < 0.0 {
            for x in u.iter_mut() {
                *x = -*x;
            }
            for x in coords.iter_mut() {
                *x = -*x;
            }
        }
        directions.push(u);
        explained.push(if total > 0.0 { lambda / total } else { 0.0 });
        for (ic, c) in item_coords.iter_mut().zip(&coords) {
            ic.push(*c);
        }
    }
    Ok(Projection {
        mean,
        directions,
        coords: item_coords,
        explained,
    })
}

/// Coordinates translated so every fine-tuned item is measured from its
/// initialization checkpoint; checkpoints map to the origin exactly.
pub fn relative_coords(
    projection: &Projection,
    provenances: &[Provenance],
) -> Result<Vec<Vec<f64>>> {
    if projection.coords.len() != provenances.len() {
        return Err(Error::Config("coords/provenance length mismatch".into()));
    }
    let k = projection.directions.len();
    let by_id: HashMap<&str, &Vec<f64>> = provenances
        .iter()
        .zip(&projection.coords)
        .filter(|(p, _)| matches!(p, Provenance::Checkpoint { .. }))
        .map(|(p, c)| (p.id(), c))
        .collect();
    let mut out = Vec::with_capacity(provenances.len());
    for (p, c) in provenances.iter().zip(&projection.coords) {
        match p {
            Provenance::Checkpoint { .. } => out.push(vec![0.0; k]),
            Provenance::Finetuned { init_id, .. } => {
                let init = by_id.get(init_id.as_str()).ok_or_else(|| {
                    Error::Config(format!("initialization {init_id} missing from projection"))
                })?;
                out.push(c.iter().zip(init.iter()).map(|(a, b)| a - b).collect());
            }
        }
    }
    Ok(out)
}

/// Euclidean norm of each item's relative coordinates.
pub fn displacement_norms(relative: &[Vec<f64>]) -> Vec<f64> {
    relative
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// CSV schema: item_id, kind in {checkpoint, finetuned}, task,
/// init_epoch_fraction, pc1, pc2, rel_pc1, rel_pc2, displacement.
pub fn write_projection_csv(
    path: &Path,
    provenances: &[Provenance],
    projection: &Projection,
    relative: &[Vec<f64>],
) -> Result<()> {
    let norms = displacement_norms(relative);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record([
        "item_id",
        "kind",
        "task",
        "init_epoch_fraction",
        "pc1",
        "pc2",
        "rel_pc1",
        "rel_pc2",
        "displacement",
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    for i in 0..provenances.len() {
        let (kind, task, frac) = match &provenances[i] {
            Provenance::Checkpoint { epoch_fraction, .. } => {
                ("checkpoint", String::new(), *epoch_fraction)
            }
            Provenance::Finetuned {
                task,
                init_epoch_fraction,
                ..
            } => ("finetuned", task.clone(), *init_epoch_fraction),
        };
        w.write_record([
            provenances[i].id().to_string(),
            kind.to_string(),
            task,
            format!("{frac}"),
            format!("{:.17e}", projection.coords[i][0]),
            format!("{:.17e}", projection.coords[i][1]),
            format!("{:.17e}", relative[i][0]),
            format!("{:.17e}", relative[i][1]),
            format!("{:.17e}", norms[i]),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{count_final_block_params, init_model, ModelConfig};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Independent oracle: cyclic Jacobi eigensolver for small symmetric
    /// matrices, used to cross-check the nalgebra decomposition.
    fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v = vec![vec![0.0; n]; n];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[p][q] * a[p][q];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[k][p];
                        let vkq = v[k][q];
                        v[k][p] = c * vkp - s * vkq;
                        v[k][q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let eigvals: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        (eigvals, v)
    }

    #[test]
    fn line_data_explains_all_variance() {
        let dir: Vec<f64> = (0..10).map(|i| (i as f64 + 1.0) / 10.0).collect();
        let vectors: Vec<Vec<f64>> = (0..5)
            .map(|t| dir.iter().map(|d| d * t as f64).collect())
            .collect();
        let p = pca_project(&vectors, 1).unwrap();
        assert!(p.explained[0] >= 1.0 - 1e-10);
        // requesting a second component exceeds the data rank
        assert!(pca_project(&vectors, 2).is_err());
    }

    #[test]
    fn antipodal_pair_recovers_axis() {
        let u = vec![3.0, 0.0, 4.0];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let p = pca_project(&[u.clone(), neg], 1).unwrap();
        assert!(p.mean.iter().all(|&m| m.abs() < 1e-12));
        let norm: f64 = p.directions[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_relative_eq!(norm, 1.0, epsilon = 1e-10);
        let cos: f64 = p.directions[0]
            .iter()
            .zip(&u)
            .map(|(a, b)| a * b / 5.0)
            .sum();
        assert_relative_eq!(cos.abs(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn matches_gram_eigensolver_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let vectors: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let p = pca_project(&vectors, 2).unwrap();

        // oracle: Jacobi on the centered Gram matrix
        let n = vectors.len();
        let dim = vectors[0].len();
        let mut mean = vec![0.0; dim];
        for v in &vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n as f64;
            }
        }
        let centered: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
            .collect();
        let gram: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        centered[i]
                            .iter()
                            .zip(&centered[j])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let (vals, vecs) = jacobi_eigen(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
        for (comp, &idx) in order.iter().take(2).enumerate() {
            let scale = vals[idx].sqrt();
            let oracle: Vec<f64> = (0..n).map(|i| scale * vecs[i][idx]).collect();
            // compare up to overall sign
            let got: Vec<f64> = p.coords.iter().map(|c| c[comp]).collect();
            let same: f64 = got.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).sum();
            let flipped: f64 = got.iter().zip(&oracle).map(|(a, b)| (a + b).abs()).sum();
            assert!(same.min(flipped) < 1e-8, "component {comp}: {same} / {flipped}");
        }
    }

    #[test]
    fn projection_identity_and_orthonormality() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let vectors: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let p = pca_project(&vectors, 2).unwrap();
        let d01: f64 = p.directions[0]
            .iter()
            .zip(&p.directions[1])
            .map(|(a, b)| a * b)
            .sum();
        assert!(d01.abs() < 1e-10);
        for (v, c) in vectors.iter().zip(&p.coords) {
            for comp in 0..2 {
                let proj: f64 = v
                    .iter()
                    .zip(&p.mean)
                    .zip(&p.directions[comp])
                    .map(|((x, m), u)| (x - m) * u)
                    .sum();
                assert_relative_eq!(proj, c[comp], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn translation_invariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let vectors: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let shifted: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| v.iter().map(|x| x + 5.0).collect())
            .collect();
        let a = pca_project(&vectors, 2).unwrap();
        let b = pca_project(&shifted, 2).unwrap();
        for (ca, cb) in a.coords.iter().zip(&b.coords) {
            for (x, y) in ca.iter().zip(cb) {
                assert_relative_eq!(x, y, epsilon = 1e-8);
            }
        }
    }

    fn demo_provenances() -> Vec<Provenance> {
        vec![
            Provenance::Checkpoint {
                id: "ck1".into(),
                epoch_fraction: 0.25,
            },
            Provenance::Checkpoint {
                id: "ck2".into(),
                epoch_fraction: 0.5,
            },
            Provenance::Finetuned {
                id: "ft1".into(),
                task: "demo".into(),
                init_id: "ck1".into(),
                init_epoch_fraction: 0.25,
            },
        ]
    }

    #[test]
    fn relative_coords_and_displacements() {
        let prov = demo_provenances();
        let projection = Projection {
            mean: vec![],
            directions: vec![vec![], vec![]],
            coords: vec![vec![1.0, 1.0], vec![2.0, 5.0], vec![4.0, 5.0]],
            explained: vec![0.9, 0.1],
        };
        let rel = relative_coords(&projection, &prov).unwrap();
        assert_eq!(rel[0], vec![0.0, 0.0]);
        assert_eq!(rel[1], vec![0.0, 0.0]);
        assert_eq!(rel[2], vec![3.0, 4.0]);
        let norms = displacement_norms(&rel);
        assert_relative_eq!(norms[2], 5.0);
        // rotation invariance of the norm
        let (c, s) = (0.6, 0.8);
        let rotated: Vec<Vec<f64>> = rel
            .iter()
            .map(|v| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]])
            .collect();
        let rn = displacement_norms(&rotated);
        assert_relative_eq!(rn[2], 5.0, epsilon = 1e-10);
    }

    #[test]
    fn missing_initialization_errors() {
        let prov = vec![Provenance::Finetuned {
            id: "ft1".into(),
            task: "demo".into(),
            init_id: "ghost".into(),
            init_epoch_fraction: 0.25,
        }];
        let projection = Projection {
            mean: vec![],
            directions: vec![vec![], vec![]],
            coords: vec![vec![1.0, 1.0]],
            explained: vec![1.0, 0.0],
        };
        assert!(relative_coords(&projection, &prov).is_err());
    }

    #[test]
    fn block_vectors_have_analytic_dimension() {
        let config = ModelConfig {
            d_model: 8,
            n_head: 2,
            n_layer: 2,
            d_ff: 16,
            vocab_size: 11,
            max_len: 16,
            dropout_rate: 0.1,
        };
        let m1 = init_model(&config, 0).unwrap();
        let m2 = init_model(&config, 1).unwrap();
        let prov = demo_provenances();
        let vectors = collect_block_vectors(&[
            (prov[0].clone(), &m1),
            (prov[1].clone(), &m2),
            (prov[2].clone(), &m1),
        ])
        .unwrap();
        assert_eq!(vectors.len(), 3);
        assert_eq!(vectors[0].data.len(), count_final_block_params(&config));

        let other = ModelConfig {
            d_model: 16,
            ..config.clone()
        };
        let m3 = init_model(&other, 0).unwrap();
        assert!(collect_block_vectors(&[(prov[0].clone(), &m1), (prov[1].clone(), &m3)]).is_err());
    }

    #[test]
    fn projection_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.csv");
        let prov = demo_provenances();
        let projection = Projection {
            mean: vec![],
            directions: vec![vec![], vec![]],
            coords: vec![vec![1.0, 1.0], vec![2.0, 5.0], vec![4.0, 5.0]],
            explained: vec![0.9, 0.1],
        };
        let rel = relative_coords(&projection, &prov).unwrap();
        write_projection_csv(&path, &prov, &projection, &rel).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "item_id,kind,task,init_epoch_fraction,pc1,pc2,rel_pc1,rel_pc2,displacement\n"
        ));
        assert_eq!(text.lines().count(), 4);
    }
}
