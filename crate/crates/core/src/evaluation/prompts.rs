use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::AdaMorph;
use crate::rng::substream;

pub const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 100_000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of every pair of vectors; the diagonal is exactly 1
/// for non-zero vectors.
pub fn cosine_matrix(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = vectors.iter().map(|v| dot(v, v).sqrt()).collect();
    let k = vectors.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let c = if i == j && norms[i] > 0.0 {
                1.0
            } else if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                dot(&vectors[i], &vectors[j]) / (norms[i] * norms[j])
            };
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    m
}

pub fn prompt_cosine_matrix(model: &AdaMorph) -> Result<Vec<Vec<f64>>> {
    let pooled = (0..model.config.robot_dofs.len())
        .map(|k| model.pooled_prompt(k))
        .collect::<Result<Vec<_>>>()?;
    Ok(cosine_matrix(&pooled))
}

/// Medians of the upper-triangle similarities split by whether the two
/// robots share a family.
pub fn family_medians(sim: &[Vec<f64>], families: &[usize]) -> (Option<f64>, Option<f64>) {
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for i in 0..sim.len() {
        for j in i + 1..sim.len() {
            if families[i] == families[j] {
                within.push(Some(sim[i][j]));
            } else {
                across.push(Some(sim[i][j]));
            }
        }
    }
    (
        super::Distribution::from_values(within).median,
        super::Distribution::from_values(across).median,
    )
}

/// Top eigenvector of the symmetric matrix `c` orthogonal to `exclude`.
fn power_iteration(c: &[Vec<f64>], exclude: &[Vec<f64>], seed: u64, index: u64) -> Vec<f64> {
    let d = c.len();
    let mut rng = substream(seed, "pca", index);
    let orthogonalise = |v: &mut Vec<f64>| {
        for e in exclude {
            let p = dot(v, e);
            v.iter_mut().zip(e).for_each(|(x, y)| *x -= p * y);
        }
    };
    let normalise = |v: &mut Vec<f64>| -> bool {
        let n = dot(v, v).sqrt();
        if n < 1e-300 {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= n);
        true
    };
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    orthogonalise(&mut v);
    if !normalise(&mut v) {
        return vec![0.0; d];
    }
    for _ in 0..PCA_MAX_ITERS {
        let mut w: Vec<f64> = c.iter().map(|row| dot(row, &v)).collect();
        orthogonalise(&mut w);
        if !normalise(&mut w) {
            return vec![0.0; d];
        }
        let diff = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if diff < PCA_TOL {
            break;
        }
    }
    // Fix the sign so the largest-magnitude component is positive.
    let lead = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Mean-centred rows projected on the top-two principal directions.
pub fn pca_2d(rows: &[Vec<f64>], seed: u64) -> Vec<[f64; 2]> {
    let Some(d) = rows.first().map(Vec::len) else {
        return Vec::new();
    };
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centred: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += r[i] * r[j];
            }
        }
    }
    let e1 = power_iteration(&cov, &[], seed, 0);
    let e2 = power_iteration(&cov, std::slice::from_ref(&e1), seed, 1);
    centred.iter().map(|r| [dot(r, &e1), dot(r, &e2)]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub robot: usize,
    pub token: usize,
    pub x: f64,
    pub y: f64,
}

/// PCA of every prompt token of every robot.
pub fn prompt_pca_2d(model: &AdaMorph, seed: u64) -> Result<Vec<PromptPoint>> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for k in 0..model.config.robot_dofs.len() {
        let bank = &model.params.get(model.robot(k)?.prompt).value;
        let d = model.config.d_model;
        for (token, row) in bank.data().chunks(d).enumerate() {
            rows.push(row.to_vec());
            labels.push((k, token));
        }
    }
    Ok(pca_2d(&rows, seed)
        .into_iter()
        .zip(labels)
        .map(|([x, y], (robot, token))| PromptPoint { robot, token, x, y })
        .collect())
}
