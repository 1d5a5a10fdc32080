//! Distribution-level evaluation: Laplacian-eigenmap embedding of feature
//! vectors, symmetric Chamfer distance, the DR score and the improvement
//! score ratio.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Neighbours per node of the embedding graph.
pub const DEFAULT_KNN: usize = 10;
/// Denominator floor for ratio scores.
pub const DEGENERATE_FLOOR: f64 = 1e-12;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Laplacian eigenmaps on a symmetrised k-nearest-neighbour graph.
///
/// Connectivity weights are 1 for each kNN edge, symmetrised as
/// `(A + Aᵀ) / 2`. The embedding uses eigenvectors 1..=dim of the
/// normalised Laplacian `I - D^{-1/2} W D^{-1/2}`, rescaled by `D^{-1/2}`.
/// Eigenvector signs are fixed so the largest-magnitude entry is positive,
/// which makes the output a deterministic function of the input.
///
/// Exact duplicates share one graph node and therefore one coordinate. If
/// fewer than `dim + 2` distinct points remain, they are placed on the
/// vertices of a unit simplex instead.
pub fn spectral_embedding(points: &[Vec<f64>], k: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    if n < dim + 2 {
        return Err(Error::SampleSize(format!("{n} points cannot be embedded in {dim} dimensions")));
    }
    let mut slot: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut unique: Vec<Vec<f64>> = Vec::new();
    let owner: Vec<usize> = points
        .iter()
        .map(|p| {
            let key: Vec<u64> = p.iter().map(|x| if *x == 0.0 { 0 } else { x.to_bits() }).collect();
            *slot.entry(key).or_insert_with(|| {
                unique.push(p.clone());
                unique.len() - 1
            })
        })
        .collect();
    let coords = if unique.len() < dim + 2 {
        (0..unique.len())
            .map(|j| (0..dim).map(|d| if d == j { 1.0 } else { 0.0 }).collect())
            .collect()
    } else {
        eigenmap(&unique, k, dim)
    };
    Ok(owner.into_iter().map(|j| coords[j].clone()).collect::<Vec<Vec<f64>>>())
}

fn eigenmap(points: &[Vec<f64>], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    let k = k.clamp(1, n - 1);
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(&points[i], &points[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut w = DMatrix::<f64>::zeros(n, n);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| dist[i * n + a].total_cmp(&dist[i * n + b]).then(a.cmp(&b)));
        for &j in &order[..k] {
            w[(i, j)] += 0.5;
            w[(j, i)] += 0.5;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut lap = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            if w[(i, j)] != 0.0 {
                lap[(i, j)] -= inv_sqrt[i] * w[(i, j)] * inv_sqrt[j];
            }
        }
    }
    let eig = SymmetricEigen::new(lap);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut coords = vec![vec![0.0; dim]; n];
    for (d, &e) in idx[1..=dim].iter().enumerate() {
        let v = eig.eigenvectors.column(e);
        let mut col: Vec<f64> = (0..n).map(|i| v[i] * inv_sqrt[i]).collect();
        let pivot = col.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..n {
            coords[i][d] = col[i];
        }
    }
    coords
}

/// Symmetric mean-based Chamfer distance
/// `½ (mean_x min_y ‖x−y‖ + mean_y min_x ‖x−y‖)`.
pub fn chamfer_distance(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    if xs.is_empty() || ys.is_empty() {
        return f64::NAN;
    }
    let one_way = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        a.iter()
            .map(|x| b.iter().map(|y| sq_dist(x, y)).fold(f64::INFINITY, f64::min).sqrt())
            .sum::<f64>()
            / a.len() as f64
    };
    let (t1, t2) = (one_way(xs, ys), one_way(ys, xs));
    if t1 <= t2 { 0.5 * (t1 + t2) } else { 0.5 * (t2 + t1) }
}

/// Mean silhouette coefficient of a two-cluster labelling.
pub fn silhouette(points: &[Vec<f64>], labels: &[bool]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mut same, mut ns, mut other, mut no) = (0.0, 0usize, 0.0, 0usize);
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = sq_dist(&points[i], &points[j]).sqrt();
            if labels[i] == labels[j] {
                same += d;
                ns += 1;
            } else {
                other += d;
                no += 1;
            }
        }
        if ns == 0 || no == 0 {
            continue;
        }
        let a = same / ns as f64;
        let b = other / no as f64;
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    total / n as f64
}

/// Silhouette of the joint 2-D embedding of two sample sets.
pub fn separation_score(set_a: &[Vec<f64>], set_b: &[Vec<f64>], k: usize) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::SampleSize(format!(
            "separation needs at least 2 samples per set, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    let pooled: Vec<Vec<f64>> = set_a.iter().chain(set_b).cloned().collect();
    let labels: Vec<bool> = (0..pooled.len()).map(|i| i < set_a.len()).collect();
    let emb = spectral_embedding(&pooled, k, 2)?;
    Ok(silhouette(&emb, &labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionMetrics {
    pub c1: f64,
    pub c2: f64,
    pub dr: Option<f64>,
    pub degenerate: bool,
    /// 2-D coordinates of the coarse, enhanced and reference samples.
    pub coarse: Vec<[f64; 2]>,
    pub enhanced: Vec<[f64; 2]>,
    pub reference: Vec<[f64; 2]>,
}

/// Joint embedding of three sample sets and the Chamfer/DR scores.
pub fn distribution_metrics(
    coarse: &[Vec<f64>],
    enhanced: &[Vec<f64>],
    reference: &[Vec<f64>],
    k: usize,
) -> Result<DistributionMetrics> {
    if coarse.is_empty() || enhanced.is_empty() || reference.is_empty() {
        return Err(Error::SampleSize("all three sample sets must be non-empty".into()));
    }
    let pooled: Vec<Vec<f64>> = coarse.iter().chain(enhanced).chain(reference).cloned().collect();
    let emb = spectral_embedding(&pooled, k, 2)?;
    let (a, rest) = emb.split_at(coarse.len());
    let (b, c) = rest.split_at(enhanced.len());
    let c1 = chamfer_distance(a, c);
    let c2 = chamfer_distance(b, c);
    let degenerate = c1 < DEGENERATE_FLOOR;
    let dr = (!degenerate).then(|| dr_score(c1, c2));
    let to2 = |s: &[Vec<f64>]| s.iter().map(|p| [p[0], p[1]]).collect();
    Ok(DistributionMetrics { c1, c2, dr, degenerate, coarse: to2(a), enhanced: to2(b), reference: to2(c) })
}

/// `100 |C1 − C2| / C1`.
pub fn dr_score(c1: f64, c2: f64) -> f64 {
    100.0 * (c1 - c2).abs() / c1
}

/// `100 |(L(in) − L(out)) / (L(in) − L(gt))|`; `None` when the denominator
/// is below [`DEGENERATE_FLOOR`].
pub fn improvement_ratio(loss_input: f64, loss_output: f64, loss_truth: f64) -> Option<f64> {
    let den = loss_input - loss_truth;
    if den.abs() < DEGENERATE_FLOOR {
        return None;
    }
    Some(100.0 * ((loss_input - loss_output) / den).abs())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
