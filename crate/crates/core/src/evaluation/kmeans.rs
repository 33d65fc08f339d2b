use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{miou, MiouReport};
use crate::error::{Error, Result};
use crate::geometry::{sq_dist, PointCloud};

const MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmeansFeatures {
    pub intensity: bool,
    pub elevation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansResult {
    pub cluster: Vec<usize>,
    /// Class of every point: the majority ground-truth class of its
    /// cluster, `-1` for clusters without labelled points.
    pub pred: Vec<i32>,
    pub miou: MiouReport,
}

/// Lloyd's algorithm from a k-means++ start on row-major `data` of width
/// `dim`. Assignment ties go to the lower centroid index.
pub fn kmeans(data: &[f64], dim: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = data.len() / dim;
    if k == 0 || k > n {
        return Err(Error::ParameterDomain(format!("k = {k} must lie in 1..={n}")));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<f64> = row(rng.gen_range(0..n)).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[..dim])).collect();
    let mut chosen = vec![false; n];
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // Every point coincides with a centre: take unused points in order.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centers.extend_from_slice(&c);
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let d = sq_dist(row(i), &centers[c * dim..(c + 1) * dim]);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assign[i] != best.1 {
                assign[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for a in 0..dim {
                sums[assign[i] * dim + a] += row(i)[a];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for a in 0..dim {
                    centers[c * dim + a] = sums[c * dim + a] / counts[c] as f64;
                }
            }
        }
    }
    Ok(assign)
}

/// Standardised per-point features: reflectance and/or elevation.
fn features(scene: &PointCloud, f: KmeansFeatures) -> Result<(Vec<f64>, usize)> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    if f.intensity {
        let i = scene
            .intensity
            .as_ref()
            .ok_or_else(|| Error::ParameterDomain("intensity feature requested but the scene has none".into()))?;
        cols.push(i.clone());
    }
    if f.elevation {
        cols.push(scene.positions.iter().map(|p| p[2]).collect());
    }
    if cols.is_empty() {
        return Err(Error::ParameterDomain("at least one k-means feature is required".into()));
    }
    for c in &mut cols {
        let n = c.len() as f64;
        let mean = c.iter().sum::<f64>() / n;
        let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        for v in c.iter_mut() {
            *v -= mean;
            if sd > 0.0 {
                *v /= sd;
            }
        }
    }
    let dim = cols.len();
    let data = (0..scene.len()).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
    Ok((data, dim))
}

/// The clustering baseline: k-means on standardised features, each cluster
/// labelled with its majority ground-truth class.
pub fn kmeans_baseline(scene: &PointCloud, k: usize, f: KmeansFeatures, seed: u64) -> Result<KmeansResult> {
    let gt = scene
        .class_label
        .as_ref()
        .ok_or_else(|| Error::ParameterDomain("the scene has no class labels".into()))?;
    let (data, dim) = features(scene, f)?;
    let cluster = kmeans(&data, dim, k, seed)?;
    let mut votes = vec![BTreeMap::<i32, usize>::new(); k];
    for (&c, &g) in cluster.iter().zip(gt) {
        if g >= 0 {
            *votes[c].entry(g).or_default() += 1;
        }
    }
    let class: Vec<i32> = votes.iter().map(|v| super::majority(v).unwrap_or(-1)).collect();
    let pred: Vec<i32> = cluster.iter().map(|&c| class[c]).collect();
    let miou = miou(&pred, gt)?;
    Ok(KmeansResult { cluster, pred, miou })
}
