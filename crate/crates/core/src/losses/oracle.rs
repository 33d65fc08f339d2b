//! Reference evaluations of the coverage term straight from its
//! probabilistic definition, for testing the closed forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{sq_dist, to_loss_space, PointCloud};
use crate::model::CandidateSet;

/// Largest slot count the enumeration accepts.
pub const MAX_ENUMERATED_SLOTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMode {
    /// Sum over every activation pattern and prototype choice.
    Enumerate,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Mean and standard error of an estimate; the error is zero for exact
/// enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// `d(x_i, Y_s^k)` by direct double loop, `[s][k][i]`.
fn distances(c: &CandidateSet, x: &PointCloud) -> Result<Vec<Vec<Vec<f64>>>> {
    let xl = to_loss_space(x)?;
    if xl.is_empty() {
        return Err(Error::EmptyCloud("patch"));
    }
    if xl.dim() != c.dim() {
        return Err(Error::DimMismatch {
            expected: xl.dim(),
            got: c.dim(),
        });
    }
    Ok((0..c.num_slots())
        .map(|s| {
            (0..c.num_prototypes())
                .map(|k| {
                    let (cloud, _) = c.loss_cloud(s, k, false);
                    xl.iter()
                        .map(|p| cloud.iter().map(|y| sq_dist(p, y)).fold(f64::INFINITY, f64::min))
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// Patch-mean distance to the nearest activated reconstruction for one
/// outcome; `choice[s] = 0` marks an inactive slot, `k + 1` a slot that
/// drew prototype `k`. No active slot costs nothing.
fn outcome_cost(d: &[Vec<Vec<f64>>], choice: &[usize], n: usize) -> f64 {
    if choice.iter().all(|&c| c == 0) {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            choice
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(s, &c)| d[s][c - 1][i])
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / n as f64
}

pub fn loss_cov_oracle(c: &CandidateSet, x: &PointCloud, mode: OracleMode) -> Result<OracleEstimate> {
    let d = distances(c, x)?;
    let (s_count, k_count, n) = (c.num_slots(), c.num_prototypes(), x.len());
    let probs: Vec<Vec<f64>> = c
        .slots
        .iter()
        .map(|s| {
            let mut p = vec![1.0 - s.alpha];
            p.extend_from_slice(&s.beta);
            p
        })
        .collect();
    match mode {
        OracleMode::Enumerate => {
            if s_count > MAX_ENUMERATED_SLOTS {
                return Err(Error::ParameterDomain(format!(
                    "enumeration supports at most {MAX_ENUMERATED_SLOTS} slots, got {s_count}"
                )));
            }
            let base = k_count + 1;
            let mut choice = vec![0usize; s_count];
            let mut value = 0.0;
            for code in 0..base.pow(s_count as u32) {
                let mut rest = code;
                let mut p = 1.0;
                for s in 0..s_count {
                    choice[s] = rest % base;
                    rest /= base;
                    p *= probs[s][choice[s]];
                }
                if p > 0.0 {
                    value += p * outcome_cost(&d, &choice, n);
                }
            }
            Ok(OracleEstimate { value, std_error: 0.0 })
        }
        OracleMode::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(Error::ParameterDomain("Monte-Carlo needs at least two samples".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut choice = vec![0usize; s_count];
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..samples {
                for s in 0..s_count {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    choice[s] = k_count;
                    for (j, p) in probs[s].iter().enumerate() {
                        acc += p;
                        if u < acc {
                            choice[s] = j;
                            break;
                        }
                    }
                }
                let v = outcome_cost(&d, &choice, n);
                sum += v;
                sum_sq += v * v;
            }
            let m = samples as f64;
            let mean = sum / m;
            let var = ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
            Ok(OracleEstimate {
                value: mean,
                std_error: (var / m).sqrt(),
            })
        }
    }
}
