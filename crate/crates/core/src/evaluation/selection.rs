use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::losses::{loss_acc, loss_cov, CoverageMode};
use crate::model::{CandidateSet, Model};
use crate::training::inference_grid;

/// What a removal's loss increase is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionBaseline {
    /// The loss with the prototypes still alive at that step.
    #[default]
    Current,
    /// The loss of the full model.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub removed: usize,
    /// Relative increase of the reconstruction loss caused by the removal.
    pub increase: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub kept: Vec<usize>,
    pub steps: Vec<SelectionStep>,
    pub initial_loss: f64,
    pub threshold: f64,
    pub baseline: SelectionBaseline,
}

impl SelectionReport {
    /// Mask over the `k` prototypes with the removed ones set.
    pub fn mask(&self, k: usize) -> Vec<bool> {
        let mut m = vec![true; k];
        for &i in &self.kept {
            m[i] = false;
        }
        m
    }
}

/// Unmasked candidate sets of every inference tile, ready for re-masking.
fn grid_candidates(model: &Model, scene: &PointCloud, patch_size: f64) -> Result<Vec<(CandidateSet, PointCloud)>> {
    let mut unmasked = model.clone();
    unmasked.masked = vec![false; model.num_prototypes()];
    inference_grid(scene, patch_size)?
        .into_iter()
        .map(|t| {
            let x = unmasked.prepare_input(t.cloud)?;
            Ok((unmasked.reconstruct(&x)?, x))
        })
        .collect()
}

fn masked_loss(tiles: &[(CandidateSet, PointCloud)], mask: &[bool], mode: CoverageMode) -> Result<f64> {
    let mut total = 0.0;
    for (c, x) in tiles {
        let loss = if mask.iter().any(|&m| m) {
            let slots = c.slots.iter().map(|s| s.masked(mask)).collect();
            let masked = CandidateSet::new(slots, c.prototypes.clone(), c.intensity.clone())?;
            loss_acc(&masked, x)? + loss_cov(&masked, x, mode)?
        } else {
            loss_acc(c, x)? + loss_cov(c, x, mode)?
        };
        total += loss;
    }
    Ok(total / tiles.len() as f64)
}

/// Mean reconstruction loss `L_acc + L_cov` over the inference grid with
/// the model's current mask.
pub fn grid_reconstruction_loss(model: &Model, scene: &PointCloud, patch_size: f64, mode: CoverageMode) -> Result<f64> {
    let tiles = grid_candidates(model, scene, patch_size)?;
    if tiles.is_empty() {
        return Err(Error::EmptyCloud("scene"));
    }
    masked_loss(&tiles, &model.masked, mode)
}

/// Greedy pruning. Each round masks every live prototype in turn and
/// removes the one whose masking raises the grid reconstruction loss the
/// least, as long as the relative increase stays under `threshold`.
/// Prototypes already masked in `model` count as removed.
pub fn select_prototypes(
    model: &Model,
    scene: &PointCloud,
    patch_size: f64,
    mode: CoverageMode,
    threshold: f64,
    baseline: SelectionBaseline,
) -> Result<SelectionReport> {
    let k = model.num_prototypes();
    let tiles = grid_candidates(model, scene, patch_size)?;
    if tiles.is_empty() {
        return Err(Error::EmptyCloud("scene"));
    }
    let mut mask = model.masked.clone();
    let initial = masked_loss(&tiles, &mask, mode)?;
    let mut current = initial;
    let mut steps = Vec::new();
    loop {
        let live: Vec<usize> = (0..k).filter(|&i| !mask[i]).collect();
        if live.len() <= 1 {
            break;
        }
        let reference = match baseline {
            SelectionBaseline::Current => current,
            SelectionBaseline::Original => initial,
        };
        let mut best: Option<(usize, f64, f64)> = None;
        for &cand in &live {
            mask[cand] = true;
            let loss = masked_loss(&tiles, &mask, mode)?;
            mask[cand] = false;
            let inc = (loss - reference) / reference.abs().max(f64::MIN_POSITIVE);
            if best.map_or(true, |(_, b, _)| inc < b) {
                best = Some((cand, inc, loss));
            }
        }
        let (cand, inc, loss) = best.expect("at least two live prototypes");
        if inc >= threshold {
            break;
        }
        mask[cand] = true;
        current = loss;
        steps.push(SelectionStep {
            removed: cand,
            increase: inc,
            loss,
        });
    }
    Ok(SelectionReport {
        kept: (0..k).filter(|&i| !mask[i]).collect(),
        steps,
        initial_loss: initial,
        threshold,
        baseline,
    })
}
