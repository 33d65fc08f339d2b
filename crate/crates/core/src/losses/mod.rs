//! Training objectives.
//!
//! The reconstruction loss is the sum of an accuracy term (every likely
//! candidate should lie close to the patch) and a coverage term (every patch
//! point should lie close to some activated candidate). Three batch-level
//! regularizers discourage useless activations and unused slots or
//! prototypes, and a penalty keeps translations inside the patch.

mod oracle;
mod reconstruction;
mod regularizers;

pub use oracle::{loss_cov_oracle, OracleEstimate, OracleMode, MAX_ENUMERATED_SLOTS};
pub use reconstruction::ALPHA_FLOOR;
pub use regularizers::{loss_act, loss_proto, loss_slot, loss_translate_reg, ProbabilityGrad};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{to_loss_space, FeatureCloud, PointCloud};
use crate::model::{CandidateGrad, CandidateSet};

/// How the coverage expectation is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CoverageMode {
    /// Exact expectation over activations and prototype draws.
    #[default]
    Exact,
    /// Slots ordered by their conditional expected distance. Matches the
    /// exact value when every slot has a single prototype, and bounds it
    /// from above otherwise.
    SlotSorted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_act: f64,
    pub lambda_slot: f64,
    pub lambda_proto: f64,
    pub epsilon_s: f64,
    pub epsilon_k: f64,
    pub lambda_translate: f64,
    pub coverage: CoverageMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_act: 1e-4,
            lambda_slot: 0.1,
            lambda_proto: 0.1,
            epsilon_s: 0.1,
            epsilon_k: 0.1,
            lambda_translate: 1.0,
            coverage: CoverageMode::Exact,
        }
    }
}

impl LossWeights {
    /// Every weight zero: the total reduces to the reconstruction terms.
    pub fn reconstruction_only() -> Self {
        LossWeights {
            lambda_act: 0.0,
            lambda_slot: 0.0,
            lambda_proto: 0.0,
            lambda_translate: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_act, self.lambda_slot, self.lambda_proto, self.lambda_translate];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        for e in [self.epsilon_s, self.epsilon_k] {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::Config(format!("epsilon {e} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub acc: f64,
    pub cov: f64,
    pub act: f64,
    pub slot: f64,
    pub proto: f64,
    pub translate_reg: f64,
    pub total: f64,
}

impl LossReport {
    pub fn reconstruction(&self) -> f64 {
        self.acc + self.cov
    }

    pub fn is_finite(&self) -> bool {
        [self.acc, self.cov, self.act, self.slot, self.proto, self.translate_reg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Accuracy term of one patch.
pub fn loss_acc(c: &CandidateSet, x: &PointCloud) -> Result<f64> {
    reconstruction::accuracy(c, &to_loss_space(x)?, None)
}

/// Coverage term of one patch.
pub fn loss_cov(c: &CandidateSet, x: &PointCloud, mode: CoverageMode) -> Result<f64> {
    reconstruction::coverage(c, &to_loss_space(x)?, mode, None)
}

fn loss_space_batch(cands: &[CandidateSet], xs: &[PointCloud]) -> Result<Vec<FeatureCloud>> {
    if cands.is_empty() || cands.len() != xs.len() {
        return Err(Error::DimMismatch {
            expected: xs.len(),
            got: cands.len(),
        });
    }
    xs.iter().map(to_loss_space).collect()
}

fn report(cands: &[CandidateSet], acc: f64, cov: f64, w: &LossWeights) -> LossReport {
    let b = cands.len() as f64;
    let act = loss_act(cands);
    let slot = loss_slot(cands, w.epsilon_s);
    let proto = loss_proto(cands, w.epsilon_k);
    let translate_reg = cands.iter().map(|c| loss_translate_reg(&c.slots)).sum::<f64>() / b;
    LossReport {
        acc,
        cov,
        act,
        slot,
        proto,
        translate_reg,
        total: acc + cov + w.lambda_act * act + w.lambda_slot * slot + w.lambda_proto * proto + w.lambda_translate * translate_reg,
    }
}

/// All loss terms of a batch. Reconstruction terms are batch means; the
/// usage regularizers are computed over the batch as a whole.
pub fn total_loss(cands: &[CandidateSet], xs: &[PointCloud], w: &LossWeights) -> Result<LossReport> {
    let xl = loss_space_batch(cands, xs)?;
    let b = cands.len() as f64;
    let (mut acc, mut cov) = (0.0, 0.0);
    for (c, x) in cands.iter().zip(&xl) {
        acc += reconstruction::accuracy(c, x, None)?;
        cov += reconstruction::coverage(c, x, w.coverage, None)?;
    }
    Ok(report(cands, acc / b, cov / b, w))
}

/// [`total_loss`] together with its gradient for every patch.
pub fn total_loss_backward(cands: &[CandidateSet], xs: &[PointCloud], w: &LossWeights) -> Result<(LossReport, Vec<CandidateGrad>)> {
    let xl = loss_space_batch(cands, xs)?;
    let b = cands.len() as f64;
    let (mut acc, mut cov) = (0.0, 0.0);
    let mut grads = Vec::with_capacity(cands.len());
    for (c, x) in cands.iter().zip(&xl) {
        let mut g = c.zero_grad();
        acc += reconstruction::accuracy(c, x, Some((&mut g, 1.0 / b)))?;
        cov += reconstruction::coverage(c, x, w.coverage, Some((&mut g, 1.0 / b)))?;
        for (tg, slot) in g.transforms.iter_mut().zip(&c.slots) {
            let d = regularizers::translate_reg_grad(slot.transform.translation);
            for a in 0..3 {
                tg.translation[a] += w.lambda_translate * d[a] / b;
            }
        }
        grads.push(g);
    }
    let mut pg = ProbabilityGrad::zeros(cands);
    regularizers::loss_act_backward(cands, w.lambda_act, &mut pg);
    regularizers::loss_slot_backward(cands, w.epsilon_s, w.lambda_slot, &mut pg);
    regularizers::loss_proto_backward(cands, w.epsilon_k, w.lambda_proto, &mut pg);
    for (g, (ga, gb)) in grads.iter_mut().zip(pg.alpha.iter().zip(&pg.beta)) {
        for s in 0..ga.len() {
            g.alpha[s] += ga[s];
            for (dst, src) in g.beta[s].iter_mut().zip(&gb[s]) {
                *dst += src;
            }
        }
    }
    Ok((report(cands, acc / b, cov / b, w), grads))
}

#[cfg(test)]
mod tests;
