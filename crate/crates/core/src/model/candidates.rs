use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{position_to_loss_space, within_extent, AffineTransform, FeatureCloud, TransformGrad, INTENSITY_LOSS_SCALE};

/// Activation and choice probabilities of one slot together with its
/// transform.
///
/// `(1 - alpha, beta[0], .., beta[K-1])` is the softmax of `logits`, so the
/// betas are joint probabilities of activation and choice and sum to alpha.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotParams {
    pub logits: Vec<f64>,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub transform: AffineTransform,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

impl SlotParams {
    /// `logits[0]` is the "inactive" entry.
    pub fn from_logits(logits: Vec<f64>, transform: AffineTransform) -> Self {
        assert!(logits.len() >= 2, "need the inactive logit and at least one prototype");
        let p = softmax(&logits);
        SlotParams {
            alpha: 1.0 - p[0],
            beta: p[1..].to_vec(),
            logits,
            transform,
        }
    }

    pub fn num_prototypes(&self) -> usize {
        self.beta.len()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Prevents the slot from choosing the masked prototypes: their logits
    /// are dropped and the softmax renormalised over the rest.
    pub fn masked(&self, masked: &[bool]) -> SlotParams {
        let logits = self
            .logits
            .iter()
            .enumerate()
            .map(|(i, &z)| if i > 0 && masked[i - 1] { f64::NEG_INFINITY } else { z })
            .collect();
        SlotParams::from_logits(logits, self.transform)
    }

    /// Pulls `∂L/∂α` and `∂L/∂β` back to the logits.
    pub fn logits_backward(&self, dalpha: f64, dbeta: &[f64]) -> Vec<f64> {
        let p = self.probabilities();
        let mut g = Vec::with_capacity(p.len());
        g.push(-dalpha);
        g.extend_from_slice(dbeta);
        let dot: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        p.iter().zip(&g).map(|(pi, gi)| pi * (gi - dot)).collect()
    }
}

/// Every candidate reconstruction `Y_s^k` of one patch.
///
/// Candidate `(s, k)` is prototype `k`, already scaled by its own scale
/// factors, moved by the transform of slot `s`. When the loss space is 4-d,
/// every point of a candidate carries its prototype's intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub slots: Vec<SlotParams>,
    /// Scaled prototype points in the canonical frame.
    pub prototypes: Vec<Vec<[f64; 3]>>,
    pub intensity: Option<Vec<f64>>,
    /// Patch-frame candidate positions, indexed by `s * K + k`.
    pub positions: Vec<Vec<[f64; 3]>>,
}

impl CandidateSet {
    pub fn new(slots: Vec<SlotParams>, prototypes: Vec<Vec<[f64; 3]>>, intensity: Option<Vec<f64>>) -> Result<Self> {
        let k = prototypes.len();
        if slots.is_empty() || k == 0 {
            return Err(Error::ParameterDomain("a candidate set needs at least one slot and one prototype".into()));
        }
        if let Some(s) = slots.iter().find(|s| s.num_prototypes() != k) {
            return Err(Error::DimMismatch {
                expected: k,
                got: s.num_prototypes(),
            });
        }
        if let Some(i) = &intensity {
            if i.len() != k {
                return Err(Error::DimMismatch { expected: k, got: i.len() });
            }
        }
        if prototypes.iter().any(Vec::is_empty) {
            return Err(Error::EmptyCloud("prototype"));
        }
        let positions = slots
            .iter()
            .flat_map(|s| prototypes.iter().map(move |p| p.iter().map(|q| s.transform.apply_point(q)).collect()))
            .collect();
        Ok(CandidateSet {
            slots,
            prototypes,
            intensity,
            positions,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        if self.intensity.is_some() {
            4
        } else {
            3
        }
    }

    pub fn candidate(&self, s: usize, k: usize) -> &[[f64; 3]] {
        &self.positions[s * self.num_prototypes() + k]
    }

    /// Loss-space image of candidate `(s, k)`. With `clip` only the points
    /// inside the patch extent are kept; the second value lists their
    /// indices into the candidate.
    pub fn loss_cloud(&self, s: usize, k: usize, clip: bool) -> (FeatureCloud, Vec<usize>) {
        let pts = self.candidate(s, k);
        let mut cloud = FeatureCloud::with_capacity(self.dim(), pts.len());
        let mut kept = Vec::with_capacity(pts.len());
        for (j, p) in pts.iter().enumerate() {
            if clip && !within_extent(p) {
                continue;
            }
            let q = position_to_loss_space(p);
            match &self.intensity {
                Some(i) => cloud.push(&[q[0], q[1], q[2], i[k] * INTENSITY_LOSS_SCALE]),
                None => cloud.push(&q),
            }
            kept.push(j);
        }
        (cloud, kept)
    }

    pub fn zero_grad(&self) -> CandidateGrad {
        CandidateGrad {
            alpha: vec![0.0; self.num_slots()],
            beta: vec![vec![0.0; self.num_prototypes()]; self.num_slots()],
            positions: self.positions.iter().map(|p| vec![[0.0; 3]; p.len()]).collect(),
            intensity: vec![0.0; self.num_prototypes()],
            transforms: vec![TransformGrad::default(); self.num_slots()],
        }
    }

    /// Pulls candidate-level gradients back to the slot logits, the slot
    /// transforms, the scaled prototype points and the intensities.
    pub fn backward(&self, g: &CandidateGrad) -> SlotGrads {
        let k_count = self.num_prototypes();
        let mut transforms = g.transforms.clone();
        let mut prototypes: Vec<Vec<[f64; 3]>> = self.prototypes.iter().map(|p| vec![[0.0; 3]; p.len()]).collect();
        for (s, slot) in self.slots.iter().enumerate() {
            for k in 0..k_count {
                let dpos = &g.positions[s * k_count + k];
                for (j, q) in self.prototypes[k].iter().enumerate() {
                    let dq = dpos[j];
                    if dq == [0.0; 3] {
                        continue;
                    }
                    let dp = slot.transform.backward_point(q, &dq, &mut transforms[s]);
                    for a in 0..3 {
                        prototypes[k][j][a] += dp[a];
                    }
                }
            }
        }
        let logits = self
            .slots
            .iter()
            .enumerate()
            .map(|(s, slot)| slot.logits_backward(g.alpha[s], &g.beta[s]))
            .collect();
        SlotGrads {
            logits,
            transforms,
            prototypes,
            intensity: g.intensity.clone(),
        }
    }
}

impl AsRef<[SlotParams]> for CandidateSet {
    fn as_ref(&self) -> &[SlotParams] {
        &self.slots
    }
}

/// Gradient with respect to the quantities a [`CandidateSet`] is built from.
/// Position gradients are in the patch frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrad {
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub positions: Vec<Vec<[f64; 3]>>,
    pub intensity: Vec<f64>,
    pub transforms: Vec<TransformGrad>,
}

impl CandidateGrad {
    /// Accumulates a loss-space gradient `dy` of candidate `(s, k)`, point `j`.
    #[inline]
    pub(crate) fn add_loss_space(&mut self, s: usize, k: usize, k_count: usize, j: usize, dy: &[f64]) {
        let p = &mut self.positions[s * k_count + k][j];
        for a in 0..3 {
            p[a] += 0.5 * dy[a];
        }
        if dy.len() == 4 {
            self.intensity[k] += INTENSITY_LOSS_SCALE * dy[3];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotGrads {
    pub logits: Vec<Vec<f64>>,
    pub transforms: Vec<TransformGrad>,
    pub prototypes: Vec<Vec<[f64; 3]>>,
    pub intensity: Vec<f64>,
}
