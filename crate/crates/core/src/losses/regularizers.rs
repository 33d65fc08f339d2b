//! Batch-level activation and usage regularizers and the translation
//! penalty. Gradients are returned with respect to `α` and `β` of every
//! slot of every patch.

use crate::model::SlotParams;

/// `[patch][slot]` gradient with respect to `α`, and `[patch][slot][k]` with
/// respect to `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityGrad {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<Vec<f64>>>,
}

impl ProbabilityGrad {
    pub fn zeros<B: AsRef<[SlotParams]>>(batch: &[B]) -> Self {
        ProbabilityGrad {
            alpha: batch.iter().map(|b| vec![0.0; b.as_ref().len()]).collect(),
            beta: batch
                .iter()
                .map(|b| b.as_ref().iter().map(|s| vec![0.0; s.beta.len()]).collect())
                .collect(),
        }
    }
}

fn slot_count<B: AsRef<[SlotParams]>>(batch: &[B]) -> usize {
    batch.first().map_or(0, |b| b.as_ref().len())
}

/// Batch mean of every slot's activation probability.
fn mean_alpha<B: AsRef<[SlotParams]>>(batch: &[B]) -> Vec<f64> {
    let mut u = vec![0.0; slot_count(batch)];
    for b in batch {
        for (us, s) in u.iter_mut().zip(b.as_ref()) {
            *us += s.alpha;
        }
    }
    u.iter_mut().for_each(|v| *v /= batch.len() as f64);
    u
}

/// `Σ_s mean_B α_s`.
pub fn loss_act<B: AsRef<[SlotParams]>>(batch: &[B]) -> f64 {
    mean_alpha(batch).iter().sum()
}

pub(crate) fn loss_act_backward<B: AsRef<[SlotParams]>>(batch: &[B], weight: f64, g: &mut ProbabilityGrad) {
    let w = weight / batch.len() as f64;
    for ga in &mut g.alpha {
        ga.iter_mut().for_each(|v| *v += w);
    }
}

/// `-Σ_s min(u_s / U, ε_S)` with `u_s` the batch-mean activation of slot `s`
/// and `U = Σ_s u_s`; zero when no slot is ever active.
pub fn loss_slot<B: AsRef<[SlotParams]>>(batch: &[B], eps_s: f64) -> f64 {
    let u = mean_alpha(batch);
    let total: f64 = u.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -u.iter().map(|v| (v / total).min(eps_s)).sum::<f64>()
}

pub(crate) fn loss_slot_backward<B: AsRef<[SlotParams]>>(batch: &[B], eps_s: f64, weight: f64, g: &mut ProbabilityGrad) {
    let u = mean_alpha(batch);
    let total: f64 = u.iter().sum();
    if total <= 0.0 {
        return;
    }
    // Only unsaturated ratios carry gradient.
    let live: Vec<bool> = u.iter().map(|v| v / total < eps_s).collect();
    let live_sum: f64 = u.iter().zip(&live).filter(|(_, &l)| l).map(|(v, _)| v).sum();
    let du: Vec<f64> = live
        .iter()
        .map(|&l| -(if l { 1.0 } else { 0.0 }) / total + live_sum / (total * total))
        .collect();
    let w = weight / batch.len() as f64;
    for ga in &mut g.alpha {
        for (v, d) in ga.iter_mut().zip(&du) {
            *v += w * d;
        }
    }
}

/// `-Σ_k min(v_k / U, ε_K)` with `v_k` the batch mean of `Σ_s β_s^k`.
pub fn loss_proto<B: AsRef<[SlotParams]>>(batch: &[B], eps_k: f64) -> f64 {
    let total: f64 = mean_alpha(batch).iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -prototype_usage(batch).iter().map(|v| (v / total).min(eps_k)).sum::<f64>()
}

fn prototype_usage<B: AsRef<[SlotParams]>>(batch: &[B]) -> Vec<f64> {
    let k = batch
        .first()
        .and_then(|b| b.as_ref().first())
        .map_or(0, |s| s.beta.len());
    let mut v = vec![0.0; k];
    for b in batch {
        for s in b.as_ref() {
            for (vk, bk) in v.iter_mut().zip(&s.beta) {
                *vk += bk;
            }
        }
    }
    v.iter_mut().for_each(|x| *x /= batch.len() as f64);
    v
}

pub(crate) fn loss_proto_backward<B: AsRef<[SlotParams]>>(batch: &[B], eps_k: f64, weight: f64, g: &mut ProbabilityGrad) {
    let total: f64 = mean_alpha(batch).iter().sum();
    if total <= 0.0 {
        return;
    }
    let v = prototype_usage(batch);
    let live: Vec<bool> = v.iter().map(|x| x / total < eps_k).collect();
    let live_sum: f64 = v.iter().zip(&live).filter(|(_, &l)| l).map(|(x, _)| x).sum();
    let w = weight / batch.len() as f64;
    let dtotal = w * live_sum / (total * total);
    for (ga, gb) in g.alpha.iter_mut().zip(&mut g.beta) {
        ga.iter_mut().for_each(|a| *a += dtotal);
        for slot in gb.iter_mut() {
            for (b, &l) in slot.iter_mut().zip(&live) {
                if l {
                    *b -= w / total;
                }
            }
        }
    }
}

/// Squared distance of every slot's translation to `[-1, 1]² × ℝ`.
pub fn loss_translate_reg(slots: &[SlotParams]) -> f64 {
    slots
        .iter()
        .map(|s| {
            let t = s.transform.translation;
            let ex = (t[0].abs() - 1.0).max(0.0);
            let ey = (t[1].abs() - 1.0).max(0.0);
            ex * ex + ey * ey
        })
        .sum()
}

/// Gradient of [`loss_translate_reg`] for one slot's translation.
pub(crate) fn translate_reg_grad(t: [f64; 3]) -> [f64; 3] {
    let g = |v: f64| 2.0 * (v.abs() - 1.0).max(0.0) * v.signum();
    [g(t[0]), g(t[1]), 0.0]
}
