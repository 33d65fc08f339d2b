//! Expected Chamfer losses between a patch and its candidate reconstructions.

use super::CoverageMode;
use crate::error::{Error, Result};
use crate::geometry::{sq_dist, FeatureCloud};
use crate::model::{CandidateGrad, CandidateSet};
use crate::nn;

/// Guard for the conditional-distance sort key.
pub const ALPHA_FLOOR: f64 = 1e-8;

fn check_dims(c: &CandidateSet, x: &FeatureCloud) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyCloud("patch"));
    }
    if c.dim() != x.dim() {
        return Err(Error::DimMismatch {
            expected: x.dim(),
            got: c.dim(),
        });
    }
    Ok(())
}

/// Nearest reference point of every query; squared distances are
/// recomputed in double precision whatever the backend.
fn nearest(query: &FeatureCloud, reference: &FeatureCloud) -> Result<Vec<(f64, usize)>> {
    let res = nn::backend().nearest(query, reference)?;
    Ok(res
        .indices
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let j = j as usize;
            (sq_dist(query.point(i), reference.point(j)), j)
        })
        .collect())
}

/// Accuracy term: `(1/S) Σ_s Σ_k β_s^k d(clip(Y_s^k), X)`. Candidates with
/// no point inside the patch contribute nothing. With `grad`, `weight · ∂L`
/// is accumulated.
pub(crate) fn accuracy(c: &CandidateSet, x: &FeatureCloud, mut grad: Option<(&mut CandidateGrad, f64)>) -> Result<f64> {
    check_dims(c, x)?;
    let (s_count, k_count) = (c.num_slots(), c.num_prototypes());
    let norm = 1.0 / s_count as f64;
    let mut total = 0.0;
    for s in 0..s_count {
        for k in 0..k_count {
            let beta = c.slots[s].beta[k];
            let (cloud, kept) = c.loss_cloud(s, k, true);
            if cloud.is_empty() {
                continue;
            }
            let nn = nearest(&cloud, x)?;
            let d = nn.iter().map(|v| v.0).sum::<f64>() / cloud.len() as f64;
            total += beta * d;
            if let Some((g, w)) = grad.as_mut() {
                g.beta[s][k] += *w * norm * d;
                if beta == 0.0 {
                    continue;
                }
                let coef = *w * norm * beta * 2.0 / cloud.len() as f64;
                let mut dy = [0.0; 4];
                for (j, &(_, i)) in nn.iter().enumerate() {
                    let (y, xi) = (cloud.point(j), x.point(i));
                    for a in 0..y.len() {
                        dy[a] = coef * (y[a] - xi[a]);
                    }
                    g.add_loss_space(s, k, k_count, kept[j], &dy[..y.len()]);
                }
            }
        }
    }
    Ok(total * norm)
}

/// Distances from every patch point to every candidate, flattened as
/// `[(s * K + k) * N + i]`, with the index of the nearest candidate point.
struct DistanceTable {
    n: usize,
    dist: Vec<f64>,
    index: Vec<usize>,
    clouds: Vec<FeatureCloud>,
}

impl DistanceTable {
    fn build(c: &CandidateSet, x: &FeatureCloud) -> Result<Self> {
        let n = x.len();
        let pairs = c.num_slots() * c.num_prototypes();
        let mut table = DistanceTable {
            n,
            dist: Vec::with_capacity(pairs * n),
            index: Vec::with_capacity(pairs * n),
            clouds: Vec::with_capacity(pairs),
        };
        for s in 0..c.num_slots() {
            for k in 0..c.num_prototypes() {
                let (cloud, _) = c.loss_cloud(s, k, false);
                for (d, j) in nearest(x, &cloud)? {
                    table.dist.push(d);
                    table.index.push(j);
                }
                table.clouds.push(cloud);
            }
        }
        Ok(table)
    }

    #[inline]
    fn get(&self, pair: usize, i: usize) -> f64 {
        self.dist[pair * self.n + i]
    }
}

/// Per patch point derivatives, unscaled.
struct PointGrad {
    dd: Vec<f64>,
    dbeta: Vec<f64>,
    dalpha: Vec<f64>,
}

impl PointGrad {
    fn clear(&mut self) {
        self.dd.iter_mut().for_each(|v| *v = 0.0);
        self.dbeta.iter_mut().for_each(|v| *v = 0.0);
        self.dalpha.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Coverage term, the expected squared distance from a patch point to the
/// nearest activated reconstruction, averaged over the patch.
pub(crate) fn coverage(
    c: &CandidateSet,
    x: &FeatureCloud,
    mode: CoverageMode,
    mut grad: Option<(&mut CandidateGrad, f64)>,
) -> Result<f64> {
    check_dims(c, x)?;
    let table = DistanceTable::build(c, x)?;
    let n = x.len();
    let (s_count, k_count) = (c.num_slots(), c.num_prototypes());
    let mut pg = grad.is_some().then(|| PointGrad {
        dd: vec![0.0; s_count * k_count],
        dbeta: vec![0.0; s_count * k_count],
        dalpha: vec![0.0; s_count],
    });
    let mut sweep = ExactSweep::new(c);
    let mut total = 0.0;
    for i in 0..n {
        if let Some(pg) = pg.as_mut() {
            pg.clear();
        }
        total += match mode {
            CoverageMode::Exact => sweep.point(c, &table, i, pg.as_mut()),
            CoverageMode::SlotSorted => slot_sorted_point(c, &table, i, pg.as_mut()),
        };
        let (Some((g, w)), Some(pg)) = (grad.as_mut(), pg.as_ref()) else {
            continue;
        };
        let scale = *w / n as f64;
        for s in 0..s_count {
            g.alpha[s] += scale * pg.dalpha[s];
            for k in 0..k_count {
                let pair = s * k_count + k;
                g.beta[s][k] += scale * pg.dbeta[pair];
                let dval = pg.dd[pair];
                if dval == 0.0 {
                    continue;
                }
                let j = table.index[pair * n + i];
                let (y, xi) = (table.clouds[pair].point(j), x.point(i));
                let mut dy = [0.0; 4];
                for a in 0..y.len() {
                    dy[a] = scale * dval * 2.0 * (y[a] - xi[a]);
                }
                g.add_loss_space(s, k, k_count, j, &dy[..y.len()]);
            }
        }
    }
    Ok(total / n as f64)
}

/// Closed form with slots sorted by their conditional expected distance
/// `Δ(x, s) = A(x, s) / α_s`, where `A(x, s) = Σ_k β_s^k d(x, Y_s^k)`.
/// The sort order is treated as constant when differentiating.
fn slot_sorted_point(c: &CandidateSet, t: &DistanceTable, i: usize, pg: Option<&mut PointGrad>) -> f64 {
    let s_count = c.num_slots();
    let k_count = c.num_prototypes();
    let alpha = |s: usize| c.slots[s].alpha;
    let a: Vec<f64> = (0..s_count)
        .map(|s| (0..k_count).map(|k| c.slots[s].beta[k] * t.get(s * k_count + k, i)).sum())
        .collect();
    let key = |s: usize| a[s] / alpha(s).max(ALPHA_FLOOR);
    let mut order: Vec<usize> = (0..s_count).collect();
    order.sort_by(|&p, &q| key(p).total_cmp(&key(q)).then(p.cmp(&q)));
    let mut survive = 1.0;
    let mut prefix = Vec::with_capacity(s_count);
    let mut value = 0.0;
    for &s in &order {
        prefix.push(survive);
        value += a[s] * survive;
        survive *= 1.0 - alpha(s);
    }
    let Some(pg) = pg else {
        return value;
    };
    // G_r: derivative of the tail Σ_{j>r} A_j Π_{r<l<j} (1 - α_l).
    let mut tail = 0.0;
    for r in (0..s_count).rev() {
        let s = order[r];
        pg.dalpha[s] = -prefix[r] * tail;
        tail = a[s] + (1.0 - alpha(s)) * tail;
        for k in 0..k_count {
            let pair = s * k_count + k;
            pg.dbeta[pair] = prefix[r] * t.get(pair, i);
            pg.dd[pair] = prefix[r] * c.slots[s].beta[k];
        }
    }
    value
}

/// Exact expectation over activations and prototype draws.
///
/// Every slot independently yields one distance: `d(x, Y_s^k)` with
/// probability `β_s^k`, or nothing with probability `1 - α_s`. Sweeping the
/// `(s, k)` pairs by increasing distance, pair `j` is the minimum when it is
/// drawn and every other slot yields something farther or nothing, which
/// has probability `β_j Π_{r ≠ s_j} q_r` with `q_r` one minus the mass of
/// slot `r` already swept. Ties are swept in pair order.
struct ExactSweep {
    order: Vec<usize>,
    /// `q` before each pair of the sweep, `[rank * S + slot]`.
    snapshots: Vec<f64>,
    excl: Vec<f64>,
    reverse: Vec<f64>,
    prefix: Vec<f64>,
    q: Vec<f64>,
}

impl ExactSweep {
    fn new(c: &CandidateSet) -> Self {
        let pairs = c.num_slots() * c.num_prototypes();
        let s_count = c.num_slots();
        ExactSweep {
            order: (0..pairs).collect(),
            snapshots: vec![0.0; pairs * s_count],
            excl: vec![0.0; pairs],
            reverse: vec![0.0; s_count],
            prefix: vec![0.0; s_count + 1],
            q: vec![0.0; s_count],
        }
    }

    fn point(&mut self, c: &CandidateSet, t: &DistanceTable, i: usize, pg: Option<&mut PointGrad>) -> f64 {
        let s_count = c.num_slots();
        let k_count = c.num_prototypes();
        let beta = |pair: usize| c.slots[pair / k_count].beta[pair % k_count];
        let pairs = self.order.len();
        for (r, o) in self.order.iter_mut().enumerate() {
            *o = r;
        }
        self.order.sort_by(|&p, &q| t.get(p, i).total_cmp(&t.get(q, i)).then(p.cmp(&q)));
        self.q.iter_mut().for_each(|v| *v = 1.0);
        let mut value = 0.0;
        for rank in 0..pairs {
            let pair = self.order[rank];
            let s = pair / k_count;
            self.snapshots[rank * s_count..(rank + 1) * s_count].copy_from_slice(&self.q);
            let mut excl = 1.0;
            for (r, qr) in self.q.iter().enumerate() {
                if r != s {
                    excl *= qr;
                }
            }
            self.excl[rank] = excl;
            value += t.get(pair, i) * beta(pair) * excl;
            self.q[s] -= beta(pair);
        }
        let Some(pg) = pg else {
            return value;
        };
        // Reverse sweep. `reverse[r]` accumulates, over the pairs already
        // visited, ∂(their terms)/∂q_r; a pair's β enters every later q of
        // its own slot with a minus sign.
        self.reverse.iter_mut().for_each(|v| *v = 0.0);
        for rank in (0..pairs).rev() {
            let pair = self.order[rank];
            let s = pair / k_count;
            let (d, b) = (t.get(pair, i), beta(pair));
            pg.dd[pair] = b * self.excl[rank];
            pg.dbeta[pair] = d * self.excl[rank] - self.reverse[s];
            let term = d * b;
            if term == 0.0 {
                continue;
            }
            let q = &self.snapshots[rank * s_count..(rank + 1) * s_count];
            self.prefix[0] = 1.0;
            for r in 0..s_count {
                self.prefix[r + 1] = self.prefix[r] * if r == s { 1.0 } else { q[r] };
            }
            let mut suffix = 1.0;
            for r in (0..s_count).rev() {
                if r != s {
                    self.reverse[r] += term * self.prefix[r] * suffix;
                    suffix *= q[r];
                }
            }
        }
        value
    }
}
