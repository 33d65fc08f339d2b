//! Everything downstream of a trained model: decomposing a scene on the
//! inference grid, labelling prototypes, segmentation, counting, prototype
//! selection and the k-means baseline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chamfer_sym, position_to_loss_space, to_loss_space, within_extent, FeatureCloud, PointCloud, INTENSITY_LOSS_SCALE};
use crate::model::{select_active, ActiveSlot, Model};
use crate::nn;
use crate::training::{inference_grid, PatchFrame};

mod kmeans;
mod selection;

pub use kmeans::{kmeans, kmeans_baseline, KmeansFeatures, KmeansResult};
pub use selection::{grid_reconstruction_loss, select_prototypes, SelectionBaseline, SelectionReport, SelectionStep};

/// Decomposition of one inference tile.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchResult {
    pub frame: PatchFrame,
    /// Scene index of every patch point.
    pub indices: Vec<usize>,
    pub slots: Vec<ActiveSlot>,
    /// Owner `(active slot, prototype point)` of every reconstruction point.
    /// Only points inside the patch extent make up the reconstruction.
    pub recon_owner: Vec<(usize, usize)>,
    /// Loss-space image of the reconstruction.
    pub recon: FeatureCloud,
    /// Nearest reconstruction point of every patch point, as an index into
    /// `recon_owner`; empty when the decomposition is.
    pub assignment: Vec<usize>,
    /// Symmetric Chamfer between the patch and its reconstruction.
    pub chamfer: Option<f64>,
}

impl PatchResult {
    pub fn is_empty(&self) -> bool {
        self.recon_owner.is_empty()
    }
}

/// Per-tile decompositions of a whole scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub patches: Vec<PatchResult>,
    pub num_points: usize,
    pub num_prototypes: usize,
    pub points_per_prototype: usize,
    pub num_slots: usize,
}

impl Decomposition {
    /// For every scene point, `(patch, active slot, prototype point)` of
    /// its nearest reconstruction point.
    pub fn point_owners(&self) -> Vec<Option<(usize, usize, usize)>> {
        let mut out = vec![None; self.num_points];
        for (pi, p) in self.patches.iter().enumerate() {
            for (&scene_i, &r) in p.indices.iter().zip(&p.assignment) {
                let (s, j) = p.recon_owner[r];
                out[scene_i] = Some((pi, s, j));
            }
        }
        out
    }

    /// Mean symmetric Chamfer over the tiles with a non-empty
    /// reconstruction.
    pub fn mean_chamfer(&self) -> Option<f64> {
        let v: Vec<f64> = self.patches.iter().filter_map(|p| p.chamfer).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn empty_patches(&self) -> usize {
        self.patches.iter().filter(|p| p.is_empty()).count()
    }
}

/// Loss-space image of the in-extent points of the active slots.
fn reconstruction_cloud(slots: &[ActiveSlot], dim: usize) -> (FeatureCloud, Vec<(usize, usize)>) {
    let mut cloud = FeatureCloud::with_capacity(dim, 0);
    let mut owner = Vec::new();
    for (si, slot) in slots.iter().enumerate() {
        for (j, p) in slot.points.iter().enumerate() {
            if !within_extent(p) {
                continue;
            }
            let q = position_to_loss_space(p);
            match slot.intensity {
                Some(i) if dim == 4 => cloud.push(&[q[0], q[1], q[2], i * INTENSITY_LOSS_SCALE]),
                _ => cloud.push(&q),
            }
            owner.push((si, j));
        }
    }
    (cloud, owner)
}

/// Mean symmetric Chamfer between the tiles of `scene` and a reference
/// reconstruction cut along the same tiles, measured like
/// [`Decomposition::mean_chamfer`]. The intensity channel is compared when
/// `with_intensity` is set and both clouds carry it.
pub fn reference_chamfer(scene: &PointCloud, reference: &PointCloud, patch_size: f64, with_intensity: bool) -> Result<Option<f64>> {
    let use_int = with_intensity && scene.intensity.is_some() && reference.intensity.is_some();
    let mut sum = 0.0;
    let mut n = 0usize;
    for tile in inference_grid(scene, patch_size)? {
        let mut x = tile.cloud;
        if !use_int {
            x.intensity = None;
        }
        let input = to_loss_space(&x)?;
        let mut recon = FeatureCloud::with_capacity(input.dim(), 0);
        for (i, p) in reference.positions.iter().enumerate() {
            let q = tile.frame.to_patch(p);
            if !within_extent(&q) {
                continue;
            }
            let q = position_to_loss_space(&q);
            match reference.intensity.as_ref().filter(|_| use_int) {
                Some(v) => recon.push(&[q[0], q[1], q[2], v[i] * INTENSITY_LOSS_SCALE]),
                None => recon.push(&q),
            }
        }
        if !recon.is_empty() {
            sum += chamfer_sym(&input, &recon)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Runs the model on every tile of the inference grid.
pub fn decompose(model: &Model, scene: &PointCloud, patch_size: f64) -> Result<Decomposition> {
    let backend = nn::backend();
    let mut patches = Vec::new();
    for tile in inference_grid(scene, patch_size)? {
        let x = model.prepare_input(tile.cloud)?;
        let slots = select_active(&model.reconstruct(&x)?).slots;
        let input = to_loss_space(&x)?;
        let (recon, recon_owner) = reconstruction_cloud(&slots, input.dim());
        let (assignment, chamfer) = if recon.is_empty() {
            (Vec::new(), None)
        } else {
            let nn = backend.nearest(&input, &recon)?;
            let assignment = nn.indices.iter().map(|&i| i as usize).collect();
            (assignment, Some(chamfer_sym(&input, &recon)?))
        };
        patches.push(PatchResult {
            frame: tile.frame,
            indices: tile.indices,
            slots,
            recon_owner,
            recon,
            assignment,
            chamfer,
        });
    }
    Ok(Decomposition {
        patches,
        num_points: scene.len(),
        num_prototypes: model.num_prototypes(),
        points_per_prototype: model.config.points_per_prototype,
        num_slots: model.num_slots(),
    })
}

/// Class of every prototype point, `-1` for points that never voted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeLabels {
    pub labels: Vec<Vec<i32>>,
    /// Vote histogram of every prototype point.
    pub votes: Vec<Vec<BTreeMap<i32, u64>>>,
    /// Number of classes present in the labelled scene.
    pub num_classes: usize,
}

impl PrototypeLabels {
    /// Majority class over the labelled points of prototype `k`, ties to
    /// the lower class id.
    pub fn dominant_class(&self, k: usize) -> Option<i32> {
        let mut count: BTreeMap<i32, usize> = BTreeMap::new();
        for &c in self.labels[k].iter().filter(|&&c| c >= 0) {
            *count.entry(c).or_default() += 1;
        }
        majority(&count)
    }

    /// Prototypes whose dominant class is `class`.
    pub fn prototypes_of_class(&self, class: i32) -> Vec<usize> {
        (0..self.labels.len()).filter(|&k| self.dominant_class(k) == Some(class)).collect()
    }

    /// Mean entropy of the vote distributions of the voted prototype
    /// points, normalised by the log of the number of scene classes.
    pub fn mean_normalized_entropy(&self) -> f64 {
        if self.num_classes < 2 {
            return 0.0;
        }
        let norm = (self.num_classes as f64).ln();
        let mut total = 0.0;
        let mut n = 0usize;
        for h in self.votes.iter().flatten().filter(|h| !h.is_empty()) {
            let sum: u64 = h.values().sum();
            let ent: f64 = h
                .values()
                .map(|&c| {
                    let p = c as f64 / sum as f64;
                    -p * p.ln()
                })
                .sum();
            total += ent / norm;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }
}

fn majority<T: Ord + Copy, N: Ord + Copy>(count: &BTreeMap<T, N>) -> Option<T> {
    let mut best: Option<(T, N)> = None;
    for (&c, &n) in count {
        if best.map_or(true, |(_, bn)| n > bn) {
            best = Some((c, n));
        }
    }
    best.map(|(c, _)| c)
}

/// Every in-extent transformed prototype point votes for the class of its
/// nearest labelled input point; each prototype point takes the majority.
pub fn label_prototypes(decomp: &Decomposition, scene: &PointCloud) -> Result<PrototypeLabels> {
    let classes = scene
        .class_label
        .as_ref()
        .ok_or_else(|| Error::ParameterDomain("the scene has no class labels".into()))?;
    let num_classes = classes.iter().filter(|&&c| c >= 0).collect::<BTreeSet<_>>().len();
    if num_classes == 0 {
        return Err(Error::ParameterDomain("the scene has no labelled points".into()));
    }
    let (k_count, p_count) = (decomp.num_prototypes, decomp.points_per_prototype);
    let mut votes = vec![vec![BTreeMap::<i32, u64>::new(); p_count]; k_count];
    let backend = nn::backend();
    for patch in decomp.patches.iter().filter(|p| !p.is_empty()) {
        let labelled: Vec<usize> = (0..patch.indices.len()).filter(|&i| classes[patch.indices[i]] >= 0).collect();
        if labelled.is_empty() {
            continue;
        }
        let dim = patch.recon.dim();
        let mut input = FeatureCloud::with_capacity(dim, labelled.len());
        let positions = patch_positions(scene, patch);
        for &i in &labelled {
            let q = position_to_loss_space(&positions[i]);
            match (&scene.intensity, dim) {
                (Some(int), 4) => input.push(&[q[0], q[1], q[2], int[patch.indices[i]] * INTENSITY_LOSS_SCALE]),
                _ => input.push(&q),
            }
        }
        let nn = backend.nearest(&patch.recon, &input)?;
        for (r, &near) in nn.indices.iter().enumerate() {
            let (s, j) = patch.recon_owner[r];
            let k = patch.slots[s].prototype;
            let class = classes[patch.indices[labelled[near as usize]]];
            *votes[k][j].entry(class).or_default() += 1;
        }
    }
    let labels = votes
        .iter()
        .map(|pts| pts.iter().map(|h| majority(h).unwrap_or(-1)).collect())
        .collect();
    Ok(PrototypeLabels {
        labels,
        votes,
        num_classes,
    })
}

fn patch_positions(scene: &PointCloud, patch: &PatchResult) -> Vec<[f64; 3]> {
    patch.indices.iter().map(|&i| patch.frame.to_patch(&scene.positions[i])).collect()
}

/// Class of every scene point from its nearest reconstruction point; `-1`
/// for points of tiles with an empty decomposition.
pub fn semantic_segmentation(decomp: &Decomposition, labels: &PrototypeLabels) -> Vec<i32> {
    decomp
        .point_owners()
        .into_iter()
        .map(|o| match o {
            Some((p, s, j)) => labels.labels[decomp.patches[p].slots[s].prototype][j],
            None => -1,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// Percent.
    pub miou: f64,
    /// Percent, for every class present in the ground truth.
    pub per_class: BTreeMap<i32, f64>,
}

/// Class-averaged intersection over union, in percent, over the classes
/// present in `gt`. Points with `gt < 0` are ignored.
pub fn miou(pred: &[i32], gt: &[i32]) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    let mut inter: BTreeMap<i32, u64> = BTreeMap::new();
    let mut gt_n: BTreeMap<i32, u64> = BTreeMap::new();
    let mut pred_n: BTreeMap<i32, u64> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        if g < 0 {
            continue;
        }
        *gt_n.entry(g).or_default() += 1;
        *pred_n.entry(p).or_default() += 1;
        if p == g {
            *inter.entry(g).or_default() += 1;
        }
    }
    if gt_n.is_empty() {
        return Err(Error::ParameterDomain("no labelled points".into()));
    }
    let per_class: BTreeMap<i32, f64> = gt_n
        .iter()
        .map(|(&c, &g)| {
            let i = inter.get(&c).copied().unwrap_or(0);
            let union = g + pred_n.get(&c).copied().unwrap_or(0) - i;
            (c, 100.0 * i as f64 / union as f64)
        })
        .collect();
    let miou = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MiouReport { miou, per_class })
}

/// Instance id of every scene point: points whose nearest reconstruction
/// point belongs to an active slot choosing one of `targets` get the id
/// `patch * S + slot`; all others get `-1`.
pub fn instance_segmentation(decomp: &Decomposition, targets: &[usize]) -> Vec<i64> {
    decomp
        .point_owners()
        .into_iter()
        .map(|o| match o {
            Some((p, s, _)) => {
                let slot = &decomp.patches[p].slots[s];
                if targets.contains(&slot.prototype) {
                    (p * decomp.num_slots + slot.slot) as i64
                } else {
                    -1
                }
            }
            None => -1,
        })
        .collect()
}

/// Centroid of every instance id `>= 0`.
pub fn instance_centroids(scene: &PointCloud, ids: &[i64]) -> BTreeMap<i64, [f64; 3]> {
    let mut acc: BTreeMap<i64, ([f64; 3], usize)> = BTreeMap::new();
    for (p, &id) in scene.positions.iter().zip(ids) {
        if id < 0 {
            continue;
        }
        let e = acc.entry(id).or_insert(([0.0; 3], 0));
        for a in 0..3 {
            e.0[a] += p[a];
        }
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(id, (s, n))| (id, s.map(|v| v / n as f64)))
        .collect()
}

/// Mean relative counting error in percent. Zones with a zero true count
/// are skipped with a warning.
pub fn count_mre(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (z, (&p, &t)) in predicted.iter().zip(truth).enumerate() {
        if t == 0 {
            log::warn!("zone {z} has no true instances and is left out of the counting error");
            continue;
        }
        total += (p as f64 - t as f64).abs() / t as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::ParameterDomain("every zone has a zero true count".into()));
    }
    Ok(100.0 * total / n as f64)
}

/// The `evaluate` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub chamfer_sym: Option<f64>,
    pub miou: Option<f64>,
    pub per_class_iou: BTreeMap<i32, f64>,
    /// Instances per prototype over the whole scene.
    pub instance_counts: BTreeMap<usize, usize>,
    pub selection_report: Option<SelectionReport>,
    pub label_entropy: Option<f64>,
    pub num_patches: usize,
    pub empty_patches: usize,
}

/// Number of (tile, slot) instances choosing each prototype.
pub fn instance_counts(decomp: &Decomposition) -> BTreeMap<usize, usize> {
    let mut out: BTreeMap<usize, usize> = (0..decomp.num_prototypes).map(|k| (k, 0)).collect();
    for p in &decomp.patches {
        let used: BTreeSet<usize> = p.assignment.iter().map(|&r| p.recon_owner[r].0).collect();
        for s in used {
            *out.entry(p.slots[s].prototype).or_default() += 1;
        }
    }
    out
}

/// Chamfer, segmentation and counts of a decomposition.
pub fn evaluate(decomp: &Decomposition, scene: &PointCloud) -> Result<(EvaluationReport, Option<PrototypeLabels>)> {
    let mut report = EvaluationReport {
        chamfer_sym: decomp.mean_chamfer(),
        miou: None,
        per_class_iou: BTreeMap::new(),
        instance_counts: instance_counts(decomp),
        selection_report: None,
        label_entropy: None,
        num_patches: decomp.patches.len(),
        empty_patches: decomp.empty_patches(),
    };
    let labelled = scene.class_label.as_ref().is_some_and(|c| c.iter().any(|&v| v >= 0));
    if !labelled {
        return Ok((report, None));
    }
    let labels = label_prototypes(decomp, scene)?;
    let pred = semantic_segmentation(decomp, &labels);
    let m = miou(&pred, scene.class_label.as_ref().expect("checked above"))?;
    report.miou = Some(m.miou);
    report.per_class_iou = m.per_class;
    report.label_entropy = Some(labels.mean_normalized_entropy());
    Ok((report, Some(labels)))
}

#[cfg(test)]
mod tests;
