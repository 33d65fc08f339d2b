//! Point-cloud containers, affine transforms, voxelization and Chamfer
//! distances.
//!
//! Two coordinate conventions are used throughout the crate:
//!
//! * the **patch frame**: a square crop of a scene, centred horizontally and
//!   scaled so that the crop maps onto `[-1, 1]²`. The vertical axis shares
//!   the horizontal scale factor and starts at `-1` at the lowest point of
//!   the crop, so `z ∈ [-1, ∞)`.
//! * the **loss space**: the patch cube `[-1, 1]³` mapped onto `[0, 1]³`,
//!   optionally followed by the reflectance scaled to `[0, 0.1]` as a fourth
//!   coordinate. Chamfer-based losses are evaluated there.

mod chamfer;
mod transform;
mod voxel;

pub use chamfer::{chamfer_asym, chamfer_asym_with, chamfer_sym, chamfer_sym_with};
pub use transform::{apply_transform, apply_transform_with, AffineTransform, TransformBounds, TransformGrad};
pub use voxel::{voxelize, VoxelGrid};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest coordinate used for the reflectance axis of the loss space.
pub const INTENSITY_LOSS_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Frame {
    #[default]
    Scene,
    PatchNormalized,
}

/// N points with optional per-point channels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    /// Reflectance in `[0, 1]`.
    pub intensity: Option<Vec<f64>>,
    pub color: Option<Vec<[f64; 3]>>,
    /// `-1` marks unlabeled points.
    pub class_label: Option<Vec<i32>>,
    /// `-1` marks points that belong to no instance.
    pub instance_label: Option<Vec<i64>>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn from_positions(positions: Vec<[f64; 3]>, frame: Frame) -> Self {
        PointCloud {
            positions,
            frame,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks that every optional channel has one entry per point.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let check = |channel: &'static str, got: Option<usize>| match got {
            Some(got) if got != n => Err(Error::ChannelLength {
                channel,
                expected: n,
                got,
            }),
            _ => Ok(()),
        };
        check("intensity", self.intensity.as_ref().map(Vec::len))?;
        check("color", self.color.as_ref().map(Vec::len))?;
        check("class", self.class_label.as_ref().map(Vec::len))?;
        check("instance", self.instance_label.as_ref().map(Vec::len))?;
        if let Some(i) = &self.intensity {
            if let Some(bad) = i.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::ParameterDomain(format!(
                    "intensity {bad} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Copies the points at `indices`, channels included, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        fn pick<T: Copy>(v: &Option<Vec<T>>, idx: &[usize]) -> Option<Vec<T>> {
            v.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect())
        }
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            intensity: pick(&self.intensity, indices),
            color: pick(&self.color, indices),
            class_label: pick(&self.class_label, indices),
            instance_label: pick(&self.instance_label, indices),
            frame: self.frame,
        }
    }

    /// Axis-aligned bounds `(min, max)`; `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(mut lo, mut hi), p| {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
            (lo, hi)
        }))
    }
}

/// Dense row-major feature points (3 or 4 coordinates each).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureCloud {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureCloud {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::ParameterDomain(format!(
                "{} coordinates cannot form points of dimension {dim}",
                data.len()
            )));
        }
        Ok(FeatureCloud { dim, data })
    }

    pub fn with_capacity(dim: usize, points: usize) -> Self {
        FeatureCloud {
            dim,
            data: Vec::with_capacity(dim * points),
        }
    }

    pub fn from_points<const D: usize>(points: &[[f64; D]]) -> Self {
        FeatureCloud {
            dim: D,
            data: points.iter().flatten().copied().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, p: &[f64]) {
        debug_assert_eq!(p.len(), self.dim);
        self.data.extend_from_slice(p);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }
}

/// Squared Euclidean distance with a fixed summation order, shared by every
/// nearest-neighbour routine so that their results agree bit for bit.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Maps a patch-frame position to loss-space coordinates.
#[inline]
pub fn position_to_loss_space(p: &[f64; 3]) -> [f64; 3] {
    [(p[0] + 1.0) * 0.5, (p[1] + 1.0) * 0.5, (p[2] + 1.0) * 0.5]
}

/// Maps a patch-normalized cloud into the loss space.
///
/// The patch cube `[-1, 1]³` lands on `[0, 1]³` and the reflectance is
/// appended scaled to `[0, 0.1]`. Without an intensity channel the result is
/// three-dimensional.
pub fn to_loss_space(p: &PointCloud) -> Result<FeatureCloud> {
    if p.frame != Frame::PatchNormalized {
        return Err(Error::ParameterDomain(
            "loss space is defined for patch-normalized clouds only".into(),
        ));
    }
    p.validate()?;
    let dim = if p.intensity.is_some() { 4 } else { 3 };
    let mut out = FeatureCloud::with_capacity(dim, p.len());
    for (i, pos) in p.positions.iter().enumerate() {
        let q = position_to_loss_space(pos);
        match &p.intensity {
            Some(int) => out.push(&[q[0], q[1], q[2], int[i] * INTENSITY_LOSS_SCALE]),
            None => out.push(&q),
        }
    }
    Ok(out)
}

/// True when the horizontal coordinates lie in the closed square `[-1, 1]²`.
#[inline]
pub fn within_extent(p: &[f64; 3]) -> bool {
    (-1.0..=1.0).contains(&p[0]) && (-1.0..=1.0).contains(&p[1])
}

/// Keeps the points whose horizontal coordinates fall inside the patch.
pub fn clip_to_extent(y: &PointCloud) -> PointCloud {
    let keep: Vec<usize> = (0..y.len()).filter(|&i| within_extent(&y.positions[i])).collect();
    y.select(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud::from_positions(points, Frame::PatchNormalized)
    }

    #[test]
    fn loss_space_maps_intensity_and_corners() {
        let mut p = patch(vec![[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]);
        p.intensity = Some(vec![0.0, 1.0, 0.5]);
        let ls = to_loss_space(&p).unwrap();
        assert_eq!(ls.dim(), 4);
        assert_eq!(ls.point(0), &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(ls.point(1), &[1.0, 1.0, 1.0, 0.1]);
        assert_eq!(ls.point(2), &[0.5, 0.5, 0.5, 0.05]);
    }

    #[test]
    fn loss_space_without_intensity_is_3d() {
        let ls = to_loss_space(&patch(vec![[0.0; 3]])).unwrap();
        assert_eq!(ls.dim(), 3);
    }

    #[test]
    fn loss_space_rejects_scene_frame() {
        let p = PointCloud::from_positions(vec![[0.0; 3]], Frame::Scene);
        assert!(to_loss_space(&p).is_err());
    }

    #[test]
    fn clip_keeps_boundary_and_drops_outside() {
        let p = patch(vec![[1.0, -1.0, 5.0], [1.5, 0.0, 0.0], [0.0, -1.0000001, 0.0], [0.2, 0.3, -3.0]]);
        let c = clip_to_extent(&p);
        assert_eq!(c.positions, vec![[1.0, -1.0, 5.0], [0.2, 0.3, -3.0]]);
        assert_eq!(clip_to_extent(&c), c);
    }

    #[test]
    fn validate_catches_channel_length() {
        let mut p = patch(vec![[0.0; 3]; 3]);
        p.class_label = Some(vec![1, 2]);
        assert!(matches!(p.validate(), Err(Error::ChannelLength { channel: "class", .. })));
    }

    #[test]
    fn clip_count_matches_predicate_count() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
            .collect();
        let expected = pts
            .iter()
            .filter(|p| p[0].abs() <= 1.0 && p[1].abs() <= 1.0)
            .count();
        assert_eq!(clip_to_extent(&patch(pts)).len(), expected);
    }
}
