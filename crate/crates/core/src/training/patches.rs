use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, PointCloud};

/// Patches with fewer points are redrawn.
pub const MIN_PATCH_POINTS: usize = 32;
/// Consecutive rejected draws before sampling gives up.
pub const MAX_REJECTIONS: usize = 100;

/// Placement of a patch in the scene. Horizontal coordinates map the square
/// onto `[-1, 1]²`; z uses the same factor and puts the lowest patch point
/// at `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchFrame {
    pub center: [f64; 2],
    pub half_size: f64,
    pub z_min: f64,
}

impl PatchFrame {
    pub fn to_patch(&self, p: &[f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.center[0]) / self.half_size,
            (p[1] - self.center[1]) / self.half_size,
            (p[2] - self.z_min) / self.half_size - 1.0,
        ]
    }

    pub fn to_scene(&self, p: &[f64; 3]) -> [f64; 3] {
        [
            p[0] * self.half_size + self.center[0],
            p[1] * self.half_size + self.center[1],
            (p[2] + 1.0) * self.half_size + self.z_min,
        ]
    }
}

/// A normalized crop together with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub cloud: PointCloud,
    pub frame: PatchFrame,
    /// Scene index of every patch point.
    pub indices: Vec<usize>,
}

fn normalize(scene: &PointCloud, indices: Vec<usize>, center: [f64; 2], half_size: f64) -> Patch {
    let mut cloud = scene.select(&indices);
    let z_min = cloud.positions.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    let frame = PatchFrame { center, half_size, z_min };
    for p in &mut cloud.positions {
        *p = frame.to_patch(p);
    }
    cloud.frame = Frame::PatchNormalized;
    Patch { cloud, frame, indices }
}

/// A square patch of side `size_m` at a uniformly random position inside
/// the scene's bounding rectangle, subsampled to at most `max_points`.
pub fn sample_patch(scene: &PointCloud, size_m: f64, max_points: usize, rng: &mut impl Rng) -> Result<Patch> {
    if !(size_m > 0.0) {
        return Err(Error::ParameterDomain(format!("patch size {size_m} must be positive")));
    }
    let (lo, hi) = scene.bounds().ok_or(Error::EmptyCloud("scene"))?;
    if hi[0] - lo[0] < size_m || hi[1] - lo[1] < size_m {
        return Err(Error::ParameterDomain(format!(
            "scene extent {:.3} × {:.3} is smaller than the patch size {size_m}",
            hi[0] - lo[0],
            hi[1] - lo[1]
        )));
    }
    let half = 0.5 * size_m;
    for _ in 0..MAX_REJECTIONS {
        let center = [rng.gen_range(lo[0] + half..=hi[0] - half), rng.gen_range(lo[1] + half..=hi[1] - half)];
        let mut inside: Vec<usize> = scene
            .positions
            .iter()
            .enumerate()
            .filter(|(_, p)| (p[0] - center[0]).abs() <= half && (p[1] - center[1]).abs() <= half)
            .map(|(i, _)| i)
            .collect();
        if inside.len() < MIN_PATCH_POINTS {
            continue;
        }
        if inside.len() > max_points {
            let mut keep = index::sample(rng, inside.len(), max_points).into_vec();
            keep.sort_unstable();
            inside = keep.into_iter().map(|i| inside[i]).collect();
        }
        return Ok(normalize(scene, inside, center, half));
    }
    Err(Error::Infeasible(format!(
        "{MAX_REJECTIONS} consecutive patches held fewer than {MIN_PATCH_POINTS} points"
    )))
}

/// Tile index of every point on the non-overlapping grid anchored at the
/// scene's minimum corner; points on the far edge join the last tile.
pub fn grid_cells(scene: &PointCloud, size_m: f64) -> Result<(Vec<[usize; 2]>, [usize; 2])> {
    if !(size_m > 0.0) {
        return Err(Error::ParameterDomain(format!("patch size {size_m} must be positive")));
    }
    let Some((lo, hi)) = scene.bounds() else {
        return Ok((Vec::new(), [0, 0]));
    };
    let dims = [0, 1].map(|a| (((hi[a] - lo[a]) / size_m).ceil() as usize).max(1));
    let cells = scene
        .positions
        .iter()
        .map(|p| [0, 1].map(|a| (((p[a] - lo[a]) / size_m).floor() as usize).min(dims[a] - 1)))
        .collect();
    Ok((cells, dims))
}

/// Every non-empty tile of the inference grid, in row-major tile order.
/// Each scene point belongs to exactly one patch.
pub fn inference_grid(scene: &PointCloud, size_m: f64) -> Result<Vec<Patch>> {
    let (cells, dims) = grid_cells(scene, size_m)?;
    let Some((lo, _)) = scene.bounds() else {
        return Ok(Vec::new());
    };
    let mut members = vec![Vec::new(); dims[0] * dims[1]];
    for (i, c) in cells.iter().enumerate() {
        members[c[1] * dims[0] + c[0]].push(i);
    }
    let half = 0.5 * size_m;
    Ok(members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(t, m)| {
            let (cx, cy) = (t % dims[0], t / dims[0]);
            let center = [lo[0] + (cx as f64 + 0.5) * size_m, lo[1] + (cy as f64 + 0.5) * size_m];
            normalize(scene, m, center, half)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_scene(n: usize, w: f64, h: f64, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| [rng.gen_range(0.0..w), rng.gen_range(0.0..h), rng.gen_range(0.0..2.0)])
            .collect();
        let mut c = PointCloud::from_positions(pts, Frame::Scene);
        c.class_label = Some((0..n).map(|i| (i % 3) as i32).collect());
        c
    }

    #[test]
    fn frame_round_trip() {
        let f = PatchFrame {
            center: [10.0, -4.0],
            half_size: 2.5,
            z_min: 3.0,
        };
        let p = [11.0, -5.0, 4.0];
        let q = f.to_patch(&p);
        assert_eq!(q, [0.4, -0.4, -0.6]);
        let r = f.to_scene(&q);
        for a in 0..3 {
            assert!((r[a] - p[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn patches_are_normalized_and_deterministic() {
        let scene = uniform_scene(5000, 20.0, 20.0, 0);
        let a = sample_patch(&scene, 4.0, 100_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_patch(&scene, 4.0, 100_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.cloud.positions.iter().all(|p| p[0].abs() <= 1.0 && p[1].abs() <= 1.0));
        let zmin = a.cloud.positions.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
        assert_eq!(zmin, -1.0);
        assert_eq!(a.cloud.frame, Frame::PatchNormalized);
    }

    #[test]
    fn subsampling_caps_the_point_count() {
        let scene = uniform_scene(5000, 10.0, 10.0, 2);
        let p = sample_patch(&scene, 5.0, 100, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(p.cloud.len(), 100);
        let mut sorted = p.indices.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
    }

    #[test]
    fn small_or_sparse_scenes_are_rejected() {
        let scene = uniform_scene(1000, 3.0, 30.0, 4);
        assert!(matches!(
            sample_patch(&scene, 4.0, 100, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::ParameterDomain(_))
        ));
        let sparse = uniform_scene(10, 30.0, 30.0, 5);
        assert!(matches!(
            sample_patch(&sparse, 4.0, 100, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn grid_partitions_the_scene() {
        let scene = uniform_scene(3000, 9.5, 6.1, 6);
        let patches = inference_grid(&scene, 2.0).unwrap();
        let mut seen = vec![0usize; scene.len()];
        for p in &patches {
            for &i in &p.indices {
                seen[i] += 1;
            }
            assert!(p.cloud.positions.iter().all(|q| q[0].abs() <= 1.0 + 1e-12 && q[1].abs() <= 1.0 + 1e-12));
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn two_by_one_scene_gives_two_patches() {
        let pts = vec![[0.0, 0.0, 0.0], [4.0, 2.0, 0.0], [1.0, 1.0, 0.0], [3.0, 1.0, 1.0]];
        let scene = PointCloud::from_positions(pts, Frame::Scene);
        let patches = inference_grid(&scene, 2.0).unwrap();
        assert_eq!(patches.len(), 2);
        assert_eq!(patches[0].indices, vec![0, 2]);
        assert_eq!(patches[1].indices, vec![1, 3]);
    }
}
