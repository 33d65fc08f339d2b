use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::geometry::Frame;
use crate::geometry::PointCloud;

/// Initial reflectance of every prototype.
pub const INITIAL_INTENSITY: f64 = 0.5;

/// K learnable point clouds with their intensity and scale parameters.
///
/// The effective shape of prototype `k` is `points[k] ⊙ exp(base_scale[k] +
/// aniso_scale[k])`, applied before any slot transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub points: Vec<Vec<[f64; 3]>>,
    pub intensity: Vec<f64>,
    /// Isotropic log-scale per prototype.
    pub base_scale: Vec<f64>,
    /// Per-axis log-scales per prototype.
    pub aniso_scale: Vec<[f64; 3]>,
    /// Half-extents of the cuboid each prototype was drawn from.
    pub init_half_extents: Vec<[f64; 3]>,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn scale_factors(&self, k: usize) -> [f64; 3] {
        let b = self.base_scale[k];
        let a = self.aniso_scale[k];
        [(b + a[0]).exp(), (b + a[1]).exp(), (b + a[2]).exp()]
    }

    pub fn effective_points(&self, k: usize) -> Vec<[f64; 3]> {
        let f = self.scale_factors(k);
        self.points[k].iter().map(|p| [p[0] * f[0], p[1] * f[1], p[2] * f[2]]).collect()
    }

    /// Prototype `k` in its canonical frame, intensity broadcast to all
    /// points.
    pub fn cloud(&self, k: usize) -> PointCloud {
        let pts = self.effective_points(k);
        let n = pts.len();
        let mut c = PointCloud::from_positions(pts, Frame::PatchNormalized);
        c.intensity = Some(vec![self.intensity[k]; n]);
        c
    }
}

/// Uniform samples in one random origin-centred cuboid per prototype, with
/// half-extents drawn from `config.init_half_extent`.
pub fn init_prototypes(config: &ModelConfig, seed: u64) -> PrototypeBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = config.init_half_extent;
    let k = config.num_prototypes;
    let mut points = Vec::with_capacity(k);
    let mut extents = Vec::with_capacity(k);
    for _ in 0..k {
        let e = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
        points.push(
            (0..config.points_per_prototype)
                .map(|_| [rng.gen_range(-e[0]..=e[0]), rng.gen_range(-e[1]..=e[1]), rng.gen_range(-e[2]..=e[2])])
                .collect(),
        );
        extents.push(e);
    }
    PrototypeBank {
        points,
        intensity: vec![INITIAL_INTENSITY; k],
        base_scale: vec![0.0; k],
        aniso_scale: vec![[0.0; 3]; k],
        init_half_extents: extents,
    }
}
