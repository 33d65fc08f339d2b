use std::collections::BTreeMap;

use super::PointCloud;
use crate::error::{Error, Result};

/// Regular grid over a patch with its origin at the lower patch corner
/// `(-1, -1, -1)`.
///
/// Voxel ids are linear: `x + rx * (y + ry * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub resolution: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
    /// Occupied voxel id → indices of the points it holds.
    pub occupancy: BTreeMap<usize, Vec<usize>>,
    /// Voxel id of every input point.
    pub point_assignment: Vec<usize>,
}

impl VoxelGrid {
    pub fn coords_of(&self, id: usize) -> [usize; 3] {
        let [rx, ry, _] = self.resolution;
        [id % rx, (id / rx) % ry, id / (rx * ry)]
    }

    pub fn id_of(&self, c: [usize; 3]) -> usize {
        c[0] + self.resolution[0] * (c[1] + self.resolution[1] * c[2])
    }

    /// Integer cell of a position, clamped to the grid.
    pub fn cell(&self, p: &[f64; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            c[a] = if f.is_nan() || f < 0.0 {
                0
            } else {
                (f as usize).min(self.resolution[a] - 1)
            };
        }
        c
    }

    pub fn center(&self, c: [usize; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = self.origin[a] + (c[a] as f64 + 0.5) * self.voxel_size;
        }
        out
    }
}

/// Assigns every point to one voxel; points outside the grid are clamped to
/// the boundary voxel.
pub fn voxelize(p: &PointCloud, resolution: [usize; 3], voxel_size: f64) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::ParameterDomain(format!("voxel size {voxel_size} must be positive")));
    }
    if resolution.iter().any(|&r| r == 0) {
        return Err(Error::ParameterDomain("voxel resolution must be positive".into()));
    }
    let mut grid = VoxelGrid {
        resolution,
        voxel_size,
        origin: [-1.0; 3],
        occupancy: BTreeMap::new(),
        point_assignment: Vec::with_capacity(p.len()),
    };
    for (i, pos) in p.positions.iter().enumerate() {
        let id = grid.id_of(grid.cell(pos));
        grid.point_assignment.push(id);
        grid.occupancy.entry(id).or_default().push(i);
    }
    Ok(grid)
}
