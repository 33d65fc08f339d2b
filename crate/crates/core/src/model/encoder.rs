//! Point and scene encoders.
//!
//! Points get a 10-d descriptor (position, colour, reflectance, offset to
//! the centre of their voxel) embedded by one hidden layer, max-pooled per
//! voxel, then reduced to a single scene feature by alternating submanifold
//! 3×3×3 convolutions and 2×2×2 stride-2 convolutions.

use std::collections::{BTreeMap, HashMap};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::layers::{leaky_relu, leaky_relu_backward, Block, BlockCache, LayerNorm, LayerNormCache};
use super::params::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::{voxelize, PointCloud};

pub const DESCRIPTOR_DIM: usize = 10;
/// Fill value for colour and reflectance when a scene lacks those channels.
pub const MISSING_CHANNEL: f64 = 0.5;

/// Gather/scatter pairs per kernel offset.
#[derive(Debug, Clone, Default)]
struct Rulebook {
    pairs: Vec<(Vec<usize>, Vec<usize>)>,
    n_out: usize,
}

fn submanifold_rulebook(coords: &[[i32; 3]]) -> Rulebook {
    let index: HashMap<[i32; 3], usize> = coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut pairs = Vec::with_capacity(27);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                let mut ins = vec![];
                let mut outs = vec![];
                for (o, c) in coords.iter().enumerate() {
                    if let Some(&i) = index.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        ins.push(i);
                        outs.push(o);
                    }
                }
                pairs.push((ins, outs));
            }
        }
    }
    Rulebook {
        pairs,
        n_out: coords.len(),
    }
}

/// Rulebook of a 2×2×2 stride-2 convolution and the coarse coordinates.
fn strided_rulebook(coords: &[[i32; 3]]) -> (Rulebook, Vec<[i32; 3]>) {
    let mut parents: BTreeMap<[i32; 3], usize> = BTreeMap::new();
    for c in coords {
        parents.entry([c[0] >> 1, c[1] >> 1, c[2] >> 1]).or_insert(0);
    }
    for (i, v) in parents.values_mut().enumerate() {
        *v = i;
    }
    let mut pairs = vec![(vec![], vec![]); 8];
    for (i, c) in coords.iter().enumerate() {
        let k = ((c[2] & 1) * 4 + (c[1] & 1) * 2 + (c[0] & 1)) as usize;
        pairs[k].0.push(i);
        pairs[k].1.push(parents[&[c[0] >> 1, c[1] >> 1, c[2] >> 1]]);
    }
    let out_coords = parents.keys().copied().collect();
    (
        Rulebook {
            pairs,
            n_out: parents.len(),
        },
        out_coords,
    )
}

/// Sparse convolution with weights `[kernel volume, c_in, c_out]`.
#[derive(Debug, Clone, Copy)]
pub struct SparseConv {
    pub w: ParamId,
    pub b: ParamId,
    kvol: usize,
    cin: usize,
    cout: usize,
}

impl SparseConv {
    fn new(store: &mut ParamStore, name: &str, kvol: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        SparseConv {
            w: store.add_uniform(format!("{name}.weight"), &[kvol, cin, cout], kvol * cin, rng),
            b: store.add_uniform(format!("{name}.bias"), &[cout], kvol * cin, rng),
            kvol,
            cin,
            cout,
        }
    }

    fn forward(&self, store: &ParamStore, x: ArrayView2<f32>, rb: &Rulebook) -> Array2<f32> {
        let w = store.view3(self.w);
        let mut out = Array2::zeros((rb.n_out, self.cout));
        out += &store.view1(self.b);
        for (k, (ins, outs)) in rb.pairs.iter().enumerate() {
            if ins.is_empty() {
                continue;
            }
            let gathered = x.select(Axis(0), ins);
            let prod = gathered.dot(&w.slice(s![k, .., ..]));
            for (row, &o) in prod.rows().into_iter().zip(outs) {
                let mut dst = out.row_mut(o);
                dst += &row;
            }
        }
        out
    }

    fn backward(&self, store: &ParamStore, grads: &mut Grads, x: ArrayView2<f32>, rb: &Rulebook, dout: ArrayView2<f32>) -> Array2<f32> {
        {
            let mut gb = grads.view1_mut(self.b);
            gb += &dout.sum_axis(Axis(0));
        }
        let w = store.view3(self.w);
        let mut dx = Array2::zeros((x.nrows(), self.cin));
        let mut gw = grads.view3_mut(self.w, (self.kvol, self.cin, self.cout));
        for (k, (ins, outs)) in rb.pairs.iter().enumerate() {
            if ins.is_empty() {
                continue;
            }
            let xin = x.select(Axis(0), ins);
            let dg = dout.select(Axis(0), outs);
            let mut gk = gw.slice_mut(s![k, .., ..]);
            general_mat_mul(1.0, &xin.t(), &dg, 1.0, &mut gk);
            let back = dg.dot(&w.slice(s![k, .., ..]).t());
            for (row, &i) in back.rows().into_iter().zip(ins) {
                let mut dst = dx.row_mut(i);
                dst += &row;
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvNorm {
    conv: SparseConv,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct ConvNormCache {
    input: Array2<f32>,
    norm: LayerNormCache,
    output: Array2<f32>,
}

impl ConvNorm {
    fn forward(&self, store: &ParamStore, x: Array2<f32>, rb: &Rulebook) -> ConvNormCache {
        let h = self.conv.forward(store, x.view(), rb);
        let (mut y, norm) = self.norm.forward(store, h.view());
        leaky_relu(&mut y);
        ConvNormCache { input: x, norm, output: y }
    }

    fn backward(&self, store: &ParamStore, grads: &mut Grads, c: &ConvNormCache, rb: &Rulebook, mut dy: Array2<f32>) -> Array2<f32> {
        leaky_relu_backward(c.output.view(), &mut dy);
        let dh = self.norm.backward(store, grads, &c.norm, dy.view());
        self.conv.backward(store, grads, c.input.view(), rb, dh.view())
    }
}

#[derive(Debug, Clone, Copy)]
struct Level {
    same: ConvNorm,
    down: ConvNorm,
}

/// Channel width after each stride-2 reduction: doubling from the point
/// width, capped by the scene width, ending exactly at the scene width.
pub fn level_widths(point_width: usize, scene_width: usize, levels: usize) -> Vec<usize> {
    let mut w: Vec<usize> = (0..=levels)
        .map(|l| (point_width << l.min(30)).min(scene_width))
        .collect();
    w[levels] = scene_width;
    w
}

#[derive(Debug, Clone)]
pub struct SceneEncoder {
    resolution: usize,
    point: Block,
    levels: Vec<Level>,
    pub scene_width: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    point: BlockCache,
    /// Per voxel and channel, the point holding the maximum.
    argmax: Array2<usize>,
    levels: Vec<(Rulebook, ConvNormCache, Rulebook, ConvNormCache)>,
}

impl SceneEncoder {
    pub fn new(
        store: &mut ParamStore,
        resolution: usize,
        point_width: usize,
        scene_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 2 {
            return Err(Error::Config(format!("grid resolution {resolution} must be a power of two ≥ 2")));
        }
        let n_levels = resolution.trailing_zeros() as usize;
        let widths = level_widths(point_width, scene_width, n_levels);
        let point = Block::new(store, "encoder.point", DESCRIPTOR_DIM, point_width, rng);
        let levels = (0..n_levels)
            .map(|l| {
                let name = format!("encoder.scene.{l}");
                let (c, n) = (widths[l], widths[l + 1]);
                Level {
                    same: ConvNorm {
                        conv: SparseConv::new(store, &format!("{name}.conv"), 27, c, c, rng),
                        norm: LayerNorm::new(store, &format!("{name}.conv_norm"), c),
                    },
                    down: ConvNorm {
                        conv: SparseConv::new(store, &format!("{name}.down"), 8, c, n, rng),
                        norm: LayerNorm::new(store, &format!("{name}.down_norm"), n),
                    },
                }
            })
            .collect();
        Ok(SceneEncoder {
            resolution,
            point,
            levels,
            scene_width,
        })
    }

    /// Per-point descriptors and the occupied voxel coordinates.
    pub fn descriptors(&self, x: &PointCloud) -> Result<(Array2<f32>, Vec<[i32; 3]>, Vec<usize>)> {
        if x.is_empty() {
            return Err(Error::EmptyCloud("encoder input"));
        }
        let size = 2.0 / self.resolution as f64;
        let grid = voxelize(x, [self.resolution; 3], size)?;
        let mut desc = Array2::zeros((x.len(), DESCRIPTOR_DIM));
        for (i, p) in x.positions.iter().enumerate() {
            let cell = grid.coords_of(grid.point_assignment[i]);
            let center = grid.center(cell);
            let color = x.color.as_ref().map_or([MISSING_CHANNEL; 3], |c| c[i]);
            let refl = x.intensity.as_ref().map_or(MISSING_CHANNEL, |v| v[i]);
            let row = [
                p[0],
                p[1],
                p[2],
                color[0],
                color[1],
                color[2],
                refl,
                (p[0] - center[0]) / (0.5 * size),
                (p[1] - center[1]) / (0.5 * size),
                (p[2] - center[2]) / (0.5 * size),
            ];
            for (d, v) in desc.row_mut(i).iter_mut().zip(row) {
                *d = v as f32;
            }
        }
        // BTreeMap order: voxels sorted by id, independent of point order.
        let ids: Vec<usize> = grid.occupancy.keys().copied().collect();
        let coords = ids
            .iter()
            .map(|&id| {
                let c = grid.coords_of(id);
                [c[0] as i32, c[1] as i32, c[2] as i32]
            })
            .collect();
        let slot_of: HashMap<usize, usize> = ids.iter().enumerate().map(|(s, &id)| (id, s)).collect();
        let voxel_of_point = grid.point_assignment.iter().map(|id| slot_of[id]).collect();
        Ok((desc, coords, voxel_of_point))
    }

    pub fn forward(&self, store: &ParamStore, x: &PointCloud) -> Result<(Vec<f32>, EncoderCache)> {
        let (desc, coords, voxel_of_point) = self.descriptors(x)?;
        let point = self.point.forward(store, desc);
        let pf = point.output();
        let n_vox = coords.len();
        let width = pf.ncols();
        let mut feats = Array2::from_elem((n_vox, width), f32::NEG_INFINITY);
        let mut argmax = Array2::zeros((n_vox, width));
        for (i, &v) in voxel_of_point.iter().enumerate() {
            for c in 0..width {
                let val = pf[[i, c]];
                if val > feats[[v, c]] {
                    feats[[v, c]] = val;
                    argmax[[v, c]] = i;
                }
            }
        }
        let mut coords = coords;
        let mut levels = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let rb_same = submanifold_rulebook(&coords);
            let same = level.same.forward(store, feats, &rb_same);
            let (rb_down, coarse) = strided_rulebook(&coords);
            let down = level.down.forward(store, same.output.clone(), &rb_down);
            feats = down.output.clone();
            coords = coarse;
            levels.push((rb_same, same, rb_down, down));
        }
        debug_assert_eq!(feats.nrows(), 1);
        let scene = feats.row(0).to_vec();
        Ok((scene, EncoderCache { point, argmax, levels }))
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &EncoderCache, dscene: &[f32]) {
        let mut d = Array2::from_shape_vec((1, dscene.len()), dscene.to_vec()).expect("scene gradient");
        for (level, (rb_same, same, rb_down, down)) in self.levels.iter().zip(&cache.levels).rev() {
            let dm = level.down.backward(store, grads, down, rb_down, d);
            d = level.same.backward(store, grads, same, rb_same, dm);
        }
        let n_points = cache.point.output().nrows();
        let mut dpoint = Array2::zeros((n_points, d.ncols()));
        for ((v, c), &i) in cache.argmax.indexed_iter() {
            dpoint[[i, c]] += d[[v, c]];
        }
        // Descriptor gradients are not needed.
        let _ = self.point.backward(store, grads, &cache.point, dpoint);
    }
}
