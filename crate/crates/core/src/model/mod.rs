//! The decomposition network: encoder, slot heads and prototypes.
//!
//! A patch is encoded into one scene feature. Each slot maps it through its
//! own linear layer to a slot feature, and five heads shared by all slots
//! turn slot features into probabilities and transform parameters.

mod candidates;
pub mod encoder;
pub mod heads;
pub mod layers;
pub mod params;
pub mod prototypes;

pub use candidates::{softmax, CandidateGrad, CandidateSet, SlotGrads, SlotParams};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use prototypes::{init_prototypes, PrototypeBank};

use ndarray::{Array2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, PointCloud, TransformBounds};
use crate::training::CurriculumStage;
use encoder::{EncoderCache, SceneEncoder};
use heads::HeadOutputs;
use layers::{leaky_relu, leaky_relu_backward, LayerNorm, LayerNormCache, Mlp3, Mlp3Cache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TransformMode {
    /// Anisotropic scaling, y tilt, z rotation and translation.
    #[default]
    Constrained,
    /// The scaling is replaced by an unconstrained 3×3 matrix.
    FullAffine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_slots: usize,
    pub num_prototypes: usize,
    pub points_per_prototype: usize,
    pub grid_resolution: usize,
    /// Voxel edge in meters; the patch side is `voxel_size * grid_resolution`.
    pub voxel_size: Option<f64>,
    pub point_width: usize,
    pub scene_width: usize,
    pub slot_width: usize,
    pub transform_mode: TransformMode,
    pub use_intensity: bool,
    pub bounds: TransformBounds,
    /// Range of the per-axis half-extents of the initial prototype cuboids.
    pub init_half_extent: [f64; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_slots: 64,
            num_prototypes: 6,
            points_per_prototype: 256,
            grid_resolution: 64,
            voxel_size: None,
            point_width: 16,
            scene_width: 1024,
            slot_width: 128,
            transform_mode: TransformMode::Constrained,
            use_intensity: true,
            bounds: TransformBounds::default(),
            init_half_extent: [0.05, 0.3],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_slots", self.num_slots),
            ("num_prototypes", self.num_prototypes),
            ("points_per_prototype", self.points_per_prototype),
            ("point_width", self.point_width),
            ("scene_width", self.scene_width),
            ("slot_width", self.slot_width),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.grid_resolution.is_power_of_two() || self.grid_resolution < 2 {
            return Err(Error::Config(format!(
                "grid_resolution {} must be a power of two ≥ 2",
                self.grid_resolution
            )));
        }
        if let Some(v) = self.voxel_size {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("voxel_size {v} must be positive")));
            }
        }
        let [lo, hi] = self.init_half_extent;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("init_half_extent [{lo}, {hi}] must be positive and ordered")));
        }
        self.bounds.validate()
    }
}

/// Parameter handles of the prototype bank.
#[derive(Debug, Clone, Copy)]
struct PrototypeIds {
    points: ParamId,
    intensity: ParamId,
    base_scale: ParamId,
    aniso_scale: ParamId,
}

#[derive(Debug, Clone)]
struct SlotProjection {
    /// `[S, scene_width, slot_width]`.
    w: ParamId,
    /// `[S, slot_width]`.
    b: ParamId,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct Heads {
    proba: Mlp3,
    scale: Mlp3,
    rot_y: Mlp3,
    rot_z: Mlp3,
    translate: Mlp3,
}

/// Intermediate values of one forward pass, needed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder: EncoderCache,
    scene: Vec<f32>,
    norm: LayerNormCache,
    slot_features: Array2<f32>,
    heads: [Mlp3Cache; 5],
    outputs: HeadOutputs,
}

/// The slot chosen in one patch at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSlot {
    pub slot: usize,
    pub prototype: usize,
    pub alpha: f64,
    pub transform: AffineTransform,
    /// The transformed prototype in the patch frame.
    pub points: Vec<[f64; 3]>,
    pub intensity: Option<f64>,
}

/// Active slots of one patch; their union is the reconstruction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PatchDecomposition {
    pub slots: Vec<ActiveSlot>,
}

impl PatchDecomposition {
    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.slots.iter().map(|s| s.points.len()).sum()
    }
}

/// Selects the active slots: `α > 0.5`, then the most likely prototype with
/// ties going to the lower index.
pub fn select_active(cands: &CandidateSet) -> PatchDecomposition {
    let slots = cands
        .slots
        .iter()
        .enumerate()
        .filter(|(_, p)| p.alpha > 0.5)
        .map(|(s, p)| {
            let k = argmax(&p.beta);
            ActiveSlot {
                slot: s,
                prototype: k,
                alpha: p.alpha,
                transform: p.transform,
                points: cands.candidate(s, k).to_vec(),
                intensity: cands.intensity.as_ref().map(|i| i[k]),
            }
        })
        .collect();
    PatchDecomposition { slots }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stage: CurriculumStage,
    /// Prototypes the slots may not choose; see [`SlotParams::masked`].
    pub masked: Vec<bool>,
    encoder: SceneEncoder,
    slots: SlotProjection,
    heads: Heads,
    protos: PrototypeIds,
    pub(crate) init_extents: Vec<[f64; 3]>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = SceneEncoder::new(
            &mut store,
            config.grid_resolution,
            config.point_width,
            config.scene_width,
            &mut rng,
        )?;
        let (s, sw, hw) = (config.num_slots, config.scene_width, config.slot_width);
        let slots = SlotProjection {
            w: store.add_uniform("slots.weight", &[s, sw, hw], sw, &mut rng),
            b: store.add_uniform("slots.bias", &[s, hw], sw, &mut rng),
            norm: LayerNorm::new(&mut store, "slots.norm", hw),
        };
        let k = config.num_prototypes;
        let heads = Heads {
            proba: Mlp3::new(&mut store, "heads.proba", hw, k + 1, &mut rng),
            scale: Mlp3::new(&mut store, "heads.scale", hw, heads::scale_width(config.transform_mode), &mut rng),
            rot_y: Mlp3::new(&mut store, "heads.rot_y", hw, 1, &mut rng),
            rot_z: Mlp3::new(&mut store, "heads.rot_z", hw, 2, &mut rng),
            translate: Mlp3::new(&mut store, "heads.translate", hw, 3, &mut rng),
        };
        let bank = init_prototypes(&config, rng.next_u64());
        let p = config.points_per_prototype;
        let flat: Vec<f32> = bank.points.iter().flatten().flatten().map(|&v| v as f32).collect();
        let protos = PrototypeIds {
            points: store.add("prototypes.points", &[k, p, 3], flat),
            intensity: store.add_const("prototypes.intensity", &[k], prototypes::INITIAL_INTENSITY as f32),
            base_scale: store.add_const("prototypes.base_scale", &[k], 0.0),
            aniso_scale: store.add_const("prototypes.aniso_scale", &[k, 3], 0.0),
        };
        Ok(Model {
            masked: vec![false; k],
            config,
            store,
            stage: CurriculumStage::FIRST,
            encoder,
            slots,
            heads,
            protos,
            init_extents: bank.init_half_extents,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.config.num_slots
    }

    pub fn num_prototypes(&self) -> usize {
        self.config.num_prototypes
    }

    /// Current prototypes with their scale parameters.
    pub fn prototype_bank(&self) -> PrototypeBank {
        let k = self.num_prototypes();
        let p = self.config.points_per_prototype;
        let pts = self.store.data(self.protos.points);
        let aniso = self.store.data(self.protos.aniso_scale);
        PrototypeBank {
            points: (0..k)
                .map(|i| {
                    (0..p)
                        .map(|j| {
                            let o = 3 * (i * p + j);
                            [pts[o] as f64, pts[o + 1] as f64, pts[o + 2] as f64]
                        })
                        .collect()
                })
                .collect(),
            intensity: self.store.data(self.protos.intensity).iter().map(|&v| v as f64).collect(),
            base_scale: self.store.data(self.protos.base_scale).iter().map(|&v| v as f64).collect(),
            aniso_scale: (0..k)
                .map(|i| [aniso[3 * i] as f64, aniso[3 * i + 1] as f64, aniso[3 * i + 2] as f64])
                .collect(),
            init_half_extents: self.init_extents.clone(),
        }
    }

    /// The encoder's patch descriptor.
    pub fn scene_feature(&self, x: &PointCloud) -> Result<Vec<f32>> {
        Ok(self.encoder.forward(&self.store, x)?.0)
    }

    /// Every candidate reconstruction of a patch with the slot parameters.
    pub fn forward(&self, x: &PointCloud) -> Result<(CandidateSet, ForwardCache)> {
        let (scene, enc) = self.encoder.forward(&self.store, x)?;
        let s_count = self.num_slots();
        let hw = self.config.slot_width;
        let w = self.store.view3(self.slots.w);
        let f = ndarray::ArrayView1::from(&scene[..]);
        let mut z = self.store.view2(self.slots.b).to_owned();
        for s in 0..s_count {
            let mut row = z.row_mut(s);
            row += &f.dot(&w.index_axis(Axis(0), s));
        }
        let (mut h, norm) = self.slots.norm.forward(&self.store, z.view());
        leaky_relu(&mut h);
        debug_assert_eq!(h.dim(), (s_count, hw));
        let (proba, c0) = self.heads.proba.forward(&self.store, h.clone());
        let (scale, c1) = self.heads.scale.forward(&self.store, h.clone());
        let (rot_y, c2) = self.heads.rot_y.forward(&self.store, h.clone());
        let (rot_z, c3) = self.heads.rot_z.forward(&self.store, h.clone());
        let (translate, c4) = self.heads.translate.forward(&self.store, h.clone());
        let outputs = HeadOutputs {
            proba,
            scale,
            rot_y,
            rot_z,
            translate,
        };
        let mut slots = heads::decode(&outputs, self.config.transform_mode, &self.config.bounds, self.stage);
        if self.masked.iter().any(|&m| m) {
            slots = slots.iter().map(|s| s.masked(&self.masked)).collect();
        }
        let bank = self.prototype_bank();
        let protos = (0..bank.len()).map(|k| bank.effective_points(k)).collect();
        let intensity = self.config.use_intensity.then(|| bank.intensity.clone());
        let cands = CandidateSet::new(slots, protos, intensity)?;
        let cache = ForwardCache {
            encoder: enc,
            scene,
            norm,
            slot_features: h,
            heads: [c0, c1, c2, c3, c4],
            outputs,
        };
        Ok((cands, cache))
    }

    /// Accumulates the parameter gradients of one patch into `grads`.
    pub fn backward(&self, cands: &CandidateSet, cache: &ForwardCache, g: &CandidateGrad, grads: &mut Grads) {
        let sg = cands.backward(g);
        self.prototype_backward(&sg, grads);
        let d = heads::backward(&cache.outputs, self.config.transform_mode, &self.config.bounds, self.stage, &sg);
        let mut dh = self.heads.proba.backward(&self.store, grads, &cache.heads[0], d.proba.view());
        if self.stage.scales_active() {
            dh += &self.heads.scale.backward(&self.store, grads, &cache.heads[1], d.scale.view());
        }
        dh += &self.heads.rot_y.backward(&self.store, grads, &cache.heads[2], d.rot_y.view());
        dh += &self.heads.rot_z.backward(&self.store, grads, &cache.heads[3], d.rot_z.view());
        dh += &self.heads.translate.backward(&self.store, grads, &cache.heads[4], d.translate.view());
        leaky_relu_backward(cache.slot_features.view(), &mut dh);
        let dz = self.slots.norm.backward(&self.store, grads, &cache.norm, dh.view());
        let (s_count, sw, hw) = (self.num_slots(), self.config.scene_width, self.config.slot_width);
        {
            let mut gb = grads.view2_mut(self.slots.b, (s_count, hw));
            gb += &dz;
        }
        let f = ndarray::ArrayView1::from(&cache.scene[..]);
        let mut dscene = ndarray::Array1::<f32>::zeros(sw);
        {
            let w = self.store.view3(self.slots.w);
            let mut gw = grads.view3_mut(self.slots.w, (s_count, sw, hw));
            for s in 0..s_count {
                let dzs = dz.row(s);
                let mut gws = gw.index_axis_mut(Axis(0), s);
                for (i, fi) in f.iter().enumerate() {
                    if *fi != 0.0 {
                        gws.row_mut(i).scaled_add(*fi, &dzs);
                    }
                }
                dscene += &w.index_axis(Axis(0), s).dot(&dzs);
            }
        }
        self.encoder
            .backward(&self.store, grads, &cache.encoder, dscene.as_slice().expect("contiguous"));
    }

    /// Pulls gradients of the scaled prototype points back to the raw
    /// points and the two log-scales.
    fn prototype_backward(&self, sg: &SlotGrads, grads: &mut Grads) {
        let bank = self.prototype_bank();
        let p = self.config.points_per_prototype;
        for k in 0..bank.len() {
            let f = bank.scale_factors(k);
            let mut dlog = [0.0f64; 3];
            {
                let gp = grads.get_mut(self.protos.points);
                for (j, dq) in sg.prototypes[k].iter().enumerate() {
                    let raw = &bank.points[k][j];
                    for a in 0..3 {
                        gp[3 * (k * p + j) + a] += (dq[a] * f[a]) as f32;
                        dlog[a] += dq[a] * raw[a] * f[a];
                    }
                }
            }
            grads.get_mut(self.protos.base_scale)[k] += (dlog[0] + dlog[1] + dlog[2]) as f32;
            let ga = grads.get_mut(self.protos.aniso_scale);
            for a in 0..3 {
                ga[3 * k + a] += dlog[a] as f32;
            }
        }
        if self.config.use_intensity {
            let gi = grads.get_mut(self.protos.intensity);
            for (d, v) in gi.iter_mut().zip(&sg.intensity) {
                *d += *v as f32;
            }
        }
    }

    /// Every candidate reconstruction of a patch.
    /// Brings a patch to the channels the model consumes: intensity is
    /// dropped when unused and required otherwise.
    pub fn prepare_input(&self, mut x: PointCloud) -> Result<PointCloud> {
        if !self.config.use_intensity {
            x.intensity = None;
        } else if x.intensity.is_none() {
            return Err(Error::Config("model.use_intensity is set but the cloud has no intensity".into()));
        }
        Ok(x)
    }

    pub fn reconstruct(&self, x: &PointCloud) -> Result<CandidateSet> {
        Ok(self.forward(x)?.0)
    }

    /// Active slots and their chosen prototypes for one patch.
    pub fn infer(&self, x: &PointCloud) -> Result<PatchDecomposition> {
        Ok(select_active(&self.reconstruct(x)?))
    }
}

#[cfg(test)]
mod tests;
