//! Labelled synthetic scenes: rough terrain with planted objects.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, PointCloud};

/// Placement attempts per object before the spec is declared infeasible.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    /// Upright cone; `size` is (base diameter x, base diameter y, height).
    Cone,
    /// Box with a random heading; `size` is (length, width, height).
    Box,
    /// Upright cylinder; `size` is (diameter x, diameter y, height).
    Cylinder,
    /// A box with a pyramid roof taking the top third of the height.
    Composite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Terrain {
    /// Scene footprint in meters.
    pub extent_m: [f64; 2],
    /// Amplitude of the smooth height undulation in meters.
    pub roughness: f64,
    /// Spacing of the ground lattice.
    pub spacing_m: f64,
    /// Standard deviation of the per-point jitter, in meters.
    #[serde(default = "default_noise")]
    pub noise_m: f64,
    #[serde(default = "default_ground_intensity")]
    pub intensity: f64,
    #[serde(default)]
    pub class_id: i32,
}

fn default_noise() -> f64 {
    0.02
}

fn default_ground_intensity() -> f64 {
    0.3
}

fn default_density() -> f64 {
    30.0
}

fn default_gap() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Archetype {
    #[serde(default)]
    pub name: String,
    pub shape: Shape,
    /// Inclusive range of the number of planted objects.
    pub count: [usize; 2],
    /// Nominal size, see [`Shape`].
    pub size: [f64; 3],
    /// Range of the uniform size multiplier.
    pub scale: [f64; 2],
    pub intensity: f64,
    pub class_id: i32,
    /// Surface sampling density in points per square meter.
    #[serde(default = "default_density")]
    pub points_per_m2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default)]
    pub seed: u64,
    pub terrain: Terrain,
    #[serde(default)]
    pub archetypes: Vec<Archetype>,
    /// Minimum free space between the footprints of two objects.
    #[serde(default = "default_gap")]
    pub min_gap_m: f64,
    /// When set, footprints keep clear of the lines of a grid with this
    /// spacing anchored at the origin, so inference tiles of that size
    /// never cut an object.
    #[serde(default)]
    pub avoid_grid_m: Option<f64>,
    /// Standard deviation of the reflectance jitter.
    #[serde(default = "default_intensity_noise")]
    pub intensity_noise: f64,
}

fn default_intensity_noise() -> f64 {
    0.02
}

/// One planted object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub archetype: usize,
    pub instance: i64,
    pub center: [f64; 2],
    pub base_z: f64,
    pub heading: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub cloud: PointCloud,
    pub objects: Vec<PlantedObject>,
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.terrain;
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(t.extent_m[0]) && pos(t.extent_m[1]) && pos(t.spacing_m)) {
            return Err(Error::Config("terrain extent and spacing must be positive".into()));
        }
        if !(t.roughness >= 0.0 && t.noise_m >= 0.0 && self.min_gap_m >= 0.0 && self.intensity_noise >= 0.0) {
            return Err(Error::Config("roughness, noise and gaps must be non-negative".into()));
        }
        if self.avoid_grid_m.is_some_and(|g| !pos(g)) {
            return Err(Error::Config("avoid_grid_m must be positive".into()));
        }
        for a in &self.archetypes {
            if a.count[0] > a.count[1] || !(pos(a.scale[0]) && a.scale[0] <= a.scale[1]) {
                return Err(Error::Config(format!("archetype `{}`: bad count or scale range", a.name)));
            }
            if !a.size.iter().all(|&v| pos(v)) || !pos(a.points_per_m2) {
                return Err(Error::Config(format!("archetype `{}`: sizes and density must be positive", a.name)));
            }
            if a.class_id < 0 || !(0.0..=1.0).contains(&a.intensity) {
                return Err(Error::Config(format!("archetype `{}`: bad class or intensity", a.name)));
            }
        }
        if t.class_id < 0 || !(0.0..=1.0).contains(&t.intensity) {
            return Err(Error::Config("terrain: bad class or intensity".into()));
        }
        Ok(())
    }
}

/// Smooth random height field: a few random plane waves.
struct HeightField {
    waves: Vec<([f64; 2], f64, f64)>,
}

impl HeightField {
    fn new(rng: &mut impl Rng, amplitude: f64) -> Self {
        let waves = (0..6)
            .map(|_| {
                let wavelength = rng.gen_range(8.0..30.0);
                let dir = rng.gen_range(0.0..TAU);
                let k = TAU / wavelength;
                ([k * f64::cos(dir), k * f64::sin(dir)], rng.gen_range(0.0..TAU), amplitude / 6.0 * rng.gen_range(0.5..1.5))
            })
            .collect();
        HeightField { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|(k, ph, a)| a * (k[0] * x + k[1] * y + ph).sin()).sum()
    }
}

/// Footprint radius of an object, an upper bound over headings.
fn footprint_radius(a: &Archetype, scale: f64) -> f64 {
    match a.shape {
        Shape::Box | Shape::Composite => 0.5 * scale * a.size[0].hypot(a.size[1]),
        Shape::Cone | Shape::Cylinder => 0.5 * scale * a.size[0].max(a.size[1]),
    }
}

/// Whether `(x, y)` lies in the footprint, used to clear ground under
/// solid objects.
fn covers(a: &Archetype, o: &PlantedObject, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - o.center[0], y - o.center[1]);
    let (c, s) = (o.heading.cos(), o.heading.sin());
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    let (hx, hy) = (0.5 * o.scale * a.size[0], 0.5 * o.scale * a.size[1]);
    match a.shape {
        Shape::Box | Shape::Composite => u.abs() <= hx && v.abs() <= hy,
        Shape::Cylinder => (u / hx).powi(2) + (v / hy).powi(2) <= 1.0,
        Shape::Cone => false,
    }
}

/// Points on the visible surface of an object in its local frame: origin
/// at the base centre, z up. Bottom faces are never sampled.
fn surface_points(a: &Archetype, scale: f64, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let [sx, sy, sz] = a.size.map(|v| v * scale);
    let (hx, hy) = (0.5 * sx, 0.5 * sy);
    let count = |area: f64| ((area * a.points_per_m2).round() as usize).max(1);
    let mut pts = Vec::new();
    let cone = |pts: &mut Vec<[f64; 3]>, rng: &mut dyn rand::RngCore, base_z: f64, h: f64, square: bool| {
        // Uniform by area on the lateral surface: the squared radial
        // fraction is uniform.
        let slant = (hx.max(hy)).hypot(h);
        let area = PI * hx.max(hy) * slant;
        for _ in 0..count(area) {
            let f = rng.gen_range(0.0f64..1.0).sqrt();
            let t = rng.gen_range(0.0..TAU);
            let (mut u, mut v) = (t.cos(), t.sin());
            if square {
                let m = u.abs().max(v.abs());
                u /= m;
                v /= m;
            }
            pts.push([f * hx * u, f * hy * v, base_z + (1.0 - f) * h]);
        }
    };
    match a.shape {
        Shape::Cone => cone(&mut pts, rng, 0.0, sz, false),
        Shape::Cylinder => {
            let r = hx.max(hy);
            for _ in 0..count(TAU * r * sz) {
                let t = rng.gen_range(0.0..TAU);
                pts.push([hx * t.cos(), hy * t.sin(), rng.gen_range(0.0..sz)]);
            }
            for _ in 0..count(PI * hx * hy) {
                let (f, t) = (rng.gen_range(0.0f64..1.0).sqrt(), rng.gen_range(0.0..TAU));
                pts.push([f * hx * t.cos(), f * hy * t.sin(), sz]);
            }
        }
        Shape::Box | Shape::Composite => {
            let wall = if a.shape == Shape::Box { sz } else { sz * 2.0 / 3.0 };
            for _ in 0..count(2.0 * (sx + sy) * wall) {
                let p = rng.gen_range(0.0..2.0 * (sx + sy));
                let (x, y) = if p < sx {
                    (p - hx, -hy)
                } else if p < sx + sy {
                    (hx, p - sx - hy)
                } else if p < 2.0 * sx + sy {
                    (p - sx - sy - hx, hy)
                } else {
                    (-hx, p - 2.0 * sx - sy - hy)
                };
                pts.push([x, y, rng.gen_range(0.0..wall)]);
            }
            if a.shape == Shape::Box {
                for _ in 0..count(sx * sy) {
                    pts.push([rng.gen_range(-hx..hx), rng.gen_range(-hy..hy), sz]);
                }
            } else {
                cone(&mut pts, rng, wall, sz - wall, true);
            }
        }
    }
    pts
}

fn grid_clearance_ok(center: [f64; 2], r: f64, grid: Option<f64>) -> bool {
    let Some(g) = grid else { return true };
    center.iter().all(|&c| {
        let off = c.rem_euclid(g);
        off > r && g - off > r
    })
}

/// Generates the scene of `spec`; the same spec always gives the same
/// scene. Ground points carry instance 0, objects 1, 2, …
pub fn generate_synthetic_scene(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t = &spec.terrain;
    let height = HeightField::new(&mut rng, t.roughness);
    let [w, h] = t.extent_m;

    // Draw every object first, then place the largest ones first.
    let mut todo: Vec<(usize, f64)> = Vec::new();
    for (ai, a) in spec.archetypes.iter().enumerate() {
        let n = rng.gen_range(a.count[0]..=a.count[1]);
        for _ in 0..n {
            todo.push((ai, rng.gen_range(a.scale[0]..=a.scale[1])));
        }
    }
    let radius = |&(ai, scale): &(usize, f64)| footprint_radius(&spec.archetypes[ai], scale);
    todo.sort_by(|a, b| radius(b).total_cmp(&radius(a)));
    let mut objects: Vec<(PlantedObject, f64)> = Vec::new();
    for item in &todo {
        let (ai, scale) = *item;
        let r = radius(item);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            if 2.0 * r >= w || 2.0 * r >= h {
                break;
            }
            let c = [rng.gen_range(r..w - r), rng.gen_range(r..h - r)];
            let free = objects
                .iter()
                .all(|(o, ro)| (c[0] - o.center[0]).hypot(c[1] - o.center[1]) >= r + ro + spec.min_gap_m);
            if free && grid_clearance_ok(c, r, spec.avoid_grid_m) {
                placed = Some(c);
                break;
            }
        }
        let c = placed.ok_or_else(|| {
            Error::Infeasible(format!(
                "could not place object {} of archetype `{}` in {MAX_PLACEMENT_ATTEMPTS} attempts",
                objects.len() + 1,
                spec.archetypes[ai].name
            ))
        })?;
        let obj = PlantedObject {
            archetype: ai,
            instance: objects.len() as i64 + 1,
            center: c,
            base_z: height.at(c[0], c[1]),
            heading: rng.gen_range(0.0..PI),
            scale,
        };
        objects.push((obj, r));
    }

    let jitter = Normal::new(0.0, t.noise_m.max(1e-300)).expect("valid deviation");
    let inoise = Normal::new(0.0, spec.intensity_noise.max(1e-300)).expect("valid deviation");
    let mut pos = Vec::new();
    let mut int = Vec::new();
    let mut cls = Vec::new();
    let mut inst = Vec::new();
    let nx = (w / t.spacing_m).floor() as usize + 1;
    let ny = (h / t.spacing_m).floor() as usize + 1;
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 * t.spacing_m + t.noise_m * rng.gen_range(-1.0..1.0)).clamp(0.0, w);
            let y = (j as f64 * t.spacing_m + t.noise_m * rng.gen_range(-1.0..1.0)).clamp(0.0, h);
            if objects.iter().any(|(o, _)| covers(&spec.archetypes[o.archetype], o, x, y)) {
                continue;
            }
            pos.push([x, y, height.at(x, y) + jitter.sample(&mut rng)]);
            int.push((t.intensity + inoise.sample(&mut rng)).clamp(0.0, 1.0));
            cls.push(t.class_id);
            inst.push(0);
        }
    }
    for (o, _) in &objects {
        let a = &spec.archetypes[o.archetype];
        let (c, s) = (o.heading.cos(), o.heading.sin());
        for p in surface_points(a, o.scale, &mut rng) {
            pos.push([
                o.center[0] + c * p[0] - s * p[1] + jitter.sample(&mut rng),
                o.center[1] + s * p[0] + c * p[1] + jitter.sample(&mut rng),
                o.base_z + p[2] + jitter.sample(&mut rng),
            ]);
            int.push((a.intensity + inoise.sample(&mut rng)).clamp(0.0, 1.0));
            cls.push(a.class_id);
            inst.push(o.instance);
        }
    }
    let mut cloud = PointCloud::from_positions(pos, Frame::Scene);
    cloud.intensity = Some(int);
    cloud.class_label = Some(cls);
    cloud.instance_label = Some(inst);
    Ok(SynthScene {
        cloud,
        objects: objects.into_iter().map(|(o, _)| o).collect(),
    })
}

/// Noise-free resample of a generated scene: every planted object keeps its
/// pose and is redrawn from its generating archetype, and the ground is the
/// exact height field on a lattice with fresh offsets. `seed` only drives the
/// sample positions. This is the reference reconstruction of a model that
/// knows every shape exactly.
pub fn oracle_reconstruction(spec: &SynthSpec, objects: &[PlantedObject], seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    // The height field is the first draw of the scene's own stream.
    let height = HeightField::new(&mut ChaCha8Rng::seed_from_u64(spec.seed), spec.terrain.roughness);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = &spec.terrain;
    let [w, h] = t.extent_m;
    let mut pos = Vec::new();
    let mut int = Vec::new();
    let nx = (w / t.spacing_m).floor() as usize + 1;
    let ny = (h / t.spacing_m).floor() as usize + 1;
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + rng.gen_range(-0.5..0.5)) * t.spacing_m;
            let y = (j as f64 + rng.gen_range(-0.5..0.5)) * t.spacing_m;
            let (x, y) = (x.clamp(0.0, w), y.clamp(0.0, h));
            if objects.iter().any(|o| covers(&spec.archetypes[o.archetype], o, x, y)) {
                continue;
            }
            pos.push([x, y, height.at(x, y)]);
            int.push(t.intensity);
        }
    }
    for o in objects {
        let a = spec
            .archetypes
            .get(o.archetype)
            .ok_or_else(|| Error::ParameterDomain(format!("object {} has no archetype {}", o.instance, o.archetype)))?;
        let (c, s) = (o.heading.cos(), o.heading.sin());
        for p in surface_points(a, o.scale, &mut rng) {
            pos.push([o.center[0] + c * p[0] - s * p[1], o.center[1] + s * p[0] + c * p[1], o.base_z + p[2]]);
            int.push(a.intensity);
        }
    }
    let mut cloud = PointCloud::from_positions(pos, Frame::Scene);
    cloud.intensity = Some(int);
    Ok(cloud)
}

/// The two-archetype scene used by the recovery experiments: cones
/// (class 1) and boxes (class 2) on rough ground (class 0).
pub fn two_archetype_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        terrain: Terrain {
            extent_m: [40.0, 40.0],
            roughness: 0.4,
            spacing_m: 0.2,
            noise_m: 0.02,
            intensity: 0.3,
            class_id: 0,
        },
        archetypes: vec![
            Archetype {
                name: "vegetation".into(),
                shape: Shape::Cone,
                count: [12, 12],
                size: [2.4, 2.4, 3.5],
                scale: [0.85, 1.15],
                intensity: 0.7,
                class_id: 1,
                points_per_m2: 30.0,
            },
            Archetype {
                name: "building".into(),
                shape: Shape::Box,
                count: [6, 6],
                size: [4.0, 3.0, 3.0],
                scale: [0.9, 1.1],
                intensity: 0.5,
                class_id: 2,
                points_per_m2: 30.0,
            },
        ],
        min_gap_m: 0.6,
        avoid_grid_m: Some(10.0),
        intensity_noise: 0.02,
    }
}
