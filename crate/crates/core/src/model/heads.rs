//! Mapping of raw head outputs to slot parameters, and its backward pass.

use ndarray::Array2;

use super::{SlotGrads, SlotParams, TransformMode};
use crate::geometry::{AffineTransform, TransformBounds};
use crate::training::CurriculumStage;

/// Raw outputs of the five heads, one row per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// `K + 1` logits; entry 0 is "inactive".
    pub proba: Array2<f32>,
    /// 3 log-scale channels, or 9 matrix entries in full-affine mode.
    pub scale: Array2<f32>,
    pub rot_y: Array2<f32>,
    pub rot_z: Array2<f32>,
    pub translate: Array2<f32>,
}

impl HeadOutputs {
    pub fn zeros_like(&self) -> HeadOutputs {
        HeadOutputs {
            proba: Array2::zeros(self.proba.raw_dim()),
            scale: Array2::zeros(self.scale.raw_dim()),
            rot_y: Array2::zeros(self.rot_y.raw_dim()),
            rot_z: Array2::zeros(self.rot_z.raw_dim()),
            translate: Array2::zeros(self.translate.raw_dim()),
        }
    }
}

/// Output width of the scale head.
pub fn scale_width(mode: TransformMode) -> usize {
    match mode {
        TransformMode::Constrained => 3,
        TransformMode::FullAffine => 9,
    }
}

/// Centre and half-width of the log-scale range.
fn log_scale_range(b: &TransformBounds) -> (f64, f64) {
    let (lo, hi) = (b.scale_min.ln(), b.scale_max.ln());
    (0.5 * (lo + hi), 0.5 * (hi - lo))
}

/// Rotation angle of the unit-circle point `(1 + o0, o1)`; the offset makes
/// a zero output the identity.
pub fn rotation_angle(o0: f64, o1: f64) -> f64 {
    o1.atan2(1.0 + o0)
}

pub fn decode(out: &HeadOutputs, mode: TransformMode, bounds: &TransformBounds, stage: CurriculumStage) -> Vec<SlotParams> {
    let (centre, half) = log_scale_range(bounds);
    (0..out.proba.nrows())
        .map(|s| {
            let logits: Vec<f64> = out.proba.row(s).iter().map(|&v| v as f64).collect();
            let o = |a: &Array2<f32>, j: usize| a[[s, j]] as f64;
            let mut t = AffineTransform {
                tilt_y: bounds.tilt_max * o(&out.rot_y, 0).tanh(),
                rot_z: rotation_angle(o(&out.rot_z, 0), o(&out.rot_z, 1)),
                translation: [o(&out.translate, 0), o(&out.translate, 1), o(&out.translate, 2)],
                ..AffineTransform::identity()
            };
            if stage.scales_active() {
                match mode {
                    TransformMode::Constrained => {
                        if stage.anisotropic() {
                            for a in 0..3 {
                                t.scale[a] = (centre + half * o(&out.scale, a).tanh()).exp();
                            }
                        } else {
                            let m = (o(&out.scale, 0) + o(&out.scale, 1) + o(&out.scale, 2)) / 3.0;
                            t.scale = [(centre + half * m.tanh()).exp(); 3];
                        }
                    }
                    TransformMode::FullAffine => {
                        let mut l = [[0.0; 3]; 3];
                        for (a, row) in l.iter_mut().enumerate() {
                            for (b, v) in row.iter_mut().enumerate() {
                                *v = if a == b { 1.0 } else { 0.0 } + o(&out.scale, 3 * a + b);
                            }
                        }
                        t.linear = Some(l);
                    }
                }
            } else if mode == TransformMode::FullAffine {
                t.linear = Some([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
            }
            SlotParams::from_logits(logits, t)
        })
        .collect()
}

/// Gradient of the head outputs given slot-level gradients.
pub fn backward(
    out: &HeadOutputs,
    mode: TransformMode,
    bounds: &TransformBounds,
    stage: CurriculumStage,
    g: &SlotGrads,
) -> HeadOutputs {
    let (centre, half) = log_scale_range(bounds);
    let mut d = out.zeros_like();
    for s in 0..out.proba.nrows() {
        let o = |a: &Array2<f32>, j: usize| a[[s, j]] as f64;
        for (j, v) in g.logits[s].iter().enumerate() {
            d.proba[[s, j]] = *v as f32;
        }
        let tg = &g.transforms[s];
        let th = o(&out.rot_y, 0).tanh();
        d.rot_y[[s, 0]] = (tg.tilt_y * bounds.tilt_max * (1.0 - th * th)) as f32;
        let (cx, cy) = (1.0 + o(&out.rot_z, 0), o(&out.rot_z, 1));
        let r2 = cx * cx + cy * cy;
        if r2 > 1e-12 {
            d.rot_z[[s, 0]] = (-tg.rot_z * cy / r2) as f32;
            d.rot_z[[s, 1]] = (tg.rot_z * cx / r2) as f32;
        }
        for a in 0..3 {
            d.translate[[s, a]] = tg.translation[a] as f32;
        }
        if !stage.scales_active() {
            continue;
        }
        match mode {
            TransformMode::Constrained => {
                if stage.anisotropic() {
                    for a in 0..3 {
                        let th = o(&out.scale, a).tanh();
                        let sc = (centre + half * th).exp();
                        d.scale[[s, a]] = (tg.scale[a] * sc * half * (1.0 - th * th)) as f32;
                    }
                } else {
                    let m = (o(&out.scale, 0) + o(&out.scale, 1) + o(&out.scale, 2)) / 3.0;
                    let th = m.tanh();
                    let sc = (centre + half * th).exp();
                    let dm = (tg.scale[0] + tg.scale[1] + tg.scale[2]) * sc * half * (1.0 - th * th);
                    for a in 0..3 {
                        d.scale[[s, a]] = (dm / 3.0) as f32;
                    }
                }
            }
            TransformMode::FullAffine => {
                for a in 0..3 {
                    for b in 0..3 {
                        d.scale[[s, 3 * a + b]] = tg.linear[a][b] as f32;
                    }
                }
            }
        }
    }
    d
}
