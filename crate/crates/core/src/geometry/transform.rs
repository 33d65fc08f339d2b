use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

/// Admissible ranges for the constrained transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformBounds {
    pub scale_min: f64,
    pub scale_max: f64,
    pub tilt_max: f64,
}

impl Default for TransformBounds {
    fn default() -> Self {
        TransformBounds {
            scale_min: 0.5,
            scale_max: 2.0,
            tilt_max: PI / 10.0,
        }
    }
}

impl TransformBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config(format!(
                "scale bounds [{}, {}] must be positive and ordered",
                self.scale_min, self.scale_max
            )));
        }
        if !(self.tilt_max >= 0.0 && self.tilt_max <= PI / 2.0) {
            return Err(Error::Config(format!("tilt bound {} outside [0, pi/2]", self.tilt_max)));
        }
        Ok(())
    }
}

/// Per-slot deformation: scaling, then a tilt about `y`, then a rotation
/// about `z`, then a translation.
///
/// When `linear` is set it replaces the diagonal scaling by an arbitrary
/// 3×3 matrix (the unconstrained affine mode) and `scale` is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub scale: [f64; 3],
    pub tilt_y: f64,
    pub rot_z: f64,
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<[[f64; 3]; 3]>,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Accumulated gradient with respect to every transform parameter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransformGrad {
    pub scale: [f64; 3],
    pub tilt_y: f64,
    pub rot_z: f64,
    pub translation: [f64; 3],
    pub linear: [[f64; 3]; 3],
}

impl TransformGrad {
    pub fn add(&mut self, other: &TransformGrad) {
        for a in 0..3 {
            self.scale[a] += other.scale[a];
            self.translation[a] += other.translation[a];
            for b in 0..3 {
                self.linear[a][b] += other.linear[a][b];
            }
        }
        self.tilt_y += other.tilt_y;
        self.rot_z += other.rot_z;
    }
}

// Relative slack for parameters produced by bounded activations that can
// round one ulp past the closed bound.
const BOUND_SLACK: f64 = 1e-12;

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            scale: [1.0; 3],
            tilt_y: 0.0,
            rot_z: 0.0,
            translation: [0.0; 3],
            linear: None,
        }
    }

    pub fn validate(&self, bounds: &TransformBounds) -> Result<()> {
        let finite = self.scale.iter().chain(&self.translation).all(|v| v.is_finite())
            && self.tilt_y.is_finite()
            && self.rot_z.is_finite()
            && self.linear.iter().flatten().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::ParameterDomain("non-finite transform parameter".into()));
        }
        if self.linear.is_none() {
            let lo = bounds.scale_min * (1.0 - BOUND_SLACK);
            let hi = bounds.scale_max * (1.0 + BOUND_SLACK);
            if let Some(s) = self.scale.iter().find(|s| !(lo..=hi).contains(*s)) {
                return Err(Error::ParameterDomain(format!(
                    "scale {s} outside [{}, {}]",
                    bounds.scale_min, bounds.scale_max
                )));
            }
        }
        if self.tilt_y.abs() > bounds.tilt_max * (1.0 + BOUND_SLACK) {
            return Err(Error::ParameterDomain(format!(
                "tilt {} outside ±{}",
                self.tilt_y, bounds.tilt_max
            )));
        }
        if self.rot_z.abs() > PI * (1.0 + BOUND_SLACK) {
            return Err(Error::ParameterDomain(format!("z rotation {} outside ±pi", self.rot_z)));
        }
        Ok(())
    }

    /// Linear part `Rz · Ry · S` as a row-major matrix.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let (st, ct) = self.tilt_y.sin_cos();
        let (sr, cr) = self.rot_z.sin_cos();
        let ry = [[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]];
        let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
        let s = self.linear.unwrap_or([
            [self.scale[0], 0.0, 0.0],
            [0.0, self.scale[1], 0.0],
            [0.0, 0.0, self.scale[2]],
        ]);
        matmul3(&matmul3(&rz, &ry), &s)
    }

    #[inline]
    fn deform(&self, p: &[f64; 3]) -> [f64; 3] {
        match &self.linear {
            Some(l) => [
                l[0][0] * p[0] + l[0][1] * p[1] + l[0][2] * p[2],
                l[1][0] * p[0] + l[1][1] * p[1] + l[1][2] * p[2],
                l[2][0] * p[0] + l[2][1] * p[1] + l[2][2] * p[2],
            ],
            None => [self.scale[0] * p[0], self.scale[1] * p[1], self.scale[2] * p[2]],
        }
    }

    /// Applies the transform step by step; identity parameters reproduce
    /// the input exactly.
    #[inline]
    pub fn apply_point(&self, p: &[f64; 3]) -> [f64; 3] {
        let (st, ct) = self.tilt_y.sin_cos();
        let (sr, cr) = self.rot_z.sin_cos();
        let s = self.deform(p);
        let a = [ct * s[0] + st * s[2], s[1], ct * s[2] - st * s[0]];
        [
            cr * a[0] - sr * a[1] + self.translation[0],
            sr * a[0] + cr * a[1] + self.translation[1],
            a[2] + self.translation[2],
        ]
    }

    /// Back-propagates `dq = ∂L/∂q` for `q = apply_point(p)`.
    ///
    /// Parameter gradients are accumulated into `grad`; the gradient with
    /// respect to `p` is returned.
    #[inline]
    pub fn backward_point(&self, p: &[f64; 3], dq: &[f64; 3], grad: &mut TransformGrad) -> [f64; 3] {
        let (st, ct) = self.tilt_y.sin_cos();
        let (sr, cr) = self.rot_z.sin_cos();
        let s = self.deform(p);
        let a = [ct * s[0] + st * s[2], s[1], ct * s[2] - st * s[0]];

        for k in 0..3 {
            grad.translation[k] += dq[k];
        }
        grad.rot_z += dq[0] * (-sr * a[0] - cr * a[1]) + dq[1] * (cr * a[0] - sr * a[1]);
        let da = [cr * dq[0] + sr * dq[1], -sr * dq[0] + cr * dq[1], dq[2]];
        grad.tilt_y += da[0] * (-st * s[0] + ct * s[2]) + da[2] * (-ct * s[0] - st * s[2]);
        let ds = [ct * da[0] - st * da[2], da[1], st * da[0] + ct * da[2]];

        match &self.linear {
            Some(l) => {
                let mut dp = [0.0; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        grad.linear[i][j] += ds[i] * p[j];
                        dp[j] += l[i][j] * ds[i];
                    }
                }
                dp
            }
            None => {
                for k in 0..3 {
                    grad.scale[k] += ds[k] * p[k];
                }
                [ds[0] * self.scale[0], ds[1] * self.scale[1], ds[2] * self.scale[2]]
            }
        }
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Applies `t` to every position using the default parameter bounds.
pub fn apply_transform(t: &AffineTransform, p: &PointCloud) -> Result<PointCloud> {
    apply_transform_with(t, p, &TransformBounds::default())
}

pub fn apply_transform_with(t: &AffineTransform, p: &PointCloud, bounds: &TransformBounds) -> Result<PointCloud> {
    t.validate(bounds)?;
    let mut out = p.clone();
    for q in &mut out.positions {
        *q = t.apply_point(q);
    }
    Ok(out)
}
