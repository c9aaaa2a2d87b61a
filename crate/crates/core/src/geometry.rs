//! Planar affine maps, similarity fitting and Procrustes pose estimation.

#[allow(unused_imports)]
use num_traits::Float;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2x3 affine matrix `[a b tx; c d ty]` acting on column vectors `(x, y, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Default for Affine2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] };

    /// `p -> scale * R(angle) * p + t`.
    pub fn similarity(scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { m: [[scale * c, -scale * s, tx], [scale * s, scale * c, ty]] }
    }

    /// Similarity about a pivot point.
    pub fn similarity_about(scale: f64, angle: f64, pivot: [f64; 2], shift: [f64; 2]) -> Self {
        let r = Self::similarity(scale, angle, 0.0, 0.0);
        let p = r.apply(pivot);
        Self::similarity(scale, angle, pivot[0] - p[0] + shift[0], pivot[1] - p[1] + shift[1])
    }

    /// Similarity sending `from[0] -> to[0]` and `from[1] -> to[1]`.
    pub fn from_point_pairs(from: [[f64; 2]; 2], to: [[f64; 2]; 2]) -> Result<Self> {
        let df = [from[1][0] - from[0][0], from[1][1] - from[0][1]];
        let dt = [to[1][0] - to[0][0], to[1][1] - to[0][1]];
        let nf = df[0] * df[0] + df[1] * df[1];
        if nf < 1e-18 || dt[0] * dt[0] + dt[1] * dt[1] < 1e-18 {
            return Err(Error::Geometry("coincident anchor points".into()));
        }
        // complex ratio dt / df = a + ib
        let a = (dt[0] * df[0] + dt[1] * df[1]) / nf;
        let b = (dt[1] * df[0] - dt[0] * df[1]) / nf;
        let tx = to[0][0] - (a * from[0][0] - b * from[0][1]);
        let ty = to[0][1] - (b * from[0][0] + a * from[0][1]);
        Ok(Self { m: [[a, -b, tx], [b, a, ty]] })
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.m;
        [m[0][0] * p[0] + m[0][1] * p[1] + m[0][2], m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]]
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::Geometry("singular transform".into()));
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Self { m: [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]] })
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Affine2) -> Self {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            row[0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            row[1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            row[2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Self { m }
    }

    /// Rotation angle of the linear part, in radians.
    pub fn rotation(&self) -> f64 {
        self.m[1][0].atan2(self.m[0][0])
    }

    /// Isotropic scale of the linear part.
    pub fn scale(&self) -> f64 {
        self.determinant().abs().sqrt()
    }
}

/// Best rotation (radians) taking centered `from` onto centered `to` in the
/// least-squares sense.
pub fn procrustes_rotation(from: &[[f64; 2]], to: &[[f64; 2]]) -> Result<f64> {
    if from.len() != to.len() || from.is_empty() {
        return Err(Error::Shape("procrustes needs equal non-empty point sets".into()));
    }
    let cf = centroid(from);
    let ct = centroid(to);
    let (mut cross, mut dot) = (0.0, 0.0);
    for (p, q) in from.iter().zip(to) {
        let (x0, y0) = (p[0] - cf[0], p[1] - cf[1]);
        let (x1, y1) = (q[0] - ct[0], q[1] - ct[1]);
        cross += x0 * y1 - y0 * x1;
        dot += x0 * x1 + y0 * y1;
    }
    Ok(cross.atan2(dot))
}

pub fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len().max(1) as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sx / n, sy / n]
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}
