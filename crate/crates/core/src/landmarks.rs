//! Facial landmark sets in normalized crop coordinates (68-point iBUG layout).

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;


use crate::error::{shape_err, Error, Result};
use crate::geometry::{centroid, Affine2};
use crate::tensor::Tensor;

pub const DEFAULT_LANDMARKS: usize = 68;
pub const JAW: Range<usize> = 0..17;
pub const LEFT_EYE: Range<usize> = 36..42;
pub const RIGHT_EYE: Range<usize> = 42..48;
pub const EYES: Range<usize> = 36..48;
pub const MOUTH: Range<usize> = 48..68;

/// `n` 2-D points, each `[x, y]` normalized to the crop (`x` right, `y` down).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Geometry("non-finite landmark coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return shape_err(format!("odd coordinate count {}", flat.len()));
        }
        Self::new(flat.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.points
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// `[n, 2]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), 2], self.flat()).expect("landmark tensor")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[1] != 2 {
            return shape_err(format!("landmark tensor must be [n,2], got {:?}", t.shape()));
        }
        Self::from_flat(t.data())
    }

    pub fn map(&self, t: &Affine2) -> Self {
        Self { points: self.points.iter().map(|&p| t.apply(p)).collect() }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect() }
    }

    pub fn centroid(&self) -> [f64; 2] {
        centroid(&self.points)
    }

    /// Mean of a point range.
    pub fn range_center(&self, range: Range<usize>) -> Result<[f64; 2]> {
        if range.end > self.len() || range.is_empty() {
            return Err(Error::Index { index: range.end.saturating_sub(1), len: self.len() });
        }
        Ok(centroid(&self.points[range]))
    }

    pub fn left_eye(&self) -> Result<[f64; 2]> {
        self.range_center(LEFT_EYE)
    }

    pub fn right_eye(&self) -> Result<[f64; 2]> {
        self.range_center(RIGHT_EYE)
    }

    pub fn check_same_len(&self, other: &LandmarkSet) -> Result<()> {
        if self.len() != other.len() {
            return shape_err(format!("landmark count {} vs {}", self.len(), other.len()));
        }
        Ok(())
    }
}

/// Canonical eye centers for a crop of side `size` (pixels).
pub fn canonical_eye_anchors(size: f64) -> [[f64; 2]; 2] {
    [[0.3 * size, 0.4 * size], [0.7 * size, 0.4 * size]]
}

fn ellipse(c: [f64; 2], r: [f64; 2], theta: f64) -> [f64; 2] {
    [c[0] + r[0] * theta.cos(), c[1] - r[1] * theta.sin()]
}

/// Geometry parameters of the procedural face.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FaceShape;

impl FaceShape {
    pub const JAW_CENTER: [f64; 2] = [0.5, 0.45];
    pub const JAW_RADII: [f64; 2] = [0.33, 0.42];
    pub const EYE_RADII: [f64; 2] = [0.06, 0.025];
    pub const MOUTH_CENTER: [f64; 2] = [0.5, 0.74];
    pub const MOUTH_OUTER_RX: f64 = 0.12;
    pub const MOUTH_INNER_RX: f64 = 0.08;
    pub const LIP_THICKNESS: f64 = 0.035;

    pub fn outer_ry(open: f64) -> f64 {
        Self::LIP_THICKNESS + 0.5 * open
    }

    pub fn inner_ry(open: f64) -> f64 {
        (0.5 * open).max(0.0)
    }
}

/// Canonical 68-point face with the given mouth opening (normalized units),
/// eye centers at `(0.3, 0.4)` and `(0.7, 0.4)`.
pub fn canonical_face(mouth_open: f64) -> LandmarkSet {
    let mut pts = Vec::with_capacity(DEFAULT_LANDMARKS);
    // jaw 0..17, left ear through chin to right ear
    for k in 0..17 {
        let theta = PI + k as f64 * PI / 16.0;
        pts.push(ellipse(FaceShape::JAW_CENTER, FaceShape::JAW_RADII, theta));
    }
    // brows 17..27
    for (x0, x1) in [(0.18, 0.42), (0.58, 0.82)] {
        for k in 0..5 {
            let u = k as f64 / 4.0;
            pts.push([x0 + (x1 - x0) * u, 0.31 - 0.03 * (PI * u).sin()]);
        }
    }
    // nose bridge 27..31, base 31..36
    for k in 0..4 {
        pts.push([0.5, 0.42 + 0.05 * k as f64]);
    }
    for k in 0..5 {
        let u = k as f64 / 4.0 - 0.5;
        pts.push([0.5 + 0.12 * u, 0.62 + 0.02 * (1.0 - 4.0 * u * u)]);
    }
    // eyes 36..48
    for cx in [0.3, 0.7] {
        for k in 0..6 {
            let theta = PI - k as f64 * PI / 3.0;
            pts.push(ellipse([cx, 0.4], FaceShape::EYE_RADII, theta));
        }
    }
    // outer lip 48..60
    let c = FaceShape::MOUTH_CENTER;
    let ro = [FaceShape::MOUTH_OUTER_RX, FaceShape::outer_ry(mouth_open)];
    for k in 0..12 {
        let theta = PI - k as f64 * PI / 6.0;
        pts.push(ellipse(c, ro, theta));
    }
    // inner lip 60..68
    let ri = [FaceShape::MOUTH_INNER_RX, FaceShape::inner_ry(mouth_open)];
    for k in 0..8 {
        let theta = PI - k as f64 * PI / 4.0;
        pts.push(ellipse(c, ri, theta));
    }
    LandmarkSet { points: pts }
}

/// Default per-point weights: 3 on eyes and mouth, 1 elsewhere.
pub fn default_region_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| if EYES.contains(&i) || MOUTH.contains(&i) { 3.0 } else { 1.0 }).collect()
}
