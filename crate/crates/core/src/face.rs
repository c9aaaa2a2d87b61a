//! Procedural face fixture with analytically known landmarks.
//!
//! A face is the canonical 68-point template moved by an expression offset
//! and a similarity pose. Rendering evaluates soft-edged primitives (head,
//! brows, eyes, nose, lips, mouth interior) in canonical coordinates, so the
//! features sit exactly where the landmarks say they are.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::error::Result;
use crate::frame::{Frame, FrameSequence};
use crate::geometry::Affine2;
use crate::landmarks::{canonical_face, FaceShape, LandmarkSet};
use crate::rng::{seeded, symmetric};

const SOFT: f64 = 0.008;
const BACKGROUND: [f64; 3] = [0.30, 0.38, 0.50];
const SKIN: [f64; 3] = [0.86, 0.68, 0.56];
const BROW: [f64; 3] = [0.28, 0.18, 0.12];
const SCLERA: [f64; 3] = [0.95, 0.94, 0.92];
const IRIS: [f64; 3] = [0.15, 0.10, 0.08];
const NOSE: [f64; 3] = [0.70, 0.52, 0.44];
const LIPS: [f64; 3] = [0.72, 0.30, 0.32];
const MOUTH: [f64; 3] = [0.22, 0.05, 0.08];

/// Parameters of one procedural face.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceParams {
    /// Vertical mouth opening in normalized units (0 = closed).
    pub mouth_open: f64,
    /// Expression offset applied to the whole face before the pose.
    pub offset: [f64; 2],
    /// Canonical-to-image similarity in normalized coordinates.
    pub pose: Affine2,
}

impl Default for FaceParams {
    fn default() -> Self {
        Self { mouth_open: 0.02, offset: [0.0, 0.0], pose: Affine2::IDENTITY }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ellipse_alpha(u: [f64; 2], c: [f64; 2], r: [f64; 2]) -> f64 {
    if r[0] <= 0.0 || r[1] <= 0.0 {
        return 0.0;
    }
    let dx = (u[0] - c[0]) / r[0];
    let dy = (u[1] - c[1]) / r[1];
    let g = (1.0 - (dx * dx + dy * dy).sqrt()) * r[0].min(r[1]);
    sigmoid(g / SOFT)
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (p[0] - a[0] - t * vx, p[1] - a[1] - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn polyline_alpha(u: [f64; 2], pts: &[[f64; 2]], half_width: f64) -> f64 {
    let d = pts.windows(2).map(|w| segment_distance(u, w[0], w[1])).fold(f64::INFINITY, f64::min);
    sigmoid((half_width - d) / SOFT)
}

fn blend(c: &mut [f64; 3], over: [f64; 3], a: f64) {
    for k in 0..3 {
        c[k] = c[k] * (1.0 - a) + over[k] * a;
    }
}

impl FaceParams {
    pub fn landmarks(&self) -> LandmarkSet {
        canonical_face(self.mouth_open).translated(self.offset[0], self.offset[1]).map(&self.pose)
    }

    /// Color at a canonical-space point.
    fn shade(&self, u: [f64; 2], template: &LandmarkSet) -> [f64; 3] {
        let pts = template.points();
        let mut c = BACKGROUND;
        c[2] -= 0.1 * u[1];
        blend(&mut c, SKIN, ellipse_alpha(u, FaceShape::JAW_CENTER, FaceShape::JAW_RADII));
        blend(&mut c, BROW, polyline_alpha(u, &pts[17..22], 0.012));
        blend(&mut c, BROW, polyline_alpha(u, &pts[22..27], 0.012));
        blend(&mut c, NOSE, polyline_alpha(u, &pts[27..31], 0.008));
        blend(&mut c, NOSE, polyline_alpha(u, &pts[31..36], 0.010));
        for cx in [0.3, 0.7] {
            blend(&mut c, SCLERA, ellipse_alpha(u, [cx, 0.4], FaceShape::EYE_RADII));
            blend(&mut c, IRIS, ellipse_alpha(u, [cx, 0.4], [0.02, 0.02]));
        }
        let mc = FaceShape::MOUTH_CENTER;
        let outer = [FaceShape::MOUTH_OUTER_RX, FaceShape::outer_ry(self.mouth_open)];
        blend(&mut c, LIPS, ellipse_alpha(u, mc, outer));
        let inner = [FaceShape::MOUTH_INNER_RX, FaceShape::inner_ry(self.mouth_open)];
        blend(&mut c, MOUTH, ellipse_alpha(u, mc, inner));
        for v in &mut c {
            *v = v.clamp(0.0, 1.0);
        }
        c
    }

    /// Renders the face at `size x size`; pixel `(x, y)` sits at `(x/size, y/size)`.
    pub fn render(&self, size: usize, index: usize) -> Result<Frame> {
        let inv = self.pose.inverse()?;
        let template = canonical_face(self.mouth_open);
        let n = size * size;
        let mut px = vec![0.0; 3 * n];
        for y in 0..size {
            for x in 0..size {
                let p = inv.apply([x as f64 / size as f64, y as f64 / size as f64]);
                let u = [p[0] - self.offset[0], p[1] - self.offset[1]];
                let c = self.shade(u, &template);
                for k in 0..3 {
                    px[k * n + y * size + x] = c[k];
                }
            }
        }
        Frame::new(size, px, index)
    }
}

/// Settings for a procedural talking clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipSpec {
    pub frames: usize,
    pub size: usize,
    pub fps: f64,
    /// Peak head rotation in radians.
    pub max_rotation: f64,
    /// Peak head translation in normalized units.
    pub max_shift: f64,
    /// Mouth opening oscillates between 0 and this value.
    pub max_open: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self { frames: 10, size: 64, fps: 25.0, max_rotation: 0.05, max_shift: 0.02, max_open: 0.08 }
    }
}

/// A rendered clip together with its per-frame face parameters.
#[derive(Clone, Debug)]
pub struct ToyClip {
    pub frames: FrameSequence,
    pub params: Vec<FaceParams>,
}

impl ToyClip {
    pub fn landmarks(&self) -> Vec<LandmarkSet> {
        self.params.iter().map(FaceParams::landmarks).collect()
    }
}

/// Smooth random motion: a sinusoidal mouth plus slow head drift.
pub fn procedural_clip(spec: &ClipSpec, seed: u64) -> Result<ToyClip> {
    let mut rng = seeded(seed);
    let phase = rng.random_range(0.0..2.0 * PI);
    let period = rng.random_range(6.0..10.0);
    let rot = symmetric(&mut rng, spec.max_rotation);
    let shift = [symmetric(&mut rng, spec.max_shift), symmetric(&mut rng, spec.max_shift)];
    let mut params = Vec::with_capacity(spec.frames);
    let mut frames = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let t = i as f64 / spec.frames.max(1) as f64;
        let open = 0.5 * spec.max_open * (1.0 - (2.0 * PI * i as f64 / period + phase).cos());
        let a = rot * (PI * t).sin();
        let pose = Affine2::similarity_about(1.0, a, [0.5, 0.5], [shift[0] * t, shift[1] * t]);
        let p = FaceParams { mouth_open: open, offset: [0.0, 0.0], pose };
        frames.push(p.render(spec.size, i)?);
        params.push(p);
    }
    Ok(ToyClip { frames: FrameSequence::new(frames, spec.fps)?, params })
}

/// Random face parameters in a crop-like neighbourhood of the canonical face.
pub fn random_face<R: Rng>(rng: &mut R, max_open: f64, max_offset: f64, max_rotation: f64) -> FaceParams {
    let open = rng.random_range(0.0..=max_open);
    let offset = [symmetric(rng, max_offset), symmetric(rng, max_offset)];
    let a = symmetric(rng, max_rotation);
    let s = 1.0 + symmetric(rng, 0.5 * max_offset);
    FaceParams { mouth_open: open, offset, pose: Affine2::similarity_about(s, a, [0.5, 0.5], [0.0, 0.0]) }
}
