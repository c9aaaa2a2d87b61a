//! Face masks, boundary rings, stitching tuning, and paste-back compositing.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::frame::Frame;
use crate::generator::{GeneratorHandle, LatentCode};
use crate::geometry::Affine2;
use crate::heatmap::SMOOTH_EPS;
use crate::landmarks::LandmarkSet;
use crate::optim::{Optimizer, OptimizerKind};
use crate::optimizer::LatentTrajectory;
use crate::params::Bound;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Square binary map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    size: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(size: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != size * size {
            return shape_err(format!("{} mask values for side {size}", data.len()));
        }
        Ok(Self { size, data })
    }

    pub fn zeros(size: usize) -> Self {
        Self { size, data: vec![false; size * size] }
    }

    pub fn ones(size: usize) -> Self {
        Self { size, data: vec![true; size * size] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.size + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.size + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !(*a && *b))
    }

    /// 0 / 255 bytes, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| if *v { 255 } else { 0 }).collect()
    }

    /// Thresholds 8-bit values at 128.
    pub fn from_bytes(size: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(size, bytes.iter().map(|b| *b >= 128).collect())
    }

    /// Dilation with a `(2r+1)^2` square structuring element.
    pub fn dilate(&self, r: usize) -> Mask {
        let s = self.size;
        let mut rows = vec![false; s * s];
        for y in 0..s {
            for x in 0..s {
                let (lo, hi) = (x.saturating_sub(r), (x + r).min(s - 1));
                rows[y * s + x] = (lo..=hi).any(|xx| self.data[y * s + xx]);
            }
        }
        let mut out = vec![false; s * s];
        for y in 0..s {
            let (lo, hi) = (y.saturating_sub(r), (y + r).min(s - 1));
            for x in 0..s {
                out[y * s + x] = (lo..=hi).any(|yy| rows[yy * s + x]);
            }
        }
        Mask { size: s, data: out }
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if self.size != other.size {
            return shape_err(format!("mask sides {} vs {}", self.size, other.size));
        }
        Ok(())
    }
}

/// `dilate(mask, radius) AND NOT mask`.
pub fn boundary_region(mask: &Mask, radius: usize) -> Result<Mask> {
    if radius == 0 {
        return Err(Error::Config("dilation radius must be at least 1".into()));
    }
    let mut d = mask.dilate(radius);
    for (o, m) in d.data.iter_mut().zip(&mask.data) {
        *o &= !*m;
    }
    Ok(d)
}

/// Face mask `m` and the ring `b` just outside it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    mask: Mask,
    boundary: Mask,
}

impl RegionMask {
    pub fn from_mask(mask: Mask, radius: usize) -> Result<Self> {
        let boundary = boundary_region(&mask, radius)?;
        Ok(Self { mask, boundary })
    }

    pub fn new(mask: Mask, boundary: Mask) -> Result<Self> {
        mask.check_same(&boundary)?;
        if !mask.is_disjoint(&boundary) {
            return Err(Error::Geometry("mask and boundary overlap".into()));
        }
        Ok(Self { mask, boundary })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn boundary(&self) -> &Mask {
        &self.boundary
    }
}

/// Face segmentation backend.
pub trait Segmenter: Send + Sync {
    fn name(&self) -> &str;
    /// Face mask on the frame's grid. `landmarks` are normalized to the frame.
    fn segment(&self, frame: &Frame, landmarks: &LandmarkSet) -> Result<Mask>;
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull, counter-clockwise in a y-up sense, without collinear points.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p: Vec<[f64; 2]> = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Whether `q` lies inside or on the hull (tolerance `1e-9`).
fn in_hull(hull: &[[f64; 2]], q: [f64; 2]) -> bool {
    const TOL: f64 = 1e-9;
    match hull.len() {
        0 => false,
        1 => (hull[0][0] - q[0]).abs() <= TOL && (hull[0][1] - q[1]).abs() <= TOL,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let t = ((q[0] - a[0]) * (b[0] - a[0]) + (q[1] - a[1]) * (b[1] - a[1])) / (len * len);
            cross(a, b, q).abs() / len <= TOL && (-TOL..=1.0 + TOL).contains(&t)
        }
        n => (0..n).all(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            cross(a, b, q) / len >= -TOL
        }),
    }
}

/// Filled convex hull of the landmarks, pixel `(x, y)` at `(x/S, y/S)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct HullSegmenter;

impl Segmenter for HullSegmenter {
    fn name(&self) -> &str {
        "hull"
    }

    fn segment(&self, frame: &Frame, landmarks: &LandmarkSet) -> Result<Mask> {
        let s = frame.size();
        let pts: Vec<[f64; 2]> = landmarks.points().iter().map(|p| [p[0] * s as f64, p[1] * s as f64]).collect();
        let hull = convex_hull(&pts);
        let mut m = Mask::zeros(s);
        for y in 0..s {
            for x in 0..s {
                if in_hull(&hull, [x as f64, y as f64]) {
                    m.set(x, y, true);
                }
            }
        }
        Ok(m)
    }
}

/// Face mask of `frame` from `backend`.
pub fn segment_face(frame: &Frame, landmarks: &LandmarkSet, backend: &dyn Segmenter) -> Result<Mask> {
    backend.segment(frame, landmarks)
}

/// Weights and schedule of stitching tuning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    pub lambda_m: f64,
    pub dilation_radius: usize,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Width of the linear alpha ramp used when compositing.
    pub feather: usize,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self { lambda_m: 0.1, dilation_radius: 8, steps: 100, lr: 1e-3, optimizer: OptimizerKind::Adam, feather: 3 }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_m >= 0.0 && self.lr >= 0.0) || self.dilation_radius == 0 {
            return Err(Error::Config("stitching needs lambda_m >= 0, lr >= 0 and radius >= 1".into()));
        }
        // bilinear alpha sampling reaches one pixel past the ramp
        if self.feather + 1 > self.dilation_radius {
            return Err(Error::Config(format!("feather {} must stay inside dilation radius {}", self.feather, self.dilation_radius)));
        }
        Ok(())
    }
}

/// Stitching loss value with its unweighted terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StitchTerms {
    pub total: f64,
    pub boundary: f64,
    pub mask: f64,
    /// Set when the boundary ring is empty and its term was taken as zero.
    pub empty_boundary: bool,
}

fn region_weights(m: &Mask) -> Option<Vec<f64>> {
    let n = m.count();
    if n == 0 {
        return None;
    }
    let w = 1.0 / (3 * n) as f64;
    let px: Vec<f64> = m.data().iter().map(|v| if *v { w } else { 0.0 }).collect();
    Some([px.as_slice(), px.as_slice(), px.as_slice()].concat())
}

/// Stitching objective for one frame on `tape`; `anchor` is `G(w; θ_orig)`.
fn stitching_on(
    tape: &Tape,
    x: Var,
    f: &Tensor,
    anchor: &Tensor,
    region: &RegionMask,
    lambda_m: f64,
) -> (Var, Option<Var>, Option<Var>) {
    let b = region_weights(region.boundary()).map(|w| tape.weighted_l1(x, tape.constant(f.clone()), &w, SMOOTH_EPS));
    let m = region_weights(region.mask()).map(|w| tape.weighted_l1(x, tape.constant(anchor.clone()), &w, SMOOTH_EPS));
    let mut total = b.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    if let Some(mv) = m {
        if lambda_m != 0.0 {
            total = tape.add(total, tape.scale(mv, lambda_m));
        }
    }
    (total, b, m)
}

fn check_region(handle: &GeneratorHandle, f: &Frame, region: &RegionMask) -> Result<()> {
    handle.check_frame(f)?;
    if region.mask().size() != f.size() || region.boundary().size() != f.size() {
        return shape_err(format!("region side {} for frame side {}", region.mask().size(), f.size()));
    }
    Ok(())
}

/// Boundary L1 to the original frame plus `λ_m` times mask L1 to the
/// `θ_orig` synthesis, each averaged over the active pixels and channels.
pub fn stitching_loss(
    handle: &GeneratorHandle,
    w: &LatentCode,
    f: &Frame,
    region: &RegionMask,
    config: &StitchConfig,
) -> Result<StitchTerms> {
    let (terms, _) = stitching_loss_grad(handle, w, f, region, config)?;
    Ok(terms)
}

/// [`stitching_loss`] and its gradient w.r.t. the current weights.
pub fn stitching_loss_grad(
    handle: &GeneratorHandle,
    w: &LatentCode,
    f: &Frame,
    region: &RegionMask,
    config: &StitchConfig,
) -> Result<(StitchTerms, Vec<Tensor>)> {
    config.validate()?;
    check_region(handle, f, region)?;
    let anchor = handle.synthesize_orig(w)?.to_tensor();
    let tape = Tape::new();
    let p = handle.params().bind(&tape);
    let (terms, total) = frame_terms(&tape, handle, &p, w, &f.to_tensor(), &anchor, region, config.lambda_m);
    let grads = p.grads(&tape.backward(total));
    Ok((terms, grads))
}

#[allow(clippy::too_many_arguments)]
fn frame_terms(
    tape: &Tape,
    handle: &GeneratorHandle,
    p: &Bound,
    w: &LatentCode,
    f: &Tensor,
    anchor: &Tensor,
    region: &RegionMask,
    lambda_m: f64,
) -> (StitchTerms, Var) {
    let wv = tape.constant(w.tensor().clone());
    let x = handle.forward_on(tape, wv, p);
    let (total, b, m) = stitching_on(tape, x, f, anchor, region, lambda_m);
    let terms = StitchTerms {
        total: tape.scalar(total),
        boundary: b.map_or(0.0, |v| tape.scalar(v)),
        mask: m.map_or(0.0, |v| tape.scalar(v)),
        empty_boundary: b.is_none(),
    };
    (terms, total)
}

/// Mean boundary and mask terms over a clip under the handle's weights.
pub fn mean_stitch_terms(
    frames: &[Frame],
    trajectory: &LatentTrajectory,
    regions: &[RegionMask],
    handle: &GeneratorHandle,
    config: &StitchConfig,
) -> Result<StitchTerms> {
    let mut acc = StitchTerms::default();
    for ((f, w), r) in frames.iter().zip(&trajectory.codes).zip(regions) {
        let t = stitching_loss(handle, w, f, r, config)?;
        acc.total += t.total;
        acc.boundary += t.boundary;
        acc.mask += t.mask;
        acc.empty_boundary |= t.empty_boundary;
    }
    let n = frames.len().max(1) as f64;
    acc.total /= n;
    acc.boundary /= n;
    acc.mask /= n;
    Ok(acc)
}

/// Tunes `θ` on the mean stitching loss over the clip.
///
/// The mask term is anchored to the weights passed in: the returned handle's
/// `θ_orig` is the input handle's current `θ`. Latents are not modified.
pub fn stitch_tune(
    frames: &[Frame],
    trajectory: &LatentTrajectory,
    regions: &[RegionMask],
    handle: &GeneratorHandle,
    config: &StitchConfig,
) -> Result<GeneratorHandle> {
    config.validate()?;
    let n = frames.len();
    if trajectory.codes.len() != n || regions.len() != n {
        return shape_err(format!("{n} frames, {} latents, {} regions", trajectory.codes.len(), regions.len()));
    }
    let base = handle.rebased();
    for ((f, w), r) in frames.iter().zip(&trajectory.codes).zip(regions) {
        check_region(&base, f, r)?;
        base.check_latent(w)?;
    }
    if config.steps == 0 || n == 0 {
        return Ok(base);
    }
    let anchors = trajectory.codes.iter().map(|w| base.synthesize_orig(w).map(|fr| fr.to_tensor())).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Tensor> = frames.iter().map(Frame::to_tensor).collect();
    let mut params = base.params().clone();
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    for step in 0..config.steps {
        let current = base.with_params(params.clone())?;
        let tape = Tape::new();
        let p = params.bind(&tape);
        let mut total: Option<Var> = None;
        for i in 0..n {
            let (_, t) = frame_terms(&tape, &current, &p, &trajectory.codes[i], &targets[i], &anchors[i], &regions[i], config.lambda_m);
            total = Some(match total {
                Some(acc) => tape.add(acc, t),
                None => t,
            });
        }
        let loss = tape.scale(total.expect("at least one frame"), 1.0 / n as f64);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Training { step, context: "stitching tuning".into() });
        }
        let grads = p.grads(&tape.backward(loss));
        let mut slots: Vec<&mut [f64]> = params.tensors_mut().map(|t| t.data_mut()).collect();
        let gs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
        opt.step(&mut slots, &gs);
    }
    base.with_params(params)
}

/// Alpha on the crop grid: 1 inside the mask, a linear ramp of `feather`
/// pixels outside it (Chebyshev distance), 0 beyond.
pub fn feathered_alpha(mask: &Mask, feather: usize) -> Vec<f64> {
    let mut alpha: Vec<f64> = mask.data().iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
    for d in 1..=feather {
        let ring = boundary_region(&mask.dilate(d - 1), 1).expect("radius 1");
        let a = 1.0 - d as f64 / (feather + 1) as f64;
        for (o, r) in alpha.iter_mut().zip(ring.data()) {
            if *r {
                *o = a;
            }
        }
    }
    alpha
}

fn sample_grid(values: &[f64], size: usize, x: f64, y: f64) -> f64 {
    let max = (size - 1) as f64;
    if !(x >= 0.0 && y >= 0.0 && x <= max && y <= max) {
        return 0.0;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |yy: usize, xx: usize| values[yy * size + xx];
    let top = if fx == 0.0 { p(y0, x0) } else { (1.0 - fx) * p(y0, x0) + fx * p(y0, x1) };
    let bot = if fx == 0.0 { p(y1, x0) } else { (1.0 - fx) * p(y1, x0) + fx * p(y1, x1) };
    if fy == 0.0 {
        top
    } else {
        (1.0 - fy) * top + fy * bot
    }
}

/// Pastes `edited` (a crop with crop-to-source transform `crop_transform`)
/// into `source` through the feathered `mask`. Source pixels whose alpha is
/// zero are copied unchanged.
pub fn composite(edited: &Frame, source: &Frame, mask: &Mask, crop_transform: &Affine2, feather: usize) -> Result<Frame> {
    if mask.size() != edited.size() {
        return shape_err(format!("mask side {} for crop side {}", mask.size(), edited.size()));
    }
    let inv = crop_transform.inverse()?;
    let alpha = feathered_alpha(mask, feather);
    let (cs, ss) = (edited.size(), source.size());
    let mut out = source.clone();
    for y in 0..ss {
        for x in 0..ss {
            let q = inv.apply([x as f64, y as f64]);
            let a = sample_grid(&alpha, cs, q[0], q[1]);
            if a == 0.0 {
                continue;
            }
            for c in 0..3 {
                let s = source.get(c, y, x);
                let e = edited.sample(c, q[0], q[1]);
                let v = if a == 1.0 { e } else { s + a * (e - s) };
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_ring_is_eight_neighbourhood() {
        let mut m = Mask::zeros(5);
        m.set(2, 2, true);
        let b = boundary_region(&m, 1).unwrap();
        assert_eq!(b.count(), 8);
        assert!(!b.get(2, 2));
        assert!(b.get(1, 1) && b.get(3, 3));
        assert_eq!(boundary_region(&Mask::ones(4), 2).unwrap().count(), 0);
        assert!(boundary_region(&m, 0).is_err());
    }

    #[test]
    fn square_hull_fills_square() {
        let f = Frame::filled(64, [0.0; 3], 0).unwrap();
        let l = LandmarkSet::new(alloc::vec![[0.25, 0.25], [0.75, 0.25], [0.75, 0.75], [0.25, 0.75], [0.5, 0.5]]).unwrap();
        let m = segment_face(&f, &l, &HullSegmenter).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(m.get(x, y), (16..=48).contains(&x) && (16..=48).contains(&y));
            }
        }
        let empty = segment_face(&f, &LandmarkSet::new(Vec::new()).unwrap(), &HullSegmenter).unwrap();
        assert_eq!(empty.count(), 0);
    }

    #[test]
    fn feather_ramp_values() {
        let mut m = Mask::zeros(9);
        m.set(4, 4, true);
        let a = feathered_alpha(&m, 3);
        assert_eq!(a[4 * 9 + 4], 1.0);
        assert_eq!(a[4 * 9 + 5], 0.75);
        assert_eq!(a[4 * 9 + 7], 0.25);
        assert_eq!(a[4 * 9 + 8], 0.0);
    }
}
