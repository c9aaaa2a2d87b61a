//! Landmark heatmaps, the weighted heatmap landmark loss, and extractors.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::face::random_face;
use crate::frame::Frame;
use crate::landmarks::{default_region_weights, LandmarkSet};
use crate::linalg::{cholesky_solve, SquareMatrix};
use crate::params::ParamStore;
use crate::rng::seeded;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Side of every heatmap.
pub const HEATMAP_SIZE: usize = 64;
/// Default Gaussian width in heatmap pixels.
pub const DEFAULT_SIGMA: f64 = 1.5;
/// Smoothing of `|x|` in differentiable distances.
pub const SMOOTH_EPS: f64 = 1e-8;

/// `n` maps of `64 x 64`, stored `[n, 64, 64]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    n: usize,
    data: Vec<f64>,
}

impl HeatmapStack {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * HEATMAP_SIZE * HEATMAP_SIZE {
            return shape_err(format!("{} values for {n} heatmaps", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite heatmap value".into()));
        }
        Ok(Self { n, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [n, HEATMAP_SIZE, HEATMAP_SIZE] => Self::new(*n, t.data().to_vec()),
            s => shape_err(format!("heatmap tensor shape {s:?}")),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.n, HEATMAP_SIZE, HEATMAP_SIZE], self.data.clone()).expect("heatmap shape")
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, k: usize) -> Result<&[f64]> {
        if k >= self.n {
            return Err(Error::Index { index: k, len: self.n });
        }
        let m = HEATMAP_SIZE * HEATMAP_SIZE;
        Ok(&self.data[k * m..(k + 1) * m])
    }

    /// Grid position of the maximum of map `k`, in normalized coordinates.
    pub fn argmax(&self, k: usize) -> Result<[f64; 2]> {
        let map = self.map(k)?;
        let mut best = 0;
        for (i, v) in map.iter().enumerate() {
            if *v > map[best] {
                best = i;
            }
        }
        let s = HEATMAP_SIZE as f64;
        Ok([(best % HEATMAP_SIZE) as f64 / s, (best / HEATMAP_SIZE) as f64 / s])
    }

    /// Argmax landmarks of every map.
    pub fn landmarks(&self) -> Result<LandmarkSet> {
        LandmarkSet::new((0..self.n).map(|k| self.argmax(k)).collect::<Result<Vec<_>>>()?)
    }

    fn check_same(&self, other: &HeatmapStack) -> Result<()> {
        if self.n != other.n {
            return shape_err(format!("heatmap counts {} vs {}", self.n, other.n));
        }
        Ok(())
    }
}

/// Differentiable Gaussian rendering of `[n,2]` normalized coordinates.
pub fn render_on(tape: &Tape, coords: Var, sigma: f64) -> Var {
    tape.gaussians(coords, HEATMAP_SIZE, sigma)
}

/// Unit-peak Gaussian per landmark on the 64 grid.
pub fn render_heatmaps(landmarks: &LandmarkSet, sigma: f64) -> Result<HeatmapStack> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let tape = Tape::new();
    let c = tape.constant(landmarks.to_tensor());
    let h = render_on(&tape, c, sigma);
    HeatmapStack::from_tensor(&tape.value(h))
}

/// Sum of absolute differences over the pixels of map `k`.
pub fn heatmap_point_distance(h1: &HeatmapStack, h2: &HeatmapStack, k: usize) -> Result<f64> {
    h1.check_same(h2)?;
    let (a, b) = (h1.map(k)?, h2.map(k)?);
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

/// Nonnegative per-landmark weights `a_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LandmarkWeights {
    a: Vec<f64>,
}

impl LandmarkWeights {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if let Some(v) = a.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("landmark weight {v} must be finite and nonnegative")));
        }
        Ok(Self { a })
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    /// 3 on eyes and mouth, 1 elsewhere.
    pub fn regions(n: usize) -> Self {
        Self { a: default_region_weights(n) }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.a
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// `lambda_landmark`, the sum of all weights.
    pub fn total(&self) -> f64 {
        self.a.iter().sum()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.a.iter().map(|v| v * c).collect())
    }
}

impl TryFrom<Vec<f64>> for LandmarkWeights {
    type Error = Error;

    fn try_from(a: Vec<f64>) -> Result<Self> {
        Self::new(a)
    }
}

impl From<LandmarkWeights> for Vec<f64> {
    fn from(w: LandmarkWeights) -> Self {
        w.a
    }
}

impl Default for LandmarkWeights {
    fn default() -> Self {
        Self::regions(crate::landmarks::DEFAULT_LANDMARKS)
    }
}

/// Weighted heatmap landmark loss `sum_k a_k d(H1_k, H2_k)`.
pub fn fan_loss(h1: &HeatmapStack, h2: &HeatmapStack, weights: &LandmarkWeights) -> Result<f64> {
    h1.check_same(h2)?;
    if weights.len() != h1.len() {
        return shape_err(format!("{} weights for {} heatmaps", weights.len(), h1.len()));
    }
    let mut total = 0.0;
    for (k, a) in weights.as_slice().iter().enumerate() {
        if *a != 0.0 {
            total += a * heatmap_point_distance(h1, h2, k)?;
        }
    }
    Ok(total)
}

/// Differentiable form of [`fan_loss`] with `|x|` smoothed by [`SMOOTH_EPS`].
pub fn fan_loss_on(tape: &Tape, h1: Var, h2: Var, weights: &LandmarkWeights) -> Var {
    assert_eq!(tape.shape(h1)[0], weights.len(), "fan weights vs heatmaps");
    tape.weighted_l1(h1, h2, weights.as_slice(), SMOOTH_EPS)
}

/// Heatmap extraction backend.
pub trait HeatmapExtractor: Send + Sync {
    fn name(&self) -> &str;
    /// Frame side the extractor expects.
    fn input_size(&self) -> usize;
    fn num_landmarks(&self) -> usize;
    fn extract(&self, frame: &Frame) -> Result<HeatmapStack>;
    /// Heatmaps of a `[3,S,S]` image on the tape, differentiable w.r.t. the image.
    /// Images of another side are bilinearly resized to [`Self::input_size`] first.
    fn extract_on(&self, tape: &Tape, image: Var) -> Result<Var>;
}

fn check_frame(frame: &Frame, size: usize) -> Result<()> {
    if frame.size() != size {
        return shape_err(format!("extractor expects {size}x{size} frames, got {}", frame.size()));
    }
    Ok(())
}

/// Renders heatmaps from stored landmarks keyed by frame index.
///
/// Useful when ground truth is known. Its output does not depend on pixels,
/// so it cannot drive latent optimization.
#[derive(Clone, Debug)]
pub struct RenderExtractor {
    pub sigma: f64,
    pub size: usize,
    landmarks: BTreeMap<usize, LandmarkSet>,
    n: usize,
}

impl RenderExtractor {
    pub fn new(size: usize, sigma: f64, landmarks: BTreeMap<usize, LandmarkSet>) -> Result<Self> {
        let n = landmarks.values().next().map_or(crate::landmarks::DEFAULT_LANDMARKS, LandmarkSet::len);
        if landmarks.values().any(|l| l.len() != n) {
            return shape_err("stored landmark sets differ in size");
        }
        Ok(Self { sigma, size, landmarks, n })
    }
}

impl HeatmapExtractor for RenderExtractor {
    fn name(&self) -> &str {
        "render"
    }

    fn input_size(&self) -> usize {
        self.size
    }

    fn num_landmarks(&self) -> usize {
        self.n
    }

    fn extract(&self, frame: &Frame) -> Result<HeatmapStack> {
        check_frame(frame, self.size)?;
        let l = self
            .landmarks
            .get(&frame.index)
            .ok_or_else(|| Error::Backend(format!("no stored landmarks for frame {}", frame.index)))?;
        render_heatmaps(l, self.sigma)
    }

    fn extract_on(&self, _tape: &Tape, _image: Var) -> Result<Var> {
        Err(Error::Backend("the render extractor is not differentiable w.r.t. pixels".into()))
    }
}

/// Ridge-fit settings for [`LocatorExtractor::fit_procedural`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocatorFit {
    pub samples: usize,
    pub seed: u64,
    pub ridge: f64,
    pub input_size: usize,
    pub pool: usize,
    pub max_open: f64,
    pub max_offset: f64,
    pub max_rotation: f64,
}

impl Default for LocatorFit {
    fn default() -> Self {
        Self {
            samples: 600,
            seed: 0x10c,
            ridge: 1e-4,
            input_size: 64,
            pool: 16,
            max_open: 0.12,
            max_offset: 0.04,
            max_rotation: 0.08,
        }
    }
}

/// Linear landmark regressor over average-pooled pixels, rendered as Gaussians.
///
/// Fully differentiable w.r.t. the input image.
#[derive(Clone, Debug)]
pub struct LocatorExtractor {
    pub sigma: f64,
    input_size: usize,
    pool: usize,
    params: ParamStore,
}

impl LocatorExtractor {
    /// Wraps a weight matrix `[features, 2n]` and bias `[2n]` stored as
    /// `locator.w` / `locator.b`.
    pub fn from_params(params: ParamStore, input_size: usize, pool: usize, sigma: f64) -> Result<Self> {
        {
            let mut it = params.iter();
            let (w, b) = match (it.next(), it.next(), it.next()) {
                (Some(("locator.w", w)), Some(("locator.b", b)), None) => (w, b),
                _ => return shape_err("locator parameters must be locator.w, locator.b"),
            };
            let f = 3 * pool * pool;
            if w.shape().len() != 2 || w.shape()[0] != f || b.shape() != [w.shape()[1]] || w.shape()[1] % 2 != 0 {
                return shape_err(format!("locator shapes {:?} / {:?}", w.shape(), b.shape()));
            }
        }
        if input_size % pool != 0 {
            return shape_err(format!("pool {pool} does not divide {input_size}"));
        }
        Ok(Self { sigma, input_size, pool, params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn pool(&self) -> usize {
        self.pool
    }

    fn features_on(&self, tape: &Tape, image: Var) -> Var {
        let s = tape.shape(image)[1];
        let x = if s != self.input_size { tape.resize_bilinear(image, self.input_size, self.input_size) } else { image };
        let p = tape.avg_pool(x, self.input_size / self.pool);
        tape.reshape(p, &[1, 3 * self.pool * self.pool])
    }

    /// Regressed `[n,2]` coordinates on the tape.
    pub fn coords_on(&self, tape: &Tape, image: Var) -> Var {
        let p = self.params.bind_frozen(tape);
        let f = self.features_on(tape, image);
        let y = tape.matmul(f, p.vars()[0]);
        let y = tape.add_row(y, p.vars()[1]);
        let n = self.num_landmarks();
        tape.reshape(y, &[n, 2])
    }

    /// Regressed (continuous) landmarks of a frame.
    pub fn locate(&self, frame: &Frame) -> Result<LandmarkSet> {
        let tape = Tape::new();
        let x = tape.constant(frame.to_tensor());
        let c = self.coords_on(&tape, x);
        LandmarkSet::from_tensor(&tape.value(c))
    }

    /// Least-squares fit with ridge strength relative to the mean feature energy.
    pub fn fit(samples: &[(Frame, LandmarkSet)], input_size: usize, pool: usize, ridge: f64, sigma: f64) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::EmptyInput("no locator samples".into()))?;
        let n2 = 2 * first.1.len();
        let f = 3 * pool * pool;
        let probe = Self {
            sigma,
            input_size,
            pool,
            params: ParamStore::new(),
        };
        let mut xs = Vec::with_capacity(samples.len() * f);
        let mut ys = Vec::with_capacity(samples.len() * n2);
        for (frame, l) in samples {
            if l.len() * 2 != n2 {
                return shape_err("locator samples differ in landmark count");
            }
            let tape = Tape::new();
            let x = tape.constant(frame.to_tensor());
            let feat = probe.features_on(&tape, x);
            xs.extend_from_slice(tape.value(feat).data());
            ys.extend(l.flat());
        }
        let m = samples.len();
        let mean = |v: &[f64], d: usize| {
            let mut mu = vec![0.0; d];
            for r in 0..m {
                for j in 0..d {
                    mu[j] += v[r * d + j] / m as f64;
                }
            }
            mu
        };
        let (mx, my) = (mean(&xs, f), mean(&ys, n2));
        for r in 0..m {
            for j in 0..f {
                xs[r * f + j] -= mx[j];
            }
            for j in 0..n2 {
                ys[r * n2 + j] -= my[j];
            }
        }
        let mut gram = SquareMatrix::zeros(f);
        let mut rhs = vec![0.0; f * n2];
        for r in 0..m {
            let row = &xs[r * f..(r + 1) * f];
            let yr = &ys[r * n2..(r + 1) * n2];
            for i in 0..f {
                let xi = row[i];
                if xi == 0.0 {
                    continue;
                }
                let g = &mut gram.data[i * f..(i + 1) * f];
                for (gj, xj) in g.iter_mut().zip(row) {
                    *gj += xi * xj;
                }
                let rr = &mut rhs[i * n2..(i + 1) * n2];
                for (o, y) in rr.iter_mut().zip(yr) {
                    *o += xi * y;
                }
            }
        }
        let lam = ridge * gram.trace() / f as f64 + 1e-12;
        for i in 0..f {
            gram.data[i * f + i] += lam;
        }
        let w = cholesky_solve(&gram, &rhs, n2)?;
        let mut b = my;
        for i in 0..f {
            for j in 0..n2 {
                b[j] -= mx[i] * w[i * n2 + j];
            }
        }
        let mut params = ParamStore::new();
        params.add("locator.w", Tensor::new(&[f, n2], w)?);
        params.add("locator.b", Tensor::new(&[n2], b)?);
        Self::from_params(params, input_size, pool, sigma)
    }

    /// Fits on random procedural faces around the canonical crop.
    pub fn fit_procedural(cfg: &LocatorFit) -> Result<Self> {
        let mut rng = seeded(cfg.seed);
        let mut samples = Vec::with_capacity(cfg.samples);
        for i in 0..cfg.samples {
            let p = random_face(&mut rng, cfg.max_open, cfg.max_offset, cfg.max_rotation);
            samples.push((p.render(cfg.input_size, i)?, p.landmarks()));
        }
        Self::fit(&samples, cfg.input_size, cfg.pool, cfg.ridge, DEFAULT_SIGMA)
    }
}

impl HeatmapExtractor for LocatorExtractor {
    fn name(&self) -> &str {
        "regress"
    }

    fn input_size(&self) -> usize {
        self.input_size
    }

    fn num_landmarks(&self) -> usize {
        self.params.iter().nth(1).map_or(0, |(_, b)| b.len() / 2)
    }

    fn extract(&self, frame: &Frame) -> Result<HeatmapStack> {
        check_frame(frame, self.input_size)?;
        let tape = Tape::new();
        let x = tape.constant(frame.to_tensor());
        let h = self.extract_on(&tape, x)?;
        HeatmapStack::from_tensor(&tape.value(h))
    }

    fn extract_on(&self, tape: &Tape, image: Var) -> Result<Var> {
        let c = self.coords_on(tape, image);
        Ok(render_on(tape, c, self.sigma))
    }
}
