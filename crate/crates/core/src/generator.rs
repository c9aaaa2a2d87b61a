//! Generator backends, latent inversion, and pivotal tuning.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::face::random_face;
use crate::frame::{Frame, FrameSequence};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{Bound, ParamStore};
use crate::perceptual::PerceptualMetric;
use crate::rng::{normal, seeded};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Layerwise latent `w`, an `L x d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    w: Tensor,
}

impl LatentCode {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.shape().len() != 2 {
            return shape_err(format!("latent must be [L,d], got {:?}", w.shape()));
        }
        if !w.is_finite() {
            return Err(Error::Shape("non-finite latent".into()));
        }
        Ok(Self { w })
    }

    pub fn zeros(layers: usize, dim: usize) -> Self {
        Self { w: Tensor::zeros(&[layers, dim]) }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.w
    }

    pub fn data(&self) -> &[f64] {
        self.w.data()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.w.shape()[0], self.w.shape()[1])
    }

    /// Squared Euclidean distance over all entries.
    pub fn distance_sq(&self, other: &LatentCode) -> Result<f64> {
        if self.shape() != other.shape() {
            return shape_err(format!("latent shapes {:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(self.data().iter().zip(other.data()).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

/// Network structure of a generator; parameters live in a [`ParamStore`].
pub trait GeneratorArch: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn latent_shape(&self) -> (usize, usize);
    fn output_size(&self) -> usize;
    fn init_params(&self, seed: u64) -> ParamStore;
    /// `[L,d]` latent to a `[3,S,S]` image in `(0,1)`.
    fn forward(&self, tape: &Tape, w: Var, params: &Bound) -> Var;
}

/// Sizes of the bundled generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyGeneratorConfig {
    pub layers: usize,
    pub dim: usize,
    pub channels: usize,
    pub output_size: usize,
}

impl Default for ToyGeneratorConfig {
    fn default() -> Self {
        Self { layers: 4, dim: 32, channels: 8, output_size: 64 }
    }
}

/// Transposed-convolution stack with one latent row per resolution block.
///
/// Row 0 is mapped linearly to the base feature map (side `S / 2^(L-1)`). Each
/// later row modulates one stride-2 upsampling block through a per-channel
/// scale `1 + w_b A_b` and shift `w_b B_b + c_b`. The last block emits RGB
/// through a sigmoid.
#[derive(Clone, Debug)]
pub struct ToyGenerator {
    cfg: ToyGeneratorConfig,
}

impl ToyGenerator {
    pub fn new(cfg: ToyGeneratorConfig) -> Result<Self> {
        if cfg.layers == 0 || cfg.dim == 0 || cfg.channels == 0 {
            return Err(Error::Config("generator sizes must be positive".into()));
        }
        if !cfg.output_size.is_power_of_two() || cfg.output_size >> (cfg.layers - 1) == 0 {
            return Err(Error::Config(format!("output size {} too small for {} layers", cfg.output_size, cfg.layers)));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> ToyGeneratorConfig {
        self.cfg
    }

    fn base(&self) -> usize {
        self.cfg.output_size >> (self.cfg.layers - 1)
    }

    fn block_channels(&self, b: usize) -> usize {
        if b + 1 == self.cfg.layers {
            3
        } else {
            self.cfg.channels
        }
    }
}

impl GeneratorArch for ToyGenerator {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_shape(&self) -> (usize, usize) {
        (self.cfg.layers, self.cfg.dim)
    }

    fn output_size(&self) -> usize {
        self.cfg.output_size
    }

    fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = seeded(seed);
        let mut p = ParamStore::new();
        let d = self.cfg.dim;
        let base = self.base();
        let c0 = self.block_channels(0);
        let width = c0 * base * base;
        p.add_normal("map.w", &[d, width], 0.5 / (d as f64).sqrt(), &mut rng);
        p.add_normal("map.b", &[width], 0.5, &mut rng);
        for b in 1..self.cfg.layers {
            let (cin, cout) = (self.block_channels(b - 1), self.block_channels(b));
            // each output pixel of a k4 s2 transposed conv sees 4 taps per input channel
            let std = 1.0 / ((cin * 4) as f64).sqrt();
            p.add_normal(format!("up{b}.w"), &[cin, cout, 4, 4], std, &mut rng);
            p.add_normal(format!("style{b}.a"), &[d, cout], 0.1 / (d as f64).sqrt(), &mut rng);
            p.add_normal(format!("style{b}.b"), &[d, cout], 0.1 / (d as f64).sqrt(), &mut rng);
            p.add(format!("up{b}.c"), Tensor::zeros(&[cout]));
        }
        p
    }

    fn forward(&self, tape: &Tape, w: Var, params: &Bound) -> Var {
        let v = params.vars();
        let base = self.base();
        let c0 = self.block_channels(0);
        let last = self.cfg.layers == 1;
        let w0 = tape.row(w, 0);
        let h = tape.add_row(tape.matmul(w0, v[0]), v[1]);
        let h = tape.reshape(h, &[c0, base, base]);
        let mut x = if last { tape.sigmoid(h) } else { tape.tanh(h) };
        for b in 1..self.cfg.layers {
            let k = 2 + 4 * (b - 1);
            let (wt, a, bb, c) = (v[k], v[k + 1], v[k + 2], v[k + 3]);
            let y = tape.conv_transpose2d(x, wt, 2, 1);
            let wb = tape.row(w, b);
            let cout = self.block_channels(b);
            let scale = tape.add_scalar(tape.reshape(tape.matmul(wb, a), &[cout]), 1.0);
            let shift = tape.add(tape.reshape(tape.matmul(wb, bb), &[cout]), c);
            let y = tape.channel_affine(y, scale, shift);
            x = if b + 1 == self.cfg.layers { tape.sigmoid(y) } else { tape.tanh(y) };
        }
        x
    }
}

/// A generator architecture with current weights `θ` and the frozen snapshot
/// `θ_orig` taken at construction.
#[derive(Clone)]
pub struct GeneratorHandle {
    arch: Arc<dyn GeneratorArch>,
    params: ParamStore,
    orig: Arc<ParamStore>,
}

impl fmt::Debug for GeneratorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorHandle")
            .field("arch", &self.arch.name())
            .field("latent_shape", &self.arch.latent_shape())
            .field("output_size", &self.arch.output_size())
            .finish()
    }
}

impl GeneratorHandle {
    pub fn new(arch: Arc<dyn GeneratorArch>, params: ParamStore) -> Result<Self> {
        arch.init_params(0).check_compatible(&params)?;
        let orig = Arc::new(params.clone());
        Ok(Self { arch, params, orig })
    }

    pub fn from_arch(arch: Arc<dyn GeneratorArch>, seed: u64) -> Self {
        let params = arch.init_params(seed);
        let orig = Arc::new(params.clone());
        Self { arch, params, orig }
    }

    pub fn arch(&self) -> &Arc<dyn GeneratorArch> {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_orig(&self) -> &ParamStore {
        &self.orig
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        self.arch.latent_shape()
    }

    pub fn output_size(&self) -> usize {
        self.arch.output_size()
    }

    /// Same architecture and `θ_orig`, new current weights.
    pub fn with_params(&self, params: ParamStore) -> Result<Self> {
        self.params.check_compatible(&params)?;
        Ok(Self { arch: self.arch.clone(), params, orig: self.orig.clone() })
    }

    /// Makes the current weights the new `θ_orig`.
    pub fn rebased(&self) -> Self {
        Self { arch: self.arch.clone(), params: self.params.clone(), orig: Arc::new(self.params.clone()) }
    }

    pub fn check_latent(&self, w: &LatentCode) -> Result<()> {
        if w.shape() != self.latent_shape() {
            return shape_err(format!("latent {:?} for generator expecting {:?}", w.shape(), self.latent_shape()));
        }
        Ok(())
    }

    pub fn check_frame(&self, f: &Frame) -> Result<()> {
        if f.size() != self.output_size() {
            return shape_err(format!("frame side {} for generator output {}", f.size(), self.output_size()));
        }
        Ok(())
    }

    pub fn forward_on(&self, tape: &Tape, w: Var, params: &Bound) -> Var {
        self.arch.forward(tape, w, params)
    }

    fn render(&self, w: &LatentCode, params: &ParamStore, index: usize) -> Result<Frame> {
        self.check_latent(w)?;
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let wv = tape.constant(w.tensor().clone());
        let x = self.arch.forward(&tape, wv, &p);
        Frame::from_tensor(&tape.value(x), index)
    }

    pub fn synthesize_indexed(&self, w: &LatentCode, index: usize) -> Result<Frame> {
        self.render(w, &self.params, index)
    }

    /// Synthesis under `θ_orig`.
    pub fn synthesize_orig(&self, w: &LatentCode) -> Result<Frame> {
        self.render(w, &self.orig, 0)
    }
}

/// `G(w; θ)` as a frame.
pub fn synthesize(w: &LatentCode, handle: &GeneratorHandle) -> Result<Frame> {
    handle.synthesize_indexed(w, 0)
}

/// Frame-to-latent encoder backend.
pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn encode(&self, frame: &Frame, handle: &GeneratorHandle) -> Result<LatentCode>;
}

/// Inversion by gradient descent on pixel MSE, starting from `w = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyEncoder {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl Default for ToyEncoder {
    fn default() -> Self {
        Self { steps: 500, lr: 0.05, optimizer: OptimizerKind::Adam }
    }
}

impl EncoderBackend for ToyEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn encode(&self, frame: &Frame, handle: &GeneratorHandle) -> Result<LatentCode> {
        handle.check_frame(frame)?;
        let (l, d) = handle.latent_shape();
        let mut w = Tensor::zeros(&[l, d]);
        let mut opt = Optimizer::new(self.optimizer, self.lr);
        let target = frame.to_tensor();
        for step in 0..self.steps {
            let tape = Tape::new();
            let p = handle.params().bind_frozen(&tape);
            let wv = tape.leaf(w.clone());
            let x = handle.forward_on(&tape, wv, &p);
            let loss = tape.mse(x, tape.constant(target.clone()));
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Optimization { frame: frame.index, iteration: step });
            }
            let g = tape.backward(loss).get(wv);
            opt.step(&mut [w.data_mut()], &[g.data()]);
        }
        LatentCode::new(w)
    }
}

/// Pivot latent for `frame`.
pub fn invert(frame: &Frame, encoder: &dyn EncoderBackend, handle: &GeneratorHandle) -> Result<LatentCode> {
    encoder.encode(frame, handle)
}

/// Weights and schedule of pivotal tuning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PtiConfig {
    pub lambda_l2: f64,
    pub lambda_r: f64,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Radius of the latent ball sampled by the locality regularizer.
    pub locality_radius: f64,
    pub seed: u64,
}

impl Default for PtiConfig {
    fn default() -> Self {
        Self {
            lambda_l2: 1.0,
            lambda_r: 0.1,
            steps: 350,
            lr: 3e-4,
            optimizer: OptimizerKind::Adam,
            locality_radius: 1.0,
            seed: 0,
        }
    }
}

impl PtiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l2 >= 0.0 && self.lambda_r >= 0.0 && self.lr >= 0.0 && self.locality_radius >= 0.0) {
            return Err(Error::Config("PTI weights, rate and radius must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Samples the locality-regularizer latent: a uniform point of the ball of
/// `radius` around a random interpolation of two pivots.
pub fn sample_locality_latent<R: Rng>(pivots: &[LatentCode], radius: f64, rng: &mut R) -> Result<LatentCode> {
    let first = pivots.first().ok_or_else(|| Error::EmptyInput("no pivots".into()))?;
    let (l, d) = first.shape();
    let a = &pivots[rng.random_range(0..pivots.len())];
    let b = &pivots[rng.random_range(0..pivots.len())];
    let t: f64 = rng.random_range(0.0..=1.0);
    let dir: Vec<f64> = (0..l * d).map(|_| normal(rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let r = radius * rng.random_range(0.0f64..=1.0).powf(1.0 / (l * d) as f64);
    let data = (0..l * d).map(|i| a.data()[i] + t * (b.data()[i] - a.data()[i]) + r * dir[i] / norm).collect();
    LatentCode::new(Tensor::new(&[l, d], data)?)
}

fn locality_on(
    tape: &Tape,
    handle: &GeneratorHandle,
    params: &Bound,
    z: &LatentCode,
    perceptual: &dyn PerceptualMetric,
) -> Result<Var> {
    let anchor = handle.synthesize_orig(z)?.to_tensor();
    let zv = tape.constant(z.tensor().clone());
    let x = handle.forward_on(tape, zv, params);
    let a = tape.constant(anchor);
    let p = perceptual.distance_on(tape, x, a);
    Ok(tape.add(p, tape.mse(x, a)))
}

/// Locality regularizer: perceptual plus L2 distance between `G(z; θ)` and
/// `G(z; θ_orig)` at one latent drawn by [`sample_locality_latent`].
pub fn locality_regularizer<R: Rng>(
    handle: &GeneratorHandle,
    pivots: &[LatentCode],
    radius: f64,
    perceptual: &dyn PerceptualMetric,
    rng: &mut R,
) -> Result<f64> {
    let z = sample_locality_latent(pivots, radius, rng)?;
    handle.check_latent(&z)?;
    let tape = Tape::new();
    let p = handle.params().bind_frozen(&tape);
    let v = locality_on(&tape, handle, &p, &z, perceptual)?;
    Ok(tape.scalar(v))
}

/// Per-frame reconstruction terms `(perceptual, mse)` of the pivots under the
/// handle's current weights.
pub fn reconstruction_terms(
    frames: &FrameSequence,
    pivots: &[LatentCode],
    handle: &GeneratorHandle,
    perceptual: &dyn PerceptualMetric,
) -> Result<Vec<(f64, f64)>> {
    if frames.len() != pivots.len() {
        return shape_err(format!("{} frames for {} pivots", frames.len(), pivots.len()));
    }
    frames
        .frames()
        .iter()
        .zip(pivots)
        .map(|(f, w)| {
            let r = synthesize(w, handle)?;
            f.check_same_size(&r)?;
            let mse = f.pixels().iter().zip(r.pixels()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / f.pixels().len() as f64;
            Ok((perceptual.distance(f, &r)?, mse))
        })
        .collect()
}

/// One evaluation of the pivotal-tuning objective and its gradient w.r.t. `θ`.
///
/// Returns `(objective, per-frame perceptual terms, per-frame mse terms, grads)`.
pub fn pti_objective<R: Rng>(
    frames: &FrameSequence,
    pivots: &[LatentCode],
    handle: &GeneratorHandle,
    params: &ParamStore,
    config: &PtiConfig,
    perceptual: &dyn PerceptualMetric,
    rng: &mut R,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<Tensor>)> {
    let n = frames.len();
    let tape = Tape::new();
    let p = params.bind(&tape);
    let mut total: Option<Var> = None;
    let (mut percs, mut mses) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (f, w) in frames.frames().iter().zip(pivots) {
        let wv = tape.constant(w.tensor().clone());
        let x = handle.forward_on(&tape, wv, &p);
        let fv = tape.constant(f.to_tensor());
        let perc = perceptual.distance_on(&tape, fv, x);
        let mse = tape.mse(x, fv);
        percs.push(tape.scalar(perc));
        mses.push(tape.scalar(mse));
        let term = tape.add(perc, tape.scale(mse, config.lambda_l2));
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    let mut obj = tape.scale(total.expect("at least one frame"), 1.0 / n as f64);
    if config.lambda_r != 0.0 {
        let z = sample_locality_latent(pivots, config.locality_radius, rng)?;
        let lr = locality_on(&tape, handle, &p, &z, perceptual)?;
        obj = tape.add(obj, tape.scale(lr, config.lambda_r));
    }
    let value = tape.scalar(obj);
    let grads = p.grads(&tape.backward(obj));
    Ok((value, percs, mses, grads))
}

/// Tunes `θ` so each pivot reconstructs its frame.
///
/// The locality regularizer is resampled every step from a generator seeded
/// by `config.seed`. The returned weights are the best iterate (lowest mean
/// reconstruction) among those that do not raise any frame's perceptual
/// distance above its starting value.
pub fn pivotal_tune(
    frames: &FrameSequence,
    pivots: &[LatentCode],
    handle: &GeneratorHandle,
    config: &PtiConfig,
    perceptual: &dyn PerceptualMetric,
) -> Result<GeneratorHandle> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyInput("no frames to tune on".into()));
    }
    if frames.len() != pivots.len() {
        return shape_err(format!("{} frames for {} pivots", frames.len(), pivots.len()));
    }
    for (f, w) in frames.frames().iter().zip(pivots) {
        handle.check_frame(f)?;
        handle.check_latent(w)?;
    }
    if config.steps == 0 {
        return Ok(handle.clone());
    }
    let mut rng = seeded(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut params = handle.params().clone();
    let mut initial: Option<Vec<f64>> = None;
    let mut best: Option<(f64, ParamStore)> = None;
    let recon = |percs: &[f64], mses: &[f64]| {
        percs.iter().zip(mses).map(|(p, m)| p + config.lambda_l2 * m).sum::<f64>() / percs.len() as f64
    };
    for step in 0..=config.steps {
        let (value, percs, mses, grads) = pti_objective(frames, pivots, handle, &params, config, perceptual, &mut rng)?;
        if !value.is_finite() {
            return Err(Error::Training { step, context: "pivotal tuning objective".into() });
        }
        let init = initial.get_or_insert_with(|| percs.clone());
        let admissible = percs.iter().zip(init.iter()).all(|(p, p0)| *p <= p0 + 1e-9);
        let r = recon(&percs, &mses);
        if admissible && best.as_ref().map_or(true, |(b, _)| r < *b) {
            best = Some((r, params.clone()));
        }
        if step == config.steps {
            break;
        }
        let mut slots: Vec<&mut [f64]> = params.tensors_mut().map(|t| t.data_mut()).collect();
        let gs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
        opt.step(&mut slots, &gs);
    }
    let (_, p) = best.expect("the starting weights are always admissible");
    handle.with_params(p)
}

/// Training recipe that gives the bundled generator a face prior.
///
/// Face parameters `q = (mouth, dx, dy, rotation, scale)`, each scaled to
/// `[-1, 1]`, are embedded as `w = sum_k q_k E_k` with fixed random
/// directions `E_k`; the generator is fitted so `G(w(q))` renders the
/// procedural face with those parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyPrior {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Norm of each embedding direction.
    pub gain: f64,
    pub max_open: f64,
    pub max_offset: f64,
    pub max_rotation: f64,
}

impl Default for ToyPrior {
    fn default() -> Self {
        Self { steps: 600, batch: 4, lr: 3e-3, seed: 1, gain: 2.0, max_open: 0.12, max_offset: 0.04, max_rotation: 0.08 }
    }
}

/// Number of face factors embedded by [`ToyPrior`].
pub const PRIOR_FACTORS: usize = 5;

impl ToyPrior {
    /// The fixed embedding directions `E_k`.
    pub fn directions(&self, shape: (usize, usize)) -> Vec<Tensor> {
        let mut rng = seeded(self.seed ^ 0xd1ec);
        let n = shape.0 * shape.1;
        (0..PRIOR_FACTORS)
            .map(|_| {
                let v: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                Tensor::new(&[shape.0, shape.1], v.iter().map(|x| x * self.gain / norm).collect()).expect("direction")
            })
            .collect()
    }

    /// Latent embedding of normalized factors `q`.
    pub fn embed(&self, q: &[f64; PRIOR_FACTORS], dirs: &[Tensor]) -> LatentCode {
        let shape = dirs[0].shape().to_vec();
        let w = Tensor::from_fn(&shape, |i| q.iter().zip(dirs).map(|(qk, e)| qk * e.data()[i]).sum());
        LatentCode { w }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> ([f64; PRIOR_FACTORS], crate::face::FaceParams) {
        let p = random_face(rng, self.max_open, self.max_offset, self.max_rotation);
        let q = [
            2.0 * p.mouth_open / self.max_open - 1.0,
            p.offset[0] / self.max_offset,
            p.offset[1] / self.max_offset,
            p.pose.rotation() / self.max_rotation,
            (p.pose.scale() - 1.0) / (0.5 * self.max_offset),
        ];
        (q, p)
    }

    /// Fits `handle`'s weights to the procedural face family and rebases
    /// `θ_orig` onto the result. Returns the handle and the per-step loss.
    pub fn train(&self, handle: &GeneratorHandle) -> Result<(GeneratorHandle, Vec<f64>)> {
        let dirs = self.directions(handle.latent_shape());
        let mut rng = seeded(self.seed);
        let mut opt = Optimizer::adam(self.lr);
        let mut params = handle.params().clone();
        let size = handle.output_size();
        let mut log = Vec::with_capacity(self.steps);
        for step in 0..self.steps {
            let tape = Tape::new();
            let p = params.bind(&tape);
            let mut total: Option<Var> = None;
            for _ in 0..self.batch.max(1) {
                let (q, face) = self.sample(&mut rng);
                let target = face.render(size, 0)?.to_tensor();
                let w = tape.constant(self.embed(&q, &dirs).w);
                let x = handle.forward_on(&tape, w, &p);
                let l = tape.mse(x, tape.constant(target));
                total = Some(match total {
                    Some(t) => tape.add(t, l),
                    None => l,
                });
            }
            let loss = tape.scale(total.expect("batch"), 1.0 / self.batch.max(1) as f64);
            let v = tape.scalar(loss);
            if !v.is_finite() {
                return Err(Error::Training { step, context: "generator prior".into() });
            }
            log.push(v);
            let grads = p.grads(&tape.backward(loss));
            let mut slots: Vec<&mut [f64]> = params.tensors_mut().map(|t| t.data_mut()).collect();
            let gs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
            opt.step(&mut slots, &gs);
        }
        Ok((handle.with_params(params)?.rebased(), log))
    }
}

/// Convenience: the bundled generator with default sizes.
pub fn toy_handle(seed: u64) -> GeneratorHandle {
    let arch: Arc<dyn GeneratorArch> = Arc::new(ToyGenerator::new(ToyGeneratorConfig::default()).expect("default config"));
    GeneratorHandle::from_arch(arch, seed)
}

/// Shared bundled architecture with custom sizes.
pub fn toy_arch(cfg: ToyGeneratorConfig) -> Result<Arc<dyn GeneratorArch>> {
    Ok(Arc::new(ToyGenerator::new(cfg)?))
}
