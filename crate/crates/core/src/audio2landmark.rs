//! Audio-driven landmark prediction with emotion/content disentanglement.
//!
//! Each video frame owns a `[T, F]` window of audio features. The content and
//! emotion encoders run a recurrent cell over the `T` sub-steps of every
//! window; the emotion code is then mean-pooled over the utterance. A decoder
//! reconstructs displacement sequences from any (content, emotion) pair, which
//! is what cross-reconstruction training needs. The predictor maps content
//! codes plus the emotion code to per-frame displacements of a template face.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_on, warp_with, AlignmentParams, WarpConfig};
use crate::error::{shape_err, Error, Result};
use crate::landmarks::{canonical_face, LandmarkSet};
use crate::nn::{Linear, Lstm, Mlp2};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{Bound, ParamStore};
use crate::rng::{normal, seeded, symmetric};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Feature sub-steps per video frame.
pub const FEATURE_STEPS: usize = 4;
/// 13 cepstral coefficients plus log-energy.
pub const FEATURE_DIM: usize = 14;

/// Audio features aligned to one video frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureWindow {
    features: Tensor,
    pub frame_index: usize,
}

impl AudioFeatureWindow {
    pub fn new(features: Tensor, frame_index: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.is_empty() {
            return shape_err(format!("feature window shape {:?}", features.shape()));
        }
        if !features.is_finite() {
            return Err(Error::Config("non-finite audio features".into()));
        }
        Ok(Self { features, frame_index })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn steps(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Additive per-point offsets to a template face.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkDisplacement {
    deltas: Vec<[f64; 2]>,
}

impl LandmarkDisplacement {
    pub fn new(deltas: Vec<[f64; 2]>) -> Result<Self> {
        if deltas.iter().any(|d| !d[0].is_finite() || !d[1].is_finite()) {
            return Err(Error::Config("non-finite displacement".into()));
        }
        Ok(Self { deltas })
    }

    pub fn zeros(n: usize) -> Self {
        Self { deltas: vec![[0.0; 2]; n] }
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return shape_err(format!("{} displacement values", flat.len()));
        }
        Self::new(flat.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    /// `b - a` point by point.
    pub fn between(a: &LandmarkSet, b: &LandmarkSet) -> Result<Self> {
        a.check_same_len(b)?;
        Self::new(a.points().iter().zip(b.points()).map(|(p, q)| [q[0] - p[0], q[1] - p[1]]).collect())
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn deltas(&self) -> &[[f64; 2]] {
        &self.deltas
    }

    pub fn flat(&self) -> Vec<f64> {
        self.deltas.iter().flat_map(|d| [d[0], d[1]]).collect()
    }
}

/// Template plus displacement, clamped to `[0, 1]` per coordinate.
pub fn apply_displacements(template: &LandmarkSet, displacements: &[LandmarkDisplacement]) -> Result<Vec<LandmarkSet>> {
    displacements
        .iter()
        .map(|d| {
            if d.len() != template.len() {
                return shape_err(format!("{} displacements for {} points", d.len(), template.len()));
            }
            let pts = template
                .points()
                .iter()
                .zip(d.deltas())
                .map(|(p, q)| [(p[0] + q[0]).clamp(0.0, 1.0), (p[1] + q[1]).clamp(0.0, 1.0)])
                .collect();
            LandmarkSet::new(pts)
        })
        .collect()
}

/// Network widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct A2lConfig {
    pub feature_steps: usize,
    pub feature_dim: usize,
    pub content_dim: usize,
    pub emotion_dim: usize,
    pub decoder_hidden: usize,
    pub predictor_hidden: usize,
    pub mlp_hidden: usize,
    pub points: usize,
}

impl Default for A2lConfig {
    fn default() -> Self {
        Self {
            feature_steps: FEATURE_STEPS,
            feature_dim: FEATURE_DIM,
            content_dim: 16,
            emotion_dim: 8,
            decoder_hidden: 64,
            predictor_hidden: 64,
            mlp_hidden: 128,
            points: 68,
        }
    }
}

impl A2lConfig {
    fn check_windows(&self, windows: &[AudioFeatureWindow]) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::EmptyInput("audio feature windows".into()));
        }
        for w in windows {
            if w.steps() != self.feature_steps || w.dim() != self.feature_dim {
                return shape_err(format!(
                    "window {}x{} for a {}x{} model",
                    w.steps(),
                    w.dim(),
                    self.feature_steps,
                    self.feature_dim
                ));
            }
        }
        Ok(())
    }
}

/// Sub-step `t` of every window as an `[N, F]` matrix.
fn substep_matrices(windows: &[AudioFeatureWindow]) -> Vec<Tensor> {
    let (steps, dim) = (windows[0].steps(), windows[0].dim());
    (0..steps)
        .map(|t| {
            let mut data = Vec::with_capacity(windows.len() * dim);
            for w in windows {
                data.extend_from_slice(&w.features().data()[t * dim..(t + 1) * dim]);
            }
            Tensor::new(&[windows.len(), dim], data).expect("substep shape")
        })
        .collect()
}

/// Final hidden state of `cell` over the sub-steps: `[N, hidden]`.
fn encode_windows(tape: &Tape, p: &Bound, cell: &Lstm, steps: &[Tensor]) -> Var {
    let n = steps[0].shape()[0];
    let (mut h, mut c) = cell.zero_state(tape, n);
    for x in steps {
        (h, c) = cell.cell(tape, p, tape.constant(x.clone()), h, c);
    }
    h
}

/// Content and emotion encoders with a sequence decoder.
#[derive(Clone, Debug)]
pub struct DisentangleModel {
    config: A2lConfig,
    store: ParamStore,
    content: Lstm,
    emotion: Lstm,
    decoder: Lstm,
    head: Linear,
}

impl DisentangleModel {
    pub fn new(config: A2lConfig, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let content = Lstm::new(&mut store, "content", config.feature_dim, config.content_dim, &mut rng);
        let emotion = Lstm::new(&mut store, "emotion", config.feature_dim, config.emotion_dim, &mut rng);
        let decoder = Lstm::new(&mut store, "decoder", config.content_dim + config.emotion_dim, config.decoder_hidden, &mut rng);
        let head = Linear::new(&mut store, "decoder.head", config.decoder_hidden, 2 * config.points, &mut rng);
        Self { config, store, content, emotion, decoder, head }
    }

    /// Rebuilds the architecture for `config` and loads `store` into it.
    pub fn with_params(config: A2lConfig, store: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0);
        m.store.assign(store)?;
        Ok(m)
    }

    pub fn config(&self) -> &A2lConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn content_on(&self, tape: &Tape, p: &Bound, steps: &[Tensor]) -> Var {
        encode_windows(tape, p, &self.content, steps)
    }

    fn emotion_on(&self, tape: &Tape, p: &Bound, steps: &[Tensor]) -> Var {
        tape.mean_rows(encode_windows(tape, p, &self.emotion, steps))
    }

    /// One `d_c` vector per window.
    pub fn encode_content(&self, windows: &[AudioFeatureWindow]) -> Result<Vec<Vec<f64>>> {
        self.config.check_windows(windows)?;
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let h = tape.value(self.content_on(&tape, &p, &substep_matrices(windows)));
        Ok(h.data().chunks(self.config.content_dim).map(<[f64]>::to_vec).collect())
    }

    /// Mean-pooled `d_e` vector for the utterance.
    pub fn encode_emotion(&self, windows: &[AudioFeatureWindow]) -> Result<Vec<f64>> {
        self.config.check_windows(windows)?;
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        Ok(tape.value(self.emotion_on(&tape, &p, &substep_matrices(windows))).into_data())
    }

    /// Decodes `B` (content `[N, d_c]`, emotion `[1, d_e]`) pairs in one
    /// batch; returns the `[B, 2n]` output of every frame.
    fn decode_on(&self, tape: &Tape, p: &Bound, pairs: &[(Var, Var)]) -> Vec<Var> {
        let frames = tape.shape(pairs[0].0)[0];
        let (mut h, mut c) = self.decoder.zero_state(tape, pairs.len());
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let rows: Vec<Var> = pairs.iter().map(|(cv, ev)| tape.concat_cols(tape.row(*cv, t), *ev)).collect();
            (h, c) = self.decoder.cell(tape, p, tape.stack_rows(&rows), h, c);
            out.push(self.head.forward(tape, p, h));
        }
        out
    }

    /// Displacements decoded from the content of `content_src` and the
    /// emotion of `emotion_src`.
    pub fn cross_decode(&self, content_src: &[AudioFeatureWindow], emotion_src: &[AudioFeatureWindow]) -> Result<Vec<LandmarkDisplacement>> {
        self.config.check_windows(content_src)?;
        self.config.check_windows(emotion_src)?;
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let c = self.content_on(&tape, &p, &substep_matrices(content_src));
        let e = self.emotion_on(&tape, &p, &substep_matrices(emotion_src));
        self.decode_on(&tape, &p, &[(c, e)]).into_iter().map(|v| LandmarkDisplacement::from_flat(tape.value(v).data())).collect()
    }
}

/// Feature windows with the displacement sequence they should produce.
#[derive(Clone, Debug, PartialEq)]
pub struct A2lSample {
    pub windows: Vec<AudioFeatureWindow>,
    pub displacements: Vec<LandmarkDisplacement>,
}

impl A2lSample {
    fn check(&self) -> Result<()> {
        if self.windows.len() != self.displacements.len() {
            return shape_err(format!("{} windows but {} displacement frames", self.windows.len(), self.displacements.len()));
        }
        Ok(())
    }

    fn target_rows(&self) -> Vec<Vec<f64>> {
        self.displacements.iter().map(LandmarkDisplacement::flat).collect()
    }
}

/// Two utterances `a = (c_i, e_m)`, `b = (c_j, e_n)` with the targets of the
/// swapped combinations `(c_i, e_n)` and `(c_j, e_m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossPair<'a> {
    pub a: &'a A2lSample,
    pub b: &'a A2lSample,
    pub content_a_emotion_b: &'a A2lSample,
    pub content_b_emotion_a: &'a A2lSample,
}

/// Loss terms of one cross-reconstruction step (mean squared error).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossLosses {
    pub total: f64,
    pub cross: f64,
    pub self_recon: f64,
}

fn mse_to_rows(tape: &Tape, outs: &[Var], targets: &[Vec<Vec<f64>>]) -> Var {
    // outs[t] is [B, 2n]; targets[b][t] is the 2n target of batch row b
    let b = targets.len();
    let width = targets[0][0].len();
    let mut total: Option<Var> = None;
    for (t, o) in outs.iter().enumerate() {
        let mut data = Vec::with_capacity(b * width);
        for tb in targets {
            data.extend_from_slice(&tb[t]);
        }
        let target = tape.constant(Tensor::new(&[b, width], data).expect("target rows"));
        let l = tape.sum_squares(tape.sub(*o, target));
        total = Some(total.map_or(l, |acc| tape.add(acc, l)));
    }
    tape.scale(total.expect("frames"), 1.0 / (b * outs.len() * width) as f64)
}

fn cross_losses_on(model: &DisentangleModel, tape: &Tape, p: &Bound, pair: &CrossPair<'_>) -> Result<(Var, Var, Var)> {
    let parts = [pair.a, pair.b, pair.content_a_emotion_b, pair.content_b_emotion_a];
    for s in parts {
        s.check()?;
        model.config.check_windows(&s.windows)?;
    }
    let n = pair.a.windows.len();
    if parts.iter().any(|s| s.windows.len() != n) {
        return shape_err("cross-reconstruction samples differ in length");
    }
    let sa = substep_matrices(&pair.a.windows);
    let sb = substep_matrices(&pair.b.windows);
    let (ca, cb) = (model.content_on(tape, p, &sa), model.content_on(tape, p, &sb));
    let (ea, eb) = (model.emotion_on(tape, p, &sa), model.emotion_on(tape, p, &sb));
    let cross_out = model.decode_on(tape, p, &[(ca, eb), (cb, ea)]);
    let self_out = model.decode_on(tape, p, &[(ca, ea), (cb, eb)]);
    let cross = mse_to_rows(tape, &cross_out, &[pair.content_a_emotion_b.target_rows(), pair.content_b_emotion_a.target_rows()]);
    let self_recon = mse_to_rows(tape, &self_out, &[pair.a.target_rows(), pair.b.target_rows()]);
    Ok((tape.add(cross, self_recon), cross, self_recon))
}

/// Loss terms without updating the model.
pub fn cross_reconstruct_loss(model: &DisentangleModel, pair: &CrossPair<'_>) -> Result<CrossLosses> {
    let tape = Tape::new();
    let p = model.store.bind_frozen(&tape);
    let (t, c, s) = cross_losses_on(model, &tape, &p, pair)?;
    Ok(CrossLosses { total: tape.scalar(t), cross: tape.scalar(c), self_recon: tape.scalar(s) })
}

/// Cross-combined and self reconstruction losses followed by one update.
pub fn cross_reconstruct_step(pair: &CrossPair<'_>, model: &mut DisentangleModel, optimizer: &mut Optimizer) -> Result<CrossLosses> {
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let (t, c, s) = cross_losses_on(model, &tape, &p, pair)?;
    let losses = CrossLosses { total: tape.scalar(t), cross: tape.scalar(c), self_recon: tape.scalar(s) };
    if !losses.total.is_finite() {
        return Err(Error::Training { step: 0, context: "cross-reconstruction".into() });
    }
    let grads = p.grads(&tape.backward(t));
    optimizer.step_store(&mut model.store, &grads);
    Ok(losses)
}

/// Step budget and update rule for the audio models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct A2lTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for A2lTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-3, optimizer: OptimizerKind::Sgd, seed: 0 }
    }
}

/// Synthetic two-factor corpus: content `k` drives a mouth-opening
/// trajectory, emotion `m` a global landmark offset. Both leave a trace in
/// the audio features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoFactorSpec {
    pub contents: usize,
    pub emotions: usize,
    pub frames: usize,
    pub max_open: f64,
    pub max_offset: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TwoFactorSpec {
    fn default() -> Self {
        Self { contents: 4, emotions: 4, frames: 10, max_open: 0.08, max_offset: 0.03, noise: 0.01, seed: 0 }
    }
}

/// Samples indexed `[content][emotion]` with their generating factors.
#[derive(Clone, Debug)]
pub struct TwoFactorSet {
    pub spec: TwoFactorSpec,
    pub samples: Vec<Vec<A2lSample>>,
    /// Mouth opening per content and frame.
    pub openings: Vec<Vec<f64>>,
    /// Global offset per emotion.
    pub offsets: Vec<[f64; 2]>,
}

impl TwoFactorSet {
    pub fn sample(&self, content: usize, emotion: usize) -> &A2lSample {
        &self.samples[content][emotion]
    }

    /// Random `(c_i, e_m)`, `(c_j, e_n)` with `i != j`, `m != n`.
    pub fn random_pair<R: Rng>(&self, rng: &mut R) -> CrossPair<'_> {
        let (nc, ne) = (self.spec.contents, self.spec.emotions);
        let i = rng.random_range(0..nc);
        let j = (i + rng.random_range(1..nc.max(2))) % nc;
        let m = rng.random_range(0..ne);
        let n = (m + rng.random_range(1..ne.max(2))) % ne;
        CrossPair { a: self.sample(i, m), b: self.sample(j, n), content_a_emotion_b: self.sample(i, n), content_b_emotion_a: self.sample(j, m) }
    }
}

const MOUTH: core::ops::Range<usize> = 48..68;

/// Mean displacement of the non-mouth points per frame: the global offset.
pub fn global_offset_track(d: &[LandmarkDisplacement]) -> Vec<[f64; 2]> {
    d.iter()
        .map(|x| {
            let pts = &x.deltas()[..MOUTH.start.min(x.len())];
            let n = pts.len().max(1) as f64;
            let s = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
            [s[0] / n, s[1] / n]
        })
        .collect()
}

/// Mouth displacement relative to the global offset, flattened per frame.
pub fn mouth_track(d: &[LandmarkDisplacement]) -> Vec<Vec<f64>> {
    let g = global_offset_track(d);
    d.iter()
        .zip(g)
        .map(|(x, o)| x.deltas()[MOUTH.start.min(x.len())..].iter().flat_map(|p| [p[0] - o[0], p[1] - o[1]]).collect())
        .collect()
}

fn track_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// L2 distance between mouth tracks.
pub fn mouth_distance(a: &[LandmarkDisplacement], b: &[LandmarkDisplacement]) -> f64 {
    track_distance(&mouth_track(a), &mouth_track(b))
}

/// L2 distance between global offset tracks.
pub fn offset_distance(a: &[LandmarkDisplacement], b: &[LandmarkDisplacement]) -> f64 {
    let f = |d: &[LandmarkDisplacement]| global_offset_track(d).into_iter().map(|p| p.to_vec()).collect::<Vec<_>>();
    track_distance(&f(a), &f(b))
}

/// Mouth opening of content `k` at time `tau` (in frames).
fn opening(max_open: f64, freq: f64, phase: f64, tau: f64) -> f64 {
    0.5 * max_open * (1.0 - (freq * tau + phase).cos())
}

pub fn two_factor_dataset(spec: &TwoFactorSpec) -> Result<TwoFactorSet> {
    if spec.contents < 2 || spec.emotions < 2 || spec.frames == 0 {
        return Err(Error::Config("two-factor set needs >= 2 contents, >= 2 emotions and frames".into()));
    }
    let mut rng = seeded(spec.seed);
    let content: Vec<(f64, f64)> = (0..spec.contents).map(|k| (0.5 + 0.35 * k as f64 + rng.random_range(0.0..0.1), rng.random_range(0.0..2.0 * PI))).collect();
    let offsets: Vec<[f64; 2]> = (0..spec.emotions).map(|_| [symmetric(&mut rng, spec.max_offset), symmetric(&mut rng, spec.max_offset)]).collect();
    let timbre: Vec<Vec<f64>> = (0..spec.emotions).map(|_| (0..FEATURE_DIM / 2).map(|_| symmetric(&mut rng, 1.0)).collect()).collect();
    let mixing: Vec<f64> = (0..FEATURE_DIM / 2).map(|j| 0.5 + 0.5 * j as f64 / (FEATURE_DIM / 2) as f64).collect();
    let closed = canonical_face(0.0);
    let mut samples = Vec::with_capacity(spec.contents);
    let mut openings = Vec::with_capacity(spec.contents);
    for (k, &(freq, phase)) in content.iter().enumerate() {
        let open: Vec<f64> = (0..spec.frames).map(|t| opening(spec.max_open, freq, phase, t as f64)).collect();
        let mut row = Vec::with_capacity(spec.emotions);
        for (m, off) in offsets.iter().enumerate() {
            let mut srng = seeded(spec.seed ^ ((k as u64) << 32 | m as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut windows = Vec::with_capacity(spec.frames);
            let mut disp = Vec::with_capacity(spec.frames);
            for (t, o) in open.iter().enumerate() {
                let data = (0..FEATURE_STEPS)
                    .flat_map(|s| {
                        let tau = t as f64 + s as f64 / FEATURE_STEPS as f64;
                        let a = opening(spec.max_open, freq, phase, tau) / spec.max_open;
                        let mut f = Vec::with_capacity(FEATURE_DIM);
                        for (j, mix) in mixing.iter().enumerate() {
                            f.push(mix * (2.0 * a - 1.0) + 0.2 * (freq * tau * (j + 1) as f64).sin());
                        }
                        for v in &timbre[m] {
                            f.push(*v);
                        }
                        f
                    })
                    .map(|v| v + spec.noise * normal(&mut srng))
                    .collect();
                windows.push(AudioFeatureWindow::new(Tensor::new(&[FEATURE_STEPS, FEATURE_DIM], data)?, t)?);
                let target = canonical_face(*o).translated(off[0], off[1]);
                disp.push(LandmarkDisplacement::between(&closed, &target)?);
            }
            row.push(A2lSample { windows, displacements: disp });
        }
        samples.push(row);
        openings.push(open);
    }
    Ok(TwoFactorSet { spec: *spec, samples, openings, offsets })
}

/// Cross-reconstruction training on random pairs of `data`.
pub fn train_disentangle(model: &DisentangleModel, data: &TwoFactorSet, config: &A2lTrainConfig) -> Result<(DisentangleModel, Vec<CrossLosses>)> {
    let mut m = model.clone();
    let mut rng = seeded(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let pair = data.random_pair(&mut rng);
        let l = cross_reconstruct_step(&pair, &mut m, &mut opt).map_err(|e| match e {
            Error::Training { context, .. } => Error::Training { step, context },
            other => other,
        })?;
        log.push(l);
    }
    Ok((m, log))
}

/// LSTM over frames followed by a two-layer MLP to `2n` displacement values.
#[derive(Clone, Debug)]
pub struct PredictorModel {
    config: A2lConfig,
    store: ParamStore,
    lstm: Lstm,
    mlp: Mlp2,
}

impl PredictorModel {
    pub fn new(config: A2lConfig, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "predictor.lstm", config.content_dim + config.emotion_dim, config.predictor_hidden, &mut rng);
        let mlp = Mlp2::new(&mut store, "predictor.mlp", config.predictor_hidden, config.mlp_hidden, 2 * config.points, &mut rng);
        Self { config, store, lstm, mlp }
    }

    pub fn with_params(config: A2lConfig, store: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0);
        m.store.assign(store)?;
        Ok(m)
    }

    pub fn config(&self) -> &A2lConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn inputs(&self, contents: &[Vec<f64>], emotion: &[f64]) -> Result<Tensor> {
        if contents.is_empty() {
            return Err(Error::EmptyInput("content embeddings".into()));
        }
        if emotion.len() != self.config.emotion_dim || contents.iter().any(|c| c.len() != self.config.content_dim) {
            return shape_err(format!("predictor expects d_c {} and d_e {}", self.config.content_dim, self.config.emotion_dim));
        }
        let width = self.config.content_dim + self.config.emotion_dim;
        let data: Vec<f64> = contents.iter().flat_map(|c| c.iter().chain(emotion).copied()).collect();
        Tensor::new(&[contents.len(), width], data)
    }

    /// `[N, 2n]` outputs on `tape`.
    fn forward_on(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let h = self.lstm.forward(tape, p, x);
        self.mlp.forward(tape, p, h)
    }

    /// One displacement per frame; frame `i` sees only frames `<= i`.
    pub fn predict_displacements(&self, contents: &[Vec<f64>], emotion: &[f64]) -> Result<Vec<LandmarkDisplacement>> {
        let x = self.inputs(contents, emotion)?;
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let y = tape.value(self.forward_on(&tape, &p, tape.constant(x)));
        y.data().chunks(2 * self.config.points).map(LandmarkDisplacement::from_flat).collect()
    }
}

/// Predictor training example: encoder outputs and target displacements.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorSample {
    pub contents: Vec<Vec<f64>>,
    pub emotion: Vec<f64>,
    pub displacements: Vec<LandmarkDisplacement>,
}

/// Encodes every sample of `data` with `model`'s encoders.
pub fn predictor_samples(model: &DisentangleModel, data: &TwoFactorSet) -> Result<Vec<PredictorSample>> {
    let mut out = Vec::new();
    for row in &data.samples {
        for s in row {
            out.push(PredictorSample {
                contents: model.encode_content(&s.windows)?,
                emotion: model.encode_emotion(&s.windows)?,
                displacements: s.displacements.clone(),
            });
        }
    }
    Ok(out)
}

/// Mean squared displacement error, one sample per step.
pub fn train_predictor(model: &PredictorModel, data: &[PredictorSample], config: &A2lTrainConfig) -> Result<(PredictorModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("predictor dataset".into()));
    }
    let mut m = model.clone();
    let mut rng = seeded(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let s = &data[rng.random_range(0..data.len())];
        let x = m.inputs(&s.contents, &s.emotion)?;
        if s.displacements.len() != s.contents.len() {
            return shape_err("predictor sample lengths differ");
        }
        let target: Vec<f64> = s.displacements.iter().flat_map(LandmarkDisplacement::flat).collect();
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let y = m.forward_on(&tape, &p, tape.constant(x));
        let loss = tape.mse(y, tape.constant(Tensor::new(tape.shape(y).as_slice(), target)?));
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Training { step, context: "predictor".into() });
        }
        log.push(v);
        let grads = p.grads(&tape.backward(loss));
        opt.step_store(&mut m.store, &grads);
    }
    Ok((m, log))
}

/// Trains the predictor through a frozen alignment network: the predicted
/// face is aligned to a warped copy of the true landmarks and compared with
/// them.
pub fn finetune_predictor(
    model: &PredictorModel,
    alignment: &AlignmentParams,
    template: &LandmarkSet,
    data: &[PredictorSample],
    warp: &WarpConfig,
    config: &A2lTrainConfig,
) -> Result<(PredictorModel, Vec<f64>)> {
    warp.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("predictor dataset".into()));
    }
    if template.len() != model.config.points || alignment.num_points() != model.config.points {
        return shape_err("template, predictor and alignment disagree on the point count");
    }
    let mut m = model.clone();
    let mut rng = seeded(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut log = Vec::with_capacity(config.steps);
    let n = template.len();
    let tmpl = template.to_tensor();
    for step in 0..config.steps {
        let s = &data[rng.random_range(0..data.len())];
        let x = m.inputs(&s.contents, &s.emotion)?;
        let truth = apply_displacements(template, &s.displacements)?;
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let frozen = alignment.store().bind_frozen(&tape);
        let y = m.forward_on(&tape, &p, tape.constant(x));
        let mut total: Option<Var> = None;
        for (t, l_input) in truth.iter().enumerate() {
            let pred = tape.add(tape.reshape(tape.row(y, t), &[n, 2]), tape.constant(tmpl.clone()));
            let warped = tape.constant(warp_with(l_input, warp, &mut rng).to_tensor());
            let aligned = align_on(&tape, &frozen, warped, pred);
            let l = tape.sum_squares(tape.sub(aligned, tape.constant(l_input.to_tensor())));
            total = Some(total.map_or(l, |acc| tape.add(acc, l)));
        }
        let loss = tape.scale(total.expect("frames"), 1.0 / truth.len() as f64);
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Training { step, context: "predictor fine-tuning".into() });
        }
        log.push(v);
        let grads = p.grads(&tape.backward(loss));
        opt.step_store(&mut m.store, &grads);
    }
    Ok((m, log))
}
