//! Cross-attention alignment network that moves predicted landmarks into the
//! head pose of a reference landmark set.
//!
//! Predicted (face) landmarks form the queries and pose landmarks the keys
//! and values. A gated residual from the query coordinates keeps the face
//! intact while the attention branch is untrained.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::Affine2;
use crate::landmarks::{canonical_face, LandmarkSet};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{Bound, ParamStore};
use crate::rng::{normal, seeded, symmetric};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default token width.
pub const TOKEN_SIZE: usize = 32;

const NAMES: [&str; 8] = ["align.embed", "align.index", "align.wq", "align.wk", "align.wv", "align.out.w", "align.out.b", "align.gate"];

/// Weights of the alignment network, stored in a fixed order:
/// token embedding `[2, t]`, per-index embedding `[n, t]`, `W_Q`, `W_K`,
/// `W_V` (`[t, t]`), output dense `[t, 2]` and bias `[2]`, residual gate `[1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentParams {
    store: ParamStore,
    n: usize,
    t: usize,
}

fn tensor_of(store: &ParamStore, k: usize) -> &Tensor {
    store.iter().nth(k).map(|(_, t)| t).expect("validated store")
}

impl AlignmentParams {
    /// Random projections with a zero output layer and unit gate, so a fresh
    /// network returns its query landmarks.
    pub fn new(n: usize, t: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut s = ParamStore::new();
        s.add_normal(NAMES[0], &[2, t], 1.0, &mut rng);
        s.add_normal(NAMES[1], &[n, t], 1.0, &mut rng);
        let std = 1.0 / (t as f64).sqrt();
        for name in &NAMES[2..5] {
            s.add_normal(*name, &[t, t], std, &mut rng);
        }
        s.add(NAMES[5], Tensor::zeros(&[t, 2]));
        s.add(NAMES[6], Tensor::zeros(&[2]));
        s.add(NAMES[7], Tensor::filled(&[1, 1], 1.0));
        Self { store: s, n, t }
    }

    /// Validates names and shapes of a loaded store.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let entries: Vec<(&str, &Tensor)> = store.iter().collect();
        if entries.len() != NAMES.len() || entries.iter().zip(NAMES).any(|((a, _), b)| *a != b) {
            return shape_err("alignment parameters are misnamed or missing");
        }
        let e = entries[0].1.shape();
        if e.len() != 2 || e[0] != 2 {
            return shape_err(format!("token embedding shape {e:?}"));
        }
        let t = e[1];
        let idx = entries[1].1.shape();
        if idx.len() != 2 || idx[1] != t || t == 0 {
            return shape_err(format!("index embedding shape {idx:?}"));
        }
        let n = idx[0];
        let expect: [&[usize]; 6] = [&[t, t], &[t, t], &[t, t], &[t, 2], &[2], &[1, 1]];
        for (k, s) in expect.iter().enumerate() {
            if entries[k + 2].1.shape() != *s {
                return shape_err(format!("{} has shape {:?}", NAMES[k + 2], entries[k + 2].1.shape()));
            }
        }
        if entries.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Config("alignment parameters must be finite".into()));
        }
        drop(entries);
        Ok(Self { store, n, t })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_points(&self) -> usize {
        self.n
    }

    pub fn token_size(&self) -> usize {
        self.t
    }

    /// `(W_Q, W_K, W_V)`.
    pub fn projections(&self) -> (&Tensor, &Tensor, &Tensor) {
        (tensor_of(&self.store, 2), tensor_of(&self.store, 3), tensor_of(&self.store, 4))
    }

    fn check(&self, l: &LandmarkSet) -> Result<()> {
        if l.len() != self.n {
            return shape_err(format!("{} landmarks for a {}-point network", l.len(), self.n));
        }
        Ok(())
    }

    /// One token per point: `x A + e_index`.
    pub fn tokenize(&self, l: &LandmarkSet) -> Result<Tensor> {
        self.check(l)?;
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let x = tape.constant(l.to_tensor());
        Ok(tape.value(tokens_on(&tape, &p, x)))
    }

    pub fn cross_attention(&self, query_tokens: &Tensor, key_tokens: &Tensor) -> Result<Tensor> {
        let (wq, wk, wv) = self.projections();
        cross_attention(query_tokens, key_tokens, wq, wk, wv)
    }

    /// Moves `l_face` into the pose carried by `l_pose`.
    pub fn align(&self, l_pose: &LandmarkSet, l_face: &LandmarkSet) -> Result<LandmarkSet> {
        self.check(l_pose)?;
        self.check(l_face)?;
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let y = align_on(&tape, &p, tape.constant(l_pose.to_tensor()), tape.constant(l_face.to_tensor()));
        LandmarkSet::from_tensor(&tape.value(y))
    }
}

fn tokens_on(tape: &Tape, p: &Bound, x: Var) -> Var {
    let v = p.vars();
    tape.add(tape.matmul(x, v[0]), v[1])
}

fn attention_on(tape: &Tape, q: Var, k: Var, wq: Var, wk: Var, wv: Var) -> Var {
    let t = tape.shape(wq)[1] as f64;
    let qp = tape.matmul(q, wq);
    let kp = tape.matmul(k, wk);
    let vp = tape.matmul(k, wv);
    let scores = tape.scale(tape.matmul(qp, tape.transpose(kp)), 1.0 / t.sqrt());
    tape.matmul(tape.softmax_rows(scores), vp)
}

/// Network output for `[n, 2]` pose and face coordinates on `tape`.
pub fn align_on(tape: &Tape, p: &Bound, pose: Var, face: Var) -> Var {
    let v = p.vars();
    let q = tokens_on(tape, p, face);
    let k = tokens_on(tape, p, pose);
    let ca = attention_on(tape, q, k, v[2], v[3], v[4]);
    let dense = tape.add_row(tape.matmul(ca, v[5]), v[6]);
    let n = tape.shape(face)[0];
    let gated = tape.reshape(tape.matmul(tape.reshape(face, &[2 * n, 1]), v[7]), &[n, 2]);
    tape.add(gated, dense)
}

/// `softmax((q W_Q)(k W_K)^T / sqrt(t)) (k W_V)` with `t` the projected width.
pub fn cross_attention(q: &Tensor, k: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    let dims = |x: &Tensor| if x.shape().len() == 2 { Some((x.shape()[0], x.shape()[1])) } else { None };
    let (Some((_, tq)), Some((nk, tk)), Some((a, t)), Some((b, t2)), Some((c, _))) = (dims(q), dims(k), dims(wq), dims(wk), dims(wv)) else {
        return shape_err("attention inputs must be matrices");
    };
    if tq != a || tk != b || tk != c || t != t2 || nk == 0 {
        return shape_err(format!("attention dims q {:?} k {:?} wq {:?} wk {:?} wv {:?}", q.shape(), k.shape(), wq.shape(), wk.shape(), wv.shape()));
    }
    let tape = Tape::new();
    let out = attention_on(
        &tape,
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(wq.clone()),
        tape.constant(wk.clone()),
        tape.constant(wv.clone()),
    );
    Ok(tape.value(out))
}

/// `sum_i |a_i - b_i|^2` over all points.
pub fn align_loss(aligned: &LandmarkSet, target: &LandmarkSet) -> Result<f64> {
    aligned.check_same_len(target)?;
    Ok(aligned.points().iter().zip(target.points()).map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sum())
}

/// Random similarity plus per-point jitter used to hide the pose set's face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpConfig {
    /// Rotation drawn uniformly from `[-r, r]` radians.
    pub rotation_range: f64,
    /// Scale drawn uniformly from this interval.
    pub scale_range: [f64; 2],
    /// Per-axis translation drawn uniformly from `[-d, d]`.
    pub translation_range: f64,
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self { rotation_range: 15f64.to_radians(), scale_range: [0.9, 1.1], translation_range: 0.05, jitter_sigma: 0.01, seed: 0 }
    }
}

impl WarpConfig {
    pub fn identity() -> Self {
        Self { rotation_range: 0.0, scale_range: [1.0, 1.0], translation_range: 0.0, jitter_sigma: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        let ok = self.rotation_range >= 0.0
            && self.translation_range >= 0.0
            && self.jitter_sigma >= 0.0
            && lo > 0.0
            && lo <= 1.0
            && hi >= 1.0;
        if !ok {
            return Err(Error::Config("warp ranges must be non-negative and contain the identity".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// [`warp_landmarks`] drawing from a caller-provided generator. The
/// similarity pivots on the set's centroid.
pub fn warp_with<R: Rng>(l: &LandmarkSet, config: &WarpConfig, rng: &mut R) -> LandmarkSet {
    let a = uniform(rng, -config.rotation_range, config.rotation_range);
    let s = uniform(rng, config.scale_range[0], config.scale_range[1]);
    let shift = [symmetric(rng, config.translation_range), symmetric(rng, config.translation_range)];
    let mut out = if a == 0.0 && s == 1.0 && shift == [0.0, 0.0] {
        l.clone()
    } else {
        l.map(&Affine2::similarity_about(s, a, l.centroid(), shift))
    };
    if config.jitter_sigma > 0.0 {
        for p in out.points_mut() {
            p[0] += config.jitter_sigma * normal(rng);
            p[1] += config.jitter_sigma * normal(rng);
        }
    }
    out
}

/// Deterministic warp seeded by `config.seed`.
pub fn warp_landmarks(l: &LandmarkSet, config: &WarpConfig) -> LandmarkSet {
    warp_with(l, config, &mut seeded(config.seed))
}

/// One training pair: pose landmarks `l_p` and face landmarks `l_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignPair {
    pub pose: LandmarkSet,
    pub face: LandmarkSet,
}

/// Synthetic stand-in for multi-view pairs: one canonical face seen under two
/// random rigid poses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub pairs: usize,
    pub max_rotation: f64,
    pub max_scale: f64,
    pub max_shift: f64,
    pub max_open: f64,
    pub seed: u64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self { pairs: 64, max_rotation: 60f64.to_radians(), max_scale: 0.15, max_shift: 0.1, max_open: 0.08, seed: 0 }
    }
}

fn random_pose<R: Rng>(rng: &mut R, cfg: &RigConfig) -> Affine2 {
    let a = symmetric(rng, cfg.max_rotation);
    let s = 1.0 + symmetric(rng, cfg.max_scale);
    Affine2::similarity_about(s, a, [0.5, 0.5], [symmetric(rng, cfg.max_shift), symmetric(rng, cfg.max_shift)])
}

pub fn rigid_pose_pairs(cfg: &RigConfig) -> Vec<AlignPair> {
    let mut rng = seeded(cfg.seed);
    (0..cfg.pairs)
        .map(|_| {
            let face = canonical_face(rng.random_range(0.0..=cfg.max_open));
            let pose = face.map(&random_pose(&mut rng, cfg));
            let f = face.map(&random_pose(&mut rng, cfg));
            AlignPair { pose, face: f }
        })
        .collect()
}

/// Schedule of alignment training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Cosine decay of the step size to zero over `steps`.
    pub cosine: bool,
    pub seed: u64,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch: 8, lr: 1e-2, optimizer: OptimizerKind::Adam, cosine: true, seed: 0 }
    }
}

fn pair_loss_on(tape: &Tape, p: &Bound, pose: &LandmarkSet, face: &LandmarkSet, target: &LandmarkSet) -> Var {
    let y = align_on(tape, p, tape.constant(pose.to_tensor()), tape.constant(face.to_tensor()));
    tape.sum_squares(tape.sub(y, tape.constant(target.to_tensor())))
}

/// `L_align(AN(warp(l_p), l_f), l_p)` and its parameter gradient.
pub fn align_loss_grad(params: &AlignmentParams, warped_pose: &LandmarkSet, pair: &AlignPair) -> Result<(f64, Vec<Tensor>)> {
    params.check(warped_pose)?;
    params.check(&pair.face)?;
    params.check(&pair.pose)?;
    let tape = Tape::new();
    let p = params.store.bind(&tape);
    let loss = pair_loss_on(&tape, &p, warped_pose, &pair.face, &pair.pose);
    Ok((tape.scalar(loss), p.grads(&tape.backward(loss))))
}

/// Mean warped alignment loss over `data`, with warps drawn from `warp.seed`.
pub fn dataset_align_loss(params: &AlignmentParams, data: &[AlignPair], warp: &WarpConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("alignment dataset".into()));
    }
    let mut rng = seeded(warp.seed);
    let mut s = 0.0;
    for pair in data {
        let wp = warp_with(&pair.pose, warp, &mut rng);
        s += align_loss(&params.align(&wp, &pair.face)?, &pair.pose)?;
    }
    Ok(s / data.len() as f64)
}

/// Minibatch training on warped pairs. Returns the trained weights and the
/// per-step batch loss.
pub fn train_alignment(
    params: &AlignmentParams,
    data: &[AlignPair],
    warp: &WarpConfig,
    config: &AlignTrainConfig,
) -> Result<(AlignmentParams, Vec<f64>)> {
    warp.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("alignment dataset".into()));
    }
    for pair in data {
        params.check(&pair.pose)?;
        params.check(&pair.face)?;
    }
    let mut out = params.clone();
    let mut rng = seeded(config.seed ^ warp.seed.rotate_left(17));
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut log = Vec::with_capacity(config.steps);
    let batch = config.batch.max(1);
    for step in 0..config.steps {
        if config.cosine {
            opt.set_lr(config.lr * 0.5 * (1.0 + (core::f64::consts::PI * step as f64 / config.steps as f64).cos()));
        }
        let tape = Tape::new();
        let p = out.store.bind(&tape);
        let mut total: Option<Var> = None;
        for _ in 0..batch {
            let pair = &data[rng.random_range(0..data.len())];
            let wp = warp_with(&pair.pose, warp, &mut rng);
            let l = pair_loss_on(&tape, &p, &wp, &pair.face, &pair.pose);
            total = Some(total.map_or(l, |acc| tape.add(acc, l)));
        }
        let loss = tape.scale(total.expect("batch >= 1"), 1.0 / batch as f64);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training { step, context: "alignment".into() });
        }
        log.push(value);
        let grads = p.grads(&tape.backward(loss));
        opt.step_store(&mut out.store, &grads);
    }
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_network_returns_query() {
        let p = AlignmentParams::new(68, TOKEN_SIZE, 3);
        let face = canonical_face(0.03);
        let pose = face.map(&Affine2::similarity_about(1.0, 0.4, [0.5, 0.5], [0.0, 0.0]));
        assert_eq!(p.align(&pose, &face).unwrap(), face);
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = Tensor::new(&[2, 2], alloc::vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let k = Tensor::new(&[1, 2], alloc::vec![0.3, 0.7]).unwrap();
        let w = Tensor::new(&[2, 2], alloc::vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let out = cross_attention(&q, &k, &w, &w, &w).unwrap();
        let v = [0.3 - 0.7, 0.6 + 0.35];
        for r in 0..2 {
            assert!((out.data()[2 * r] - v[0]).abs() < 1e-15);
            assert!((out.data()[2 * r + 1] - v[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_warp_is_exact() {
        let l = canonical_face(0.05);
        assert_eq!(warp_landmarks(&l, &WarpConfig::identity()), l);
        let c = WarpConfig { seed: 9, ..Default::default() };
        assert_eq!(warp_landmarks(&l, &c), warp_landmarks(&l, &c));
    }

    #[test]
    fn store_roundtrip_validates() {
        let p = AlignmentParams::new(4, 6, 1);
        assert_eq!(AlignmentParams::from_store(p.store().clone()).unwrap(), p);
        let mut bad = ParamStore::new();
        bad.add("align.embed", Tensor::zeros(&[3, 6]));
        assert!(AlignmentParams::from_store(bad).is_err());
    }
}
