//! Per-frame latent optimization against perceptual, landmark and smoothness terms.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::frame::{Frame, FrameSequence};
use crate::generator::{GeneratorHandle, LatentCode};
use crate::heatmap::{fan_loss_on, render_on, HeatmapExtractor, HeatmapStack, LandmarkWeights, DEFAULT_SIGMA};
use crate::landmarks::LandmarkSet;
use crate::optim::{Optimizer, OptimizerKind};
use crate::perceptual::PerceptualMetric;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which consecutive-frame penalty enters the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothVariant {
    /// Squared latent distance to the previous frame's optimized code.
    #[default]
    Latent,
    /// Mean squared pixel distance to the previous frame's synthesis.
    Frame,
    Off,
}

impl FromStr for SmoothVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Self::Latent),
            "frame" => Ok(Self::Frame),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!("unknown smoothness variant `{other}`"))),
        }
    }
}

/// Weights and schedule of the per-frame optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub lambda_lpips: f64,
    pub lambda_fan: f64,
    pub lambda_smooth: f64,
    pub lr: f64,
    pub iterations: usize,
    pub weights: LandmarkWeights,
    pub smooth_variant: SmoothVariant,
    pub optimizer: OptimizerKind,
    /// Width of the target heatmaps in heatmap pixels.
    pub sigma: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            lambda_lpips: 1.0,
            lambda_fan: 5e-3,
            lambda_smooth: 1e-4,
            lr: 1e-3,
            iterations: 300,
            weights: LandmarkWeights::default(),
            smooth_variant: SmoothVariant::Latent,
            optimizer: OptimizerKind::Sgd,
            sigma: DEFAULT_SIGMA,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_lpips, self.lambda_fan, self.lambda_smooth, self.lr].iter().all(|v| *v >= 0.0 && v.is_finite());
        if !ok {
            return Err(Error::Config("loss weights and learning rate must be finite and nonnegative".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("heatmap sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Values of the loss and its raw (unweighted) terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub lpips: f64,
    pub fan: f64,
    pub smooth: f64,
}

/// Perceptual metric and heatmap extractor used by the objective.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub perceptual: &'a dyn PerceptualMetric,
    pub extractor: &'a dyn HeatmapExtractor,
}

/// The finished previous frame: its optimized latent and synthesis.
#[derive(Clone, Copy, Debug)]
pub struct Predecessor<'a> {
    pub latent: &'a LatentCode,
    pub frame: &'a Frame,
}

/// Perceptual distance between two frames.
pub fn perceptual_loss(f: &Frame, x: &Frame, metric: &dyn PerceptualMetric) -> Result<f64> {
    metric.distance(f, x)
}

/// Squared latent distance `||w_prev - w||^2`.
pub fn smoothness_loss(w_prev: &LatentCode, w: &LatentCode) -> Result<f64> {
    w_prev.distance_sq(w)
}

/// Mean squared pixel distance between consecutive syntheses.
pub fn frame_smoothness_loss(x_prev: &Frame, x: &Frame) -> Result<f64> {
    x_prev.check_same_size(x)?;
    let n = x.pixels().len() as f64;
    Ok(x_prev.pixels().iter().zip(x.pixels()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

struct Terms {
    total: Var,
    lpips: Var,
    fan: Var,
    smooth: Option<Var>,
}

/// Assembles the weighted objective on `tape` for a synthesized image `x`.
/// A term whose weight is zero is left out of the total entirely.
fn objective_on(
    tape: &Tape,
    x: Var,
    h: Var,
    w: Option<Var>,
    target_feats: &[Tensor],
    h_target: &Tensor,
    prev: Option<(&LatentCode, &Frame)>,
    config: &OptimizeConfig,
    backends: &Backends<'_>,
) -> Result<Terms> {
    let lpips = backends.perceptual.distance_to_features_on(tape, x, target_feats);
    if tape.shape(h)[0] != config.weights.len() {
        return shape_err(format!("{} landmark weights for {} heatmaps", config.weights.len(), tape.shape(h)[0]));
    }
    let fan = fan_loss_on(tape, h, tape.constant(h_target.clone()), &config.weights);
    let smooth = match (prev, config.smooth_variant) {
        (None, _) | (_, SmoothVariant::Off) => None,
        (Some((wp, _)), SmoothVariant::Latent) => {
            let wv = w.ok_or_else(|| Error::Config("latent smoothness needs the latent".into()))?;
            let d = tape.sub(wv, tape.constant(wp.tensor().clone()));
            Some(tape.sum_squares(d))
        }
        (Some((_, xp)), SmoothVariant::Frame) => Some(tape.mse(x, tape.constant(xp.to_tensor()))),
    };
    let mut total = tape.scale(lpips, config.lambda_lpips);
    if config.lambda_fan != 0.0 {
        total = tape.add(total, tape.scale(fan, config.lambda_fan));
    }
    if let Some(s) = smooth {
        if config.lambda_smooth != 0.0 {
            total = tape.add(total, tape.scale(s, config.lambda_smooth));
        }
    }
    Ok(Terms { total, lpips, fan, smooth })
}

fn read_terms(tape: &Tape, t: &Terms) -> LossTerms {
    LossTerms {
        total: tape.scalar(t.total),
        lpips: tape.scalar(t.lpips),
        fan: tape.scalar(t.fan),
        smooth: t.smooth.map_or(0.0, |s| tape.scalar(s)),
    }
}

/// Weighted objective for a given synthesized frame `x` and its latent `w`.
///
/// Without a predecessor the smoothness term is zero.
pub fn total_loss(
    f: &Frame,
    x: &Frame,
    h_target: &HeatmapStack,
    prev: Option<Predecessor<'_>>,
    w: &LatentCode,
    config: &OptimizeConfig,
    backends: &Backends<'_>,
) -> Result<LossTerms> {
    config.validate()?;
    f.check_same_size(x)?;
    if let Some(p) = prev {
        p.latent.distance_sq(w)?;
        p.frame.check_same_size(x)?;
    }
    let tape = Tape::new();
    let xv = tape.constant(x.to_tensor());
    let wv = tape.constant(w.tensor().clone());
    let feats = backends.perceptual.features(f);
    let h = tape.constant(backends.extractor.extract(x)?.to_tensor());
    let t = objective_on(&tape, xv, h, Some(wv), &feats, &h_target.to_tensor(), prev.map(|p| (p.latent, p.frame)), config, backends)?;
    Ok(read_terms(&tape, &t))
}

/// The objective of one frame as a function of its latent, with generator
/// weights held fixed.
pub struct FrameObjective<'a> {
    handle: &'a GeneratorHandle,
    backends: Backends<'a>,
    config: &'a OptimizeConfig,
    target_feats: Vec<Tensor>,
    h_target: Tensor,
    prev: Option<(LatentCode, Frame)>,
    pub frame_index: usize,
}

impl<'a> FrameObjective<'a> {
    pub fn new(
        f: &Frame,
        target_landmarks: &LandmarkSet,
        prev: Option<Predecessor<'_>>,
        handle: &'a GeneratorHandle,
        config: &'a OptimizeConfig,
        backends: Backends<'a>,
    ) -> Result<Self> {
        config.validate()?;
        handle.check_frame(f)?;
        if target_landmarks.len() != config.weights.len() {
            return shape_err(format!("{} target landmarks for {} weights", target_landmarks.len(), config.weights.len()));
        }
        if let Some(p) = prev {
            handle.check_latent(p.latent)?;
            handle.check_frame(p.frame)?;
        }
        let tape = Tape::new();
        let c = tape.constant(target_landmarks.to_tensor());
        let h_target = tape.value(render_on(&tape, c, config.sigma));
        Ok(Self {
            handle,
            backends,
            config,
            target_feats: backends.perceptual.features(f),
            h_target,
            prev: prev.map(|p| (p.latent.clone(), p.frame.clone())),
            frame_index: f.index,
        })
    }

    /// Loss terms at `w` and the gradient of the total w.r.t. `w`.
    pub fn evaluate(&self, w: &LatentCode) -> Result<(LossTerms, Tensor)> {
        self.handle.check_latent(w)?;
        let tape = Tape::new();
        let p = self.handle.params().bind_frozen(&tape);
        let wv = tape.leaf(w.tensor().clone());
        let x = self.handle.forward_on(&tape, wv, &p);
        let prev = self.prev.as_ref().map(|(l, f)| (l, f));
        let h = self.backends.extractor.extract_on(&tape, x)?;
        let t = objective_on(&tape, x, h, Some(wv), &self.target_feats, &self.h_target, prev, self.config, &self.backends)?;
        let terms = read_terms(&tape, &t);
        let g = tape.backward(t.total).get(wv);
        Ok((terms, g))
    }
}

/// Gradient descent on one frame's latent. The log holds the terms before
/// every update followed by the terms at the returned latent.
pub fn optimize_frame(
    f: &Frame,
    w_init: &LatentCode,
    prev: Option<Predecessor<'_>>,
    target_landmarks: &LandmarkSet,
    handle: &GeneratorHandle,
    config: &OptimizeConfig,
    backends: Backends<'_>,
) -> Result<(LatentCode, Vec<LossTerms>)> {
    let obj = FrameObjective::new(f, target_landmarks, prev, handle, config, backends)?;
    handle.check_latent(w_init)?;
    let mut w = w_init.tensor().clone();
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut log = Vec::with_capacity(config.iterations + 1);
    for iteration in 0..=config.iterations {
        let code = LatentCode::new(w.clone()).map_err(|_| Error::Optimization { frame: f.index, iteration })?;
        let (terms, g) = obj.evaluate(&code)?;
        if !terms.total.is_finite() || !g.is_finite() {
            return Err(Error::Optimization { frame: f.index, iteration });
        }
        log.push(terms);
        if iteration == config.iterations {
            break;
        }
        opt.step(&mut [w.data_mut()], &[g.data()]);
    }
    Ok((LatentCode::new(w)?, log))
}

/// Optimized latents of a clip with their per-frame loss logs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub codes: Vec<LatentCode>,
    pub loss_log: Vec<Vec<LossTerms>>,
}

impl LatentTrajectory {
    /// Mean Euclidean distance between consecutive codes.
    pub fn mean_consecutive_distance(&self) -> f64 {
        if self.codes.len() < 2 {
            return 0.0;
        }
        let s: f64 = self.codes.windows(2).map(|p| p[0].distance_sq(&p[1]).map_or(f64::NAN, |d| d.sqrt())).sum();
        s / (self.codes.len() - 1) as f64
    }

    /// Mean over consecutive pairs of the mean squared pixel difference of
    /// the syntheses.
    pub fn frame_difference_energy(&self, handle: &GeneratorHandle) -> Result<f64> {
        if self.codes.len() < 2 {
            return Ok(0.0);
        }
        let frames = self.codes.iter().map(|w| handle.synthesize_indexed(w, 0)).collect::<Result<Vec<_>>>()?;
        let mut s = 0.0;
        for p in frames.windows(2) {
            s += frame_smoothness_loss(&p[0], &p[1])?;
        }
        Ok(s / (frames.len() - 1) as f64)
    }

    /// Rows `frame,iteration,total,lpips,fan,smooth`.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for (i, log) in self.loss_log.iter().enumerate() {
            for (k, t) in log.iter().enumerate() {
                rows.push(format!("{i},{k},{},{},{},{}", t.total, t.lpips, t.fan, t.smooth));
            }
        }
        rows
    }
}

/// Optimizes frames in index order; frame `i` starts at its own pivot and is
/// anchored to the finished frame `i - 1`.
pub fn optimize_sequence(
    frames: &FrameSequence,
    pivots: &[LatentCode],
    predicted: &[LandmarkSet],
    handle: &GeneratorHandle,
    config: &OptimizeConfig,
    backends: Backends<'_>,
) -> Result<LatentTrajectory> {
    let n = frames.len();
    if pivots.len() != n || predicted.len() != n {
        return shape_err(format!("{n} frames, {} pivots, {} landmark sets", pivots.len(), predicted.len()));
    }
    let mut codes: Vec<LatentCode> = Vec::with_capacity(n);
    let mut synth: Option<Frame> = None;
    let mut loss_log = Vec::with_capacity(n);
    for (i, f) in frames.frames().iter().enumerate() {
        let prev = match (codes.last(), synth.as_ref()) {
            (Some(latent), Some(frame)) => Some(Predecessor { latent, frame }),
            _ => None,
        };
        let (w, log) = optimize_frame(f, &pivots[i], prev, &predicted[i], handle, config, backends)?;
        synth = Some(handle.synthesize_indexed(&w, f.index)?);
        codes.push(w);
        loss_log.push(log);
    }
    Ok(LatentTrajectory { codes, loss_log })
}
