//! Gradient checks shared by the core tests and the acceptance suite. Each
//! returns the worst relative error between the analytic gradient and central
//! finite differences.

use lek_core::frame::{Frame, FrameSequence};
use lek_core::generator::{pti_objective, synthesize, LatentCode, PtiConfig};
use lek_core::heatmap::{fan_loss_on, render_heatmaps, render_on, LandmarkWeights, DEFAULT_SIGMA};
use lek_core::landmarks::LandmarkSet;
use lek_core::optimizer::{perceptual_loss, smoothness_loss, total_loss, Backends, FrameObjective, OptimizeConfig, Predecessor, SmoothVariant};
use lek_core::perceptual::{PerceptualMetric, ToyPerceptual};
use lek_core::rng::{normal, seeded};
use lek_core::stitching::{stitching_loss, stitching_loss_grad, Mask, RegionMask, StitchConfig};
use lek_core::tape::Tape;
use lek_core::tensor::Tensor;
use rand::Rng;

use super::*;

fn random_landmarks(n: usize, seed: u64) -> LandmarkSet {
    let mut rng = seeded(seed);
    LandmarkSet::new((0..n).map(|_| [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)]).collect()).unwrap()
}

fn random_weights(n: usize, seed: u64) -> LandmarkWeights {
    let mut rng = seeded(seed);
    LandmarkWeights::new((0..n).map(|_| rng.random_range(0.5..3.0)).collect()).unwrap()
}

/// Heatmap loss of rendered coordinates against a fixed target stack.
pub fn fan_render() -> f64 {
    let n = 5;
    let coords = random_landmarks(n, 1);
    // targets within a few grid pixels, where the loss is far from flat
    let mut rng = seeded(2);
    let near = LandmarkSet::new(coords.points().iter().map(|p| [p[0] + rng.random_range(-0.04..0.04), p[1] + rng.random_range(-0.04..0.04)]).collect()).unwrap();
    let target = render_heatmaps(&near, DEFAULT_SIGMA).unwrap().to_tensor();
    let weights = random_weights(n, 3);
    let eval = |x: &[f64], grad: bool| {
        let tape = Tape::new();
        let c = tape.leaf(Tensor::new(&[n, 2], x.to_vec()).unwrap());
        let h = render_on(&tape, c, DEFAULT_SIGMA);
        let loss = fan_loss_on(&tape, h, tape.constant(target.clone()), &weights);
        let g = if grad { tape.backward(loss).get(c).into_data() } else { Vec::new() };
        (tape.scalar(loss), g)
    };
    let x = coords.flat();
    let (_, g) = eval(&x, true);
    check_gradient("fan∘render", &mut |p| eval(p, false).0, &x, &g, 2 * n, 11)
}

/// Squared latent distance to a fixed predecessor.
pub fn smoothness() -> f64 {
    let h = tiny_handle(0);
    let wp = random_latent(&h, 1.0, 4);
    let w = random_latent(&h, 1.0, 5);
    let tape = Tape::new();
    let wv = tape.leaf(w.tensor().clone());
    let loss = tape.sum_squares(tape.sub(wv, tape.constant(wp.tensor().clone())));
    let g = tape.backward(loss).get(wv).into_data();
    let shape = w.tensor().shape().to_vec();
    let mut f = |x: &[f64]| smoothness_loss(&wp, &LatentCode::new(Tensor::new(&shape, x.to_vec()).unwrap()).unwrap()).unwrap();
    check_gradient("smooth", &mut f, w.data(), &g, w.data().len(), 12)
}

/// Perceptual distance on 8x8 frames, w.r.t. the second image.
pub fn perceptual() -> f64 {
    let metric = ToyPerceptual::default();
    let f = random_frame(8, 6);
    let x = random_frame(8, 7);
    let feats = metric.features(&f);
    let tape = Tape::new();
    let xv = tape.leaf(x.to_tensor());
    let loss = metric.distance_to_features_on(&tape, xv, &feats);
    let g = tape.backward(loss).get(xv).into_data();
    let mut fun = |p: &[f64]| perceptual_loss(&f, &Frame::new(8, p.to_vec(), 0).unwrap(), &metric).unwrap();
    check_gradient("perceptual", &mut fun, x.pixels(), &g, 24, 13)
}

/// Full per-frame objective w.r.t. the latent, for both smoothness variants.
pub fn total_loss_wrt_latent() -> f64 {
    let h = tiny_handle(2);
    let n = 5;
    let locator = random_locator(8, 4, n, 8);
    let metric = ToyPerceptual::default();
    let backends = Backends { perceptual: &metric, extractor: &locator };
    let f = random_frame(8, 9);
    let target = random_landmarks(n, 10);
    let h_target = render_heatmaps(&target, DEFAULT_SIGMA).unwrap();
    let wp = random_latent(&h, 0.5, 11);
    let xp = synthesize(&wp, &h).unwrap();
    let w = random_latent(&h, 0.5, 12);
    let mut worst: f64 = 0.0;
    for variant in [SmoothVariant::Latent, SmoothVariant::Frame] {
        let config = OptimizeConfig {
            lambda_fan: 0.05,
            lambda_smooth: 0.1,
            weights: random_weights(n, 13),
            smooth_variant: variant,
            ..Default::default()
        };
        let prev = Some(Predecessor { latent: &wp, frame: &xp });
        let obj = FrameObjective::new(&f, &target, prev, &h, &config, backends).unwrap();
        let (_, g) = obj.evaluate(&w).unwrap();
        let shape = w.tensor().shape().to_vec();
        let mut fun = |p: &[f64]| {
            let wl = LatentCode::new(Tensor::new(&shape, p.to_vec()).unwrap()).unwrap();
            let x = synthesize(&wl, &h).unwrap();
            total_loss(&f, &x, &h_target, prev, &wl, &config, &backends).unwrap().total
        };
        worst = worst.max(check_gradient("total_loss", &mut fun, w.data(), g.data(), 12, 14));
    }
    worst
}

/// Pivotal-tuning objective w.r.t. the generator weights, with the locality
/// sample held fixed.
pub fn pti_wrt_weights() -> f64 {
    let h = tiny_handle(3);
    let frames = FrameSequence::new((0..3).map(|i| Frame::new(8, random_frame(8, 20 + i).pixels().to_vec(), i as usize).unwrap()).collect(), 25.0).unwrap();
    let pivots: Vec<LatentCode> = (0..3).map(|i| random_latent(&h, 0.5, 30 + i)).collect();
    let metric = ToyPerceptual::default();
    let config = PtiConfig { lambda_l2: 1.0, lambda_r: 0.5, ..Default::default() };
    // evaluate away from θ_orig so the locality term has a gradient
    let params = perturbed(h.params(), 0.05, 15);
    let eval = |p: &lek_core::params::ParamStore| pti_objective(&frames, &pivots, &h, p, &config, &metric, &mut seeded(16)).unwrap();
    let (_, _, _, grads) = eval(&params);
    let g = flat_grads(&grads);
    let mut fun = |x: &[f64]| {
        let mut p = params.clone();
        p.set_flat(x).unwrap();
        eval(&p).0
    };
    check_gradient("pti", &mut fun, &params.flat(), &g, 10, 17)
}

/// Stitching loss w.r.t. the generator weights.
pub fn stitching_wrt_weights() -> f64 {
    let base = tiny_handle(4);
    let h = base.with_params(perturbed(base.params(), 0.05, 18)).unwrap();
    let w = random_latent(&h, 0.5, 19);
    let f = random_frame(8, 21);
    let mut mask = Mask::zeros(8);
    for y in 2..6 {
        for x in 3..6 {
            mask.set(x, y, true);
        }
    }
    let region = RegionMask::from_mask(mask, 1).unwrap();
    let config = StitchConfig { lambda_m: 0.5, dilation_radius: 2, feather: 1, ..Default::default() };
    let (_, grads) = stitching_loss_grad(&h, &w, &f, &region, &config).unwrap();
    let g = flat_grads(&grads);
    let mut fun = |x: &[f64]| stitching_loss(&with_flat(&h, x), &w, &f, &region, &config).unwrap().total;
    check_gradient("stitching", &mut fun, &h.params().flat(), &g, 10, 22)
}

pub fn random_unit(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let v: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / norm).collect()
}
