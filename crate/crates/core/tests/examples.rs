mod common;

use common::*;
use lek_core::alignment::{align_loss, cross_attention, warp_landmarks, AlignmentParams, WarpConfig};
use lek_core::audio2landmark::{apply_displacements, A2lConfig, AudioFeatureWindow, DisentangleModel, LandmarkDisplacement, PredictorModel};
use lek_core::error::Error;
use lek_core::frame::{Frame, FrameSequence};
use lek_core::generator::{locality_regularizer, pivotal_tune, synthesize, LatentCode, PtiConfig};
use lek_core::geometry::Affine2;
use lek_core::heatmap::{render_heatmaps, HeatmapExtractor, RenderExtractor, DEFAULT_SIGMA};
use lek_core::landmarks::{canonical_face, LandmarkSet};
use lek_core::metrics::{f_ld, fid_from_features, frechet_distance, gaussian_fit, lpips_metric, psnr, ssim, ssim_at, SsimWindow};
use lek_core::optimizer::{optimize_frame, optimize_sequence, perceptual_loss, total_loss, Backends, OptimizeConfig, Predecessor};
use lek_core::perceptual::{PerceptualMetric, ToyPerceptual};
use lek_core::rng::{normal, seeded};
use lek_core::stitching::{composite, stitch_tune, stitching_loss, Mask, RegionMask, StitchConfig};
use lek_core::tensor::Tensor;
use std::collections::BTreeMap;

fn windows(n: usize, seed: u64) -> Vec<AudioFeatureWindow> {
    let mut rng = seeded(seed);
    (0..n).map(|i| AudioFeatureWindow::new(Tensor::from_fn(&[4, 14], |_| normal(&mut rng)), i).unwrap()).collect()
}

#[test]
fn hand_computed_attention() {
    // 2 queries x 3 keys, unit projections, width 2
    let q = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let k = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 2.0, 1.0, 1.0]).unwrap();
    let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let out = cross_attention(&q, &k, &eye, &eye, &eye).unwrap();
    let s = 2f64.sqrt();
    for (r, scores) in [[1.0, 0.0, 1.0], [0.0, 2.0, 1.0]].iter().enumerate() {
        let e: Vec<f64> = scores.iter().map(|v| (v / s).exp()).collect();
        let z: f64 = e.iter().sum();
        let expect = [(e[0] * 1.0 + e[2] * 1.0) / z, (e[1] * 2.0 + e[2] * 1.0) / z];
        assert!((out.data()[r * 2] - expect[0]).abs() < 1e-12);
        assert!((out.data()[r * 2 + 1] - expect[1]).abs() < 1e-12);
    }
}

#[test]
fn attention_over_identical_keys_returns_their_value() {
    let mut rng = seeded(1);
    let q = Tensor::from_fn(&[3, 4], |_| normal(&mut rng));
    let row: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
    let k = Tensor::from_fn(&[5, 4], |i| row[i % 4]);
    let w = |r, c, rng: &mut _| Tensor::from_fn(&[r, c], |_| normal(rng));
    let (wq, wk, wv) = (w(4, 3, &mut rng), w(4, 3, &mut rng), w(4, 3, &mut rng));
    let out = cross_attention(&q, &k, &wq, &wk, &wv).unwrap();
    let single = cross_attention(&q, &Tensor::new(&[1, 4], row.clone()).unwrap(), &wq, &wk, &wv).unwrap();
    for j in 0..3 {
        let v: f64 = (0..4).map(|i| row[i] * wv.data()[i * 3 + j]).sum();
        for r in 0..3 {
            assert!((out.data()[r * 3 + j] - v).abs() < 1e-12);
            assert_eq!(single.data()[r * 3 + j], v);
        }
    }
    assert!(matches!(cross_attention(&q, &k, &wq, &wk, &Tensor::zeros(&[3, 3])), Err(Error::Shape(_))));
}

#[test]
fn fresh_alignment_network_returns_query() {
    let p = AlignmentParams::new(68, 32, 0);
    let face = canonical_face(0.04);
    let pose = face.map(&Affine2::similarity_about(1.1, 0.4, [0.5, 0.5], [0.02, 0.0]));
    assert_eq!(p.align(&pose, &face).unwrap(), face);
    assert_eq!(p.tokenize(&face).unwrap().shape(), &[68, 32]);
    assert!(p.align(&pose, &canonical_face(0.0).translated(0.0, 0.0)).is_ok());
    assert!(matches!(p.align(&LandmarkSet::new(vec![[0.5, 0.5]]).unwrap(), &face), Err(Error::Shape(_))));
}

#[test]
fn align_loss_closed_form_and_loop() {
    let a = LandmarkSet::new(vec![[0.2, 0.3], [0.5, 0.5]]).unwrap();
    assert_eq!(align_loss(&a, &a).unwrap(), 0.0);
    assert!((align_loss(&a.translated(0.1, 0.0), &a).unwrap() - 0.02).abs() < 1e-15);
    let mut rng = seeded(2);
    let r = |rng: &mut _| LandmarkSet::new((0..7).map(|_| [normal(rng), normal(rng)]).collect()).unwrap();
    let (x, y) = (r(&mut rng), r(&mut rng));
    let brute: f64 = x.flat().iter().zip(y.flat()).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!((align_loss(&x, &y).unwrap() - brute).abs() < 1e-12);
    assert!(align_loss(&x, &a).is_err());
}

#[test]
fn warp_reproducible_and_centred() {
    let face = canonical_face(0.02);
    let cfg = WarpConfig { seed: 5, ..Default::default() };
    assert_eq!(warp_landmarks(&face, &cfg), warp_landmarks(&face, &cfg));
    let cfg = WarpConfig { rotation_range: std::f64::consts::FRAC_PI_6, scale_range: [1.0, 1.0], translation_range: 0.0, jitter_sigma: 0.0, seed: 0 };
    let mut sum = 0.0;
    for seed in 0..1000 {
        let w = warp_landmarks(&face, &WarpConfig { seed, ..cfg });
        sum += lek_core::geometry::procrustes_rotation(face.points(), w.points()).unwrap();
    }
    assert!((sum / 1000.0).abs() < 0.01, "mean rotation {}", sum / 1000.0);
}

#[test]
fn encoders_have_declared_shapes_and_are_deterministic() {
    let m = DisentangleModel::new(A2lConfig::default(), 3);
    let w = windows(10, 4);
    let c = m.encode_content(&w).unwrap();
    assert_eq!(c.len(), 10);
    assert!(c.iter().all(|v| v.len() == 16));
    assert_eq!(c, m.encode_content(&w).unwrap());
    let e = m.encode_emotion(&w).unwrap();
    assert_eq!(e.len(), 8);
    assert_eq!(e, m.encode_emotion(&w).unwrap());
    assert!(m.encode_content(&[]).is_err());
    let bad = AudioFeatureWindow::new(Tensor::zeros(&[4, 13]), 0).unwrap();
    assert!(matches!(m.encode_content(&[bad]), Err(Error::Shape(_))));
}

#[test]
fn zero_encoder_gives_zero_embeddings() {
    let mut m = DisentangleModel::new(A2lConfig::default(), 3);
    for t in m.params_mut().tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let c = m.encode_content(&windows(5, 1)).unwrap();
    assert!(c.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn predictor_emits_one_displacement_per_frame() {
    let p = PredictorModel::new(A2lConfig::default(), 1);
    let contents: Vec<Vec<f64>> = (0..10).map(|i| vec![0.1 * i as f64; 16]).collect();
    let out = p.predict_displacements(&contents, &[0.2; 8]).unwrap();
    assert_eq!(out.len(), 10);
    assert!(out.iter().all(|d| d.len() == 68));
    let mut changed = contents.clone();
    changed[7] = vec![3.0; 16];
    let out2 = p.predict_displacements(&changed, &[0.2; 8]).unwrap();
    assert_eq!(out[..7], out2[..7]);
    assert_ne!(out[7], out2[7]);
    assert!(matches!(p.predict_displacements(&contents, &[0.0; 7]), Err(Error::Shape(_))));
}

#[test]
fn displacement_examples() {
    let t = canonical_face(0.0);
    assert_eq!(apply_displacements(&t, &[LandmarkDisplacement::zeros(68)]).unwrap()[0], t);
    let down = LandmarkDisplacement::new(vec![[0.0, 0.1]; 68]).unwrap();
    let moved = &apply_displacements(&t, &[down]).unwrap()[0];
    for (a, b) in moved.points().iter().zip(t.points()) {
        assert!((a[1] - b[1] - 0.1).abs() < 1e-12 && a[0] == b[0]);
    }
    let mut d = vec![[0.0, 0.0]; 68];
    d[0] = [1.2, 0.0];
    let out = apply_displacements(&t, &[LandmarkDisplacement::new(d).unwrap()]).unwrap();
    assert_eq!(out[0].points()[0][0], 1.0);
    assert!(apply_displacements(&t, &[LandmarkDisplacement::zeros(5)]).is_err());
}

#[test]
fn render_extractor_equals_renderer() {
    let l = canonical_face(0.03);
    let mut m = BTreeMap::new();
    m.insert(4, l.clone());
    let e = RenderExtractor::new(64, DEFAULT_SIGMA, m).unwrap();
    let mut f = Frame::filled(64, [0.1; 3], 0).unwrap();
    f.index = 4;
    assert_eq!(e.extract(&f).unwrap(), render_heatmaps(&l, DEFAULT_SIGMA).unwrap());
}

#[test]
fn perceptual_identity_and_symmetry() {
    let m = ToyPerceptual::default();
    let (a, b) = (random_frame(16, 1), random_frame(16, 2));
    assert_eq!(perceptual_loss(&a, &a, &m).unwrap(), 0.0);
    assert_eq!(perceptual_loss(&a, &b, &m).unwrap(), perceptual_loss(&b, &a, &m).unwrap());
    assert_eq!(lpips_metric(&a, &b, &m).unwrap().to_bits(), perceptual_loss(&a, &b, &m).unwrap().to_bits());
    assert!(matches!(perceptual_loss(&a, &random_frame(8, 3), &m), Err(Error::Shape(_))));
}

#[test]
fn total_loss_term_isolation() {
    let h = tiny_handle(1);
    let loc = random_locator(8, 4, 5, 2);
    let metric = ToyPerceptual::default();
    let b = Backends { perceptual: &metric, extractor: &loc };
    let w = random_latent(&h, 0.5, 3);
    let x = synthesize(&w, &h).unwrap();
    let weights = lek_core::heatmap::LandmarkWeights::uniform(5, 1.0).unwrap();
    let base = OptimizeConfig { weights, ..Default::default() };
    // every term vanishes at the trivial point
    let hx = loc.extract(&x).unwrap();
    let prev = Some(Predecessor { latent: &w, frame: &x });
    let t = total_loss(&x, &x, &hx, prev, &w, &base, &b).unwrap();
    assert_eq!((t.total, t.lpips, t.fan, t.smooth), (0.0, 0.0, 0.0, 0.0));
    let f = random_frame(8, 4);
    let target = render_heatmaps(&LandmarkSet::new(vec![[0.4, 0.4]; 5]).unwrap(), DEFAULT_SIGMA).unwrap();
    let wp = random_latent(&h, 0.5, 5);
    let xp = synthesize(&wp, &h).unwrap();
    let prev = Some(Predecessor { latent: &wp, frame: &xp });
    let only_lpips = OptimizeConfig { lambda_fan: 0.0, lambda_smooth: 0.0, ..base.clone() };
    let t = total_loss(&f, &x, &target, prev, &w, &only_lpips, &b).unwrap();
    assert_eq!(t.total, only_lpips.lambda_lpips * perceptual_loss(&f, &x, &metric).unwrap());
    // no predecessor: no smoothness
    let t = total_loss(&f, &x, &target, None, &w, &base, &b).unwrap();
    assert_eq!(t.smooth, 0.0);
    let d = OptimizeConfig::default();
    assert_eq!((d.lambda_lpips, d.lambda_fan, d.lambda_smooth, d.lr, d.iterations), (1.0, 5e-3, 1e-4, 1e-3, 300));
}

#[test]
fn zero_iterations_and_weights_untouched() {
    let h = tiny_handle(2);
    let loc = random_locator(8, 4, 5, 2);
    let metric = ToyPerceptual::default();
    let b = Backends { perceptual: &metric, extractor: &loc };
    let weights = lek_core::heatmap::LandmarkWeights::uniform(5, 1.0).unwrap();
    let w0 = random_latent(&h, 0.5, 6);
    let f = random_frame(8, 7);
    let target = LandmarkSet::new(vec![[0.5, 0.45]; 5]).unwrap();
    let none = OptimizeConfig { iterations: 0, weights: weights.clone(), ..Default::default() };
    assert_eq!(optimize_frame(&f, &w0, None, &target, &h, &none, b).unwrap().0, w0);
    let sum = h.params().checksum();
    let cfg = OptimizeConfig { iterations: 20, weights, ..Default::default() };
    let (w, log) = optimize_frame(&f, &w0, None, &target, &h, &cfg, b).unwrap();
    assert_eq!(h.params().checksum(), sum);
    assert_eq!(log.len(), 21);
    assert_ne!(w, w0);
    // a one-frame sequence is a single optimize_frame
    let seq = FrameSequence::new(vec![f.clone()], 25.0).unwrap();
    let tr = optimize_sequence(&seq, &[w0.clone()], &[target.clone()], &h, &cfg, b).unwrap();
    assert_eq!(tr.codes[0], w);
    assert!(tr.loss_log[0].iter().all(|t| t.smooth == 0.0));
}

#[test]
fn stationary_point_has_no_gradient() {
    let h = tiny_handle(3);
    let loc = random_locator(8, 4, 5, 3);
    let metric = ToyPerceptual::default();
    let b = Backends { perceptual: &metric, extractor: &loc };
    let w0 = random_latent(&h, 0.5, 8);
    let f = synthesize(&w0, &h).unwrap();
    let target = loc.locate(&f).unwrap();
    let cfg = OptimizeConfig { weights: lek_core::heatmap::LandmarkWeights::uniform(5, 1.0).unwrap(), ..Default::default() };
    let obj = lek_core::optimizer::FrameObjective::new(&f, &target, None, &h, &cfg, b).unwrap();
    let (terms, g) = obj.evaluate(&w0).unwrap();
    let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-6, "gradient norm {norm:e}, loss {terms:?}");
    let (w, _) = optimize_frame(&f, &w0, None, &target, &h, &cfg, b).unwrap();
    assert!(w.distance_sq(&w0).unwrap().sqrt() < 1e-6);
}

#[test]
fn pti_zero_steps_and_locality_examples() {
    let h = tiny_handle(4);
    let metric = ToyPerceptual::default();
    let frames = FrameSequence::new((0..3).map(|i| Frame::new(8, random_frame(8, i).pixels().to_vec(), i as usize).unwrap()).collect(), 25.0).unwrap();
    let pivots: Vec<LatentCode> = (0..3).map(|i| random_latent(&h, 0.5, 10 + i)).collect();
    let same = pivotal_tune(&frames, &pivots, &h, &PtiConfig { steps: 0, ..Default::default() }, &metric).unwrap();
    assert_eq!(same.params(), h.params());
    assert_eq!(same.params_orig(), h.params_orig());
    assert_eq!(locality_regularizer(&h, &pivots, 1.0, &metric, &mut seeded(1)).unwrap(), 0.0);
    let moved = h.with_params(perturbed(h.params(), 0.1, 2)).unwrap();
    assert!(locality_regularizer(&moved, &pivots, 1.0, &metric, &mut seeded(1)).unwrap() > 0.0);
    // monotone back along the segment to θ_orig
    let mut last = f64::INFINITY;
    for k in 0..5 {
        let t = 1.0 - k as f64 / 4.0;
        let p = h.params().lerp(moved.params(), t).unwrap();
        let v = locality_regularizer(&h.with_params(p).unwrap(), &pivots, 1.0, &metric, &mut seeded(1)).unwrap();
        assert!(v < last || (k == 4 && v == 0.0));
        last = v;
    }
    assert_eq!(last, 0.0);
    let tuned = pivotal_tune(&frames, &pivots, &h, &PtiConfig { steps: 30, lr: 1e-3, ..Default::default() }, &metric).unwrap();
    assert_eq!(tuned.params_orig(), h.params_orig());
    for (f, w) in frames.frames().iter().zip(&pivots) {
        let before = metric.distance(f, &synthesize(w, &h).unwrap()).unwrap();
        let after = metric.distance(f, &synthesize(w, &tuned).unwrap()).unwrap();
        assert!(after <= before + 1e-6);
    }
}

fn block_region(size: usize, radius: usize) -> RegionMask {
    let mut m = Mask::zeros(size);
    for y in size / 4..3 * size / 4 {
        for x in size / 4..3 * size / 4 {
            m.set(x, y, true);
        }
    }
    RegionMask::from_mask(m, radius).unwrap()
}

#[test]
fn stitching_loss_trivial_isolated_and_loop() {
    let h = tiny_handle(5);
    let w = random_latent(&h, 0.5, 1);
    let x = synthesize(&w, &h).unwrap();
    let region = block_region(8, 1);
    let cfg = StitchConfig { dilation_radius: 2, feather: 1, ..Default::default() };
    let t = stitching_loss(&h, &w, &x, &region, &cfg).unwrap();
    assert_eq!((t.total, t.boundary, t.mask), (0.0, 0.0, 0.0));
    let moved = h.with_params(perturbed(h.params(), 0.1, 3)).unwrap();
    let f = random_frame(8, 2);
    let t = stitching_loss(&moved, &w, &f, &region, &cfg).unwrap();
    let iso = stitching_loss(&moved, &w, &f, &region, &StitchConfig { lambda_m: 0.0, ..cfg }).unwrap();
    assert_eq!(iso.total, t.boundary);
    // brute force over masked pixels
    let cur = synthesize(&w, &moved).unwrap();
    let orig = moved.synthesize_orig(&w).unwrap();
    let (mut bsum, mut bn, mut msum, mut mn) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..8 {
        for x in 0..8 {
            for c in 0..3 {
                if region.boundary().get(x, y) {
                    bsum += (cur.get(c, y, x) - f.get(c, y, x)).abs();
                    bn += 1.0;
                }
                if region.mask().get(x, y) {
                    msum += (cur.get(c, y, x) - orig.get(c, y, x)).abs();
                    mn += 1.0;
                }
            }
        }
    }
    assert!((t.boundary - bsum / bn).abs() < 1e-7);
    assert!((t.mask - msum / mn).abs() < 1e-7);
    assert!((t.total - (bsum / bn + cfg.lambda_m * msum / mn)).abs() < 1e-7);
    // a region without boundary contributes nothing
    let full = RegionMask::from_mask(Mask::ones(8), 1).unwrap();
    let e = stitching_loss(&moved, &w, &f, &full, &StitchConfig { lambda_m: 0.0, ..cfg }).unwrap();
    assert!(e.empty_boundary && e.total == 0.0);
}

#[test]
fn stitch_tune_zero_steps_and_latents_untouched() {
    let h = tiny_handle(6);
    let frames: Vec<Frame> = (0..2).map(|i| random_frame(8, 20 + i)).collect();
    let codes: Vec<LatentCode> = (0..2).map(|i| random_latent(&h, 0.5, 30 + i)).collect();
    let tr = lek_core::optimizer::LatentTrajectory { codes: codes.clone(), loss_log: vec![vec![]; 2] };
    let regions = vec![block_region(8, 1), block_region(8, 1)];
    let cfg = StitchConfig { dilation_radius: 2, feather: 1, steps: 0, ..Default::default() };
    let same = stitch_tune(&frames, &tr, &regions, &h, &cfg).unwrap();
    assert_eq!(same.params(), h.params());
    let tuned = stitch_tune(&frames, &tr, &regions, &h, &StitchConfig { steps: 5, ..cfg }).unwrap();
    assert_eq!(tr.codes, codes);
    assert_ne!(tuned.params(), h.params());
}

#[test]
fn composite_edge_cases() {
    let (edited, source) = (random_frame(16, 1), random_frame(16, 2));
    assert_eq!(composite(&edited, &source, &Mask::zeros(16), &Affine2::IDENTITY, 3).unwrap(), source);
    assert_eq!(composite(&edited, &source, &Mask::ones(16), &Affine2::IDENTITY, 0).unwrap().pixels(), edited.pixels());
    let singular = Affine2::similarity(0.0, 0.0, 0.0, 0.0);
    assert!(matches!(composite(&edited, &source, &Mask::ones(16), &singular, 0), Err(Error::Geometry(_))));
}

#[test]
fn metric_examples() {
    let a = random_frame(16, 1);
    assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    assert_eq!(ssim(&a, &a, &SsimWindow::default()).unwrap(), 1.0);
    assert!(matches!(psnr(&a, &random_frame(8, 1)), Err(Error::Shape(_))));
    assert!(matches!(ssim(&a, &random_frame(8, 1), &SsimWindow::default()), Err(Error::Shape(_))));
    let b = random_frame(16, 2);
    let mse: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.pixels().len() as f64;
    assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-12);
    // binary image vs its complement
    let bin = Frame::new(16, (0..768).map(|i| ((i / 3 + i / 48) % 2) as f64).collect(), 0).unwrap();
    let inv = Frame::new(16, bin.pixels().iter().map(|v| 1.0 - v).collect(), 0).unwrap();
    assert!(ssim(&bin, &inv, &SsimWindow::default()).unwrap() <= 1.0);
}

#[test]
fn ssim_matches_per_window_loop() {
    let (a, b) = (random_frame(16, 3), random_frame(16, 4));
    let win = SsimWindow::default();
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let z: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..3 {
        for y0 in 0..6 {
            for x0 in 0..6 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let w = g[dy] * g[dx] / z;
                        ma += w * a.get(c, y0 + dy, x0 + dx);
                        mb += w * b.get(c, y0 + dy, x0 + dx);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let w = g[dy] * g[dx] / z;
                        let (p, q) = (a.get(c, y0 + dy, x0 + dx) - ma, b.get(c, y0 + dy, x0 + dx) - mb);
                        va += w * p * p;
                        vb += w * q * q;
                        cov += w * p * q;
                    }
                }
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                assert!((s - ssim_at(&a, &b, c, x0, y0, &win, &win.weights())).abs() < 1e-9);
                total += s;
            }
        }
    }
    assert!((ssim(&a, &b, &win).unwrap() - total / 108.0).abs() < 1e-9);
}

#[test]
fn f_ld_examples() {
    let mut rng = seeded(5);
    let seq = |rng: &mut _| (0..3).map(|_| LandmarkSet::new((0..4).map(|_| [normal(rng), normal(rng)]).collect()).unwrap()).collect::<Vec<_>>();
    let (p, g) = (seq(&mut rng), seq(&mut rng));
    let mut total = 0.0;
    for (a, b) in p.iter().zip(&g) {
        let mut s = 0.0;
        for k in 0..4 {
            s += ((a.points()[k][0] - b.points()[k][0]).powi(2) + (a.points()[k][1] - b.points()[k][1]).powi(2)).sqrt();
        }
        total += s / 4.0;
    }
    assert!((f_ld(&p, &g).unwrap() - total / 3.0).abs() < 1e-12);
    assert!(matches!(f_ld(&p, &g[..2]), Err(Error::Shape(_))));
}

#[test]
fn fid_of_diagonal_gaussian_clouds() {
    // large samples from known diagonal Gaussians approach the closed form
    let mut rng = seeded(9);
    let (mu_a, sd_a) = ([0.0, 1.0, -1.0], [1.0, 0.5, 2.0]);
    let (mu_b, sd_b) = ([0.5, 1.0, 0.0], [2.0, 0.5, 1.0]);
    let draw = |mu: &[f64; 3], sd: &[f64; 3], rng: &mut _| (0..20000).map(|_| (0..3).map(|i| mu[i] + sd[i] * normal(rng)).collect()).collect::<Vec<Vec<f64>>>();
    let (a, b) = (draw(&mu_a, &sd_a, &mut rng), draw(&mu_b, &sd_b, &mut rng));
    let closed: f64 = (0..3).map(|i| (mu_a[i] - mu_b[i]).powi(2) + (sd_a[i] - sd_b[i]).powi(2)).sum();
    let est = fid_from_features(&a, &b).unwrap();
    assert!((est - closed).abs() < 0.1, "{est} vs {closed}");
    // exact fits reproduce the closed form
    let (ma, ca) = gaussian_fit(&a).unwrap();
    let (mb, cb) = gaussian_fit(&b).unwrap();
    let d = frechet_distance(&ma, &ca, &mb, &cb).unwrap();
    assert!((d - est).abs() < 1e-12);
    assert!(fid_from_features(&a[..1], &b).is_err());
}
