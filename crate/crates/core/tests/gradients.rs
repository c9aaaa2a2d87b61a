mod common;

use common::grad_checks;
use common::*;
use lek_core::alignment::{align_loss, align_loss_grad, AlignPair, AlignmentParams};
use lek_core::generator::synthesize;
use lek_core::heatmap::{render_heatmaps, render_on, DEFAULT_SIGMA};
use lek_core::landmarks::LandmarkSet;
use lek_core::tape::Tape;
use lek_core::tensor::Tensor;

fn assert_small(name: &str, err: f64) {
    assert!(err < FD_TOL, "{name}: relative error {err:e}");
}

#[test]
fn heatmap_loss_of_rendered_coordinates() {
    assert_small("fan∘render", grad_checks::fan_render());
}

#[test]
fn latent_smoothness() {
    assert_small("smooth", grad_checks::smoothness());
}

#[test]
fn perceptual_distance_on_small_frames() {
    assert_small("perceptual", grad_checks::perceptual());
}

#[test]
fn total_objective_wrt_latent() {
    assert_small("total_loss", grad_checks::total_loss_wrt_latent());
}

#[test]
fn pivotal_objective_wrt_weights() {
    assert_small("pti", grad_checks::pti_wrt_weights());
}

#[test]
fn stitching_loss_wrt_weights() {
    assert_small("stitching", grad_checks::stitching_wrt_weights());
}

#[test]
fn render_wrt_coordinates() {
    // a single pixel of one map as a function of its landmark
    let l = LandmarkSet::new(vec![[0.41, 0.57], [0.6, 0.33]]).unwrap();
    for pixel in [26 * 64 + 36, 4096 + 21 * 64 + 38] {
        let eval = |x: &[f64], grad: bool| {
            let tape = Tape::new();
            let c = tape.leaf(Tensor::new(&[2, 2], x.to_vec()).unwrap());
            let h = render_on(&tape, c, DEFAULT_SIGMA);
            let v = tape.value(h).data()[pixel];
            let g = if grad {
                let mut sel = vec![0.0; 2 * 4096];
                sel[pixel] = 1.0;
                let s = tape.sum(tape.mul(h, tape.constant(Tensor::new(&[2, 64, 64], sel).unwrap())));
                tape.backward(s).get(c).into_data()
            } else {
                Vec::new()
            };
            (v, g)
        };
        let (_, g) = eval(&l.flat(), true);
        let err = check_gradient("render", &mut |p| eval(p, false).0, &l.flat(), &g, 4, 1);
        assert_small("render", err);
    }
    // the tape rendering agrees with the closed form
    let tape = Tape::new();
    let c = tape.constant(l.to_tensor());
    assert_eq!(tape.value(render_on(&tape, c, DEFAULT_SIGMA)).data(), render_heatmaps(&l, DEFAULT_SIGMA).unwrap().data());
}

#[test]
fn synthesis_directional_derivatives() {
    let h = tiny_handle(5);
    let w = random_latent(&h, 0.7, 2);
    let pixel_probe = grad_checks::random_unit(3 * 64, 3);
    let project = |x: &lek_core::frame::Frame| x.pixels().iter().zip(&pixel_probe).map(|(a, b)| a * b).sum::<f64>();
    // latent direction
    let tape = Tape::new();
    let p = h.params().bind(&tape);
    let wv = tape.leaf(w.tensor().clone());
    let x = h.forward_on(&tape, wv, &p);
    let s = tape.sum(tape.mul(x, tape.constant(Tensor::new(&[3, 8, 8], pixel_probe.clone()).unwrap())));
    let grads = tape.backward(s);
    let gw = grads.get(wv).into_data();
    let gt = flat_grads(&p.grads(&grads));
    let shape = w.tensor().shape().to_vec();
    let mut fw = |v: &[f64]| project(&synthesize(&lek_core::generator::LatentCode::new(Tensor::new(&shape, v.to_vec()).unwrap()).unwrap(), &h).unwrap());
    assert_small("synthesize/w", check_gradient("synthesize/w", &mut fw, w.data(), &gw, 8, 4));
    let mut ft = |v: &[f64]| project(&synthesize(&w, &with_flat(&h, v)).unwrap());
    assert_small("synthesize/θ", check_gradient("synthesize/θ", &mut ft, &h.params().flat(), &gt, 8, 5));
}

#[test]
fn alignment_loss_wrt_every_parameter_matrix() {
    let n = 4;
    let params = AlignmentParams::new(n, 6, 3);
    // move away from the zero-initialized readout so every matrix has a gradient
    let store = perturbed(params.store(), 0.3, 4);
    let params = AlignmentParams::from_store(store).unwrap();
    let face = LandmarkSet::new(vec![[0.3, 0.4], [0.7, 0.4], [0.5, 0.6], [0.5, 0.75]]).unwrap();
    let pose = face.translated(0.05, -0.02);
    let pair = AlignPair { pose: pose.clone(), face: face.clone() };
    let (_, grads) = align_loss_grad(&params, &pose, &pair).unwrap();
    let mut offset = 0;
    for (k, (name, t)) in params.store().iter().enumerate() {
        let len = t.len();
        let g = grads[k].data().to_vec();
        let base = params.store().flat();
        let mut f = |v: &[f64]| {
            let mut flat = base.clone();
            flat[offset..offset + len].copy_from_slice(v);
            let mut s = params.store().clone();
            s.set_flat(&flat).unwrap();
            let p = AlignmentParams::from_store(s).unwrap();
            align_loss(&p.align(&pose, &face).unwrap(), &pose).unwrap()
        };
        let err = check_gradient(name, &mut f, &base[offset..offset + len], &g, 6, k as u64);
        assert_small(name, err);
        offset += len;
    }
}
