#![allow(dead_code)]

pub mod grad_checks;

use lek_core::frame::Frame;
use lek_core::generator::{GeneratorHandle, LatentCode, ToyGeneratorConfig, toy_arch};
use lek_core::heatmap::LocatorExtractor;
use lek_core::params::ParamStore;
use lek_core::rng::{normal, seeded};
use lek_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Central difference of `f` along `dir` at `x`.
pub fn directional_fd(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], dir: &[f64], h: f64) -> f64 {
    let plus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + h * d).collect();
    let minus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a - h * d).collect();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Relative error between an analytic gradient and central differences,
/// checked along the coordinate axes (for small inputs) or along random unit
/// directions.
pub fn check_gradient(name: &str, f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64], probes: usize, seed: u64) -> f64 {
    assert_eq!(x.len(), grad.len(), "{name}: gradient length");
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    let dirs: Vec<Vec<f64>> = if x.len() <= probes {
        (0..x.len()).map(|i| (0..x.len()).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    } else {
        (0..probes)
            .map(|_| {
                let v: Vec<f64> = (0..x.len()).map(|_| normal(&mut rng)).collect();
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.into_iter().map(|a| a / n).collect()
            })
            .collect()
    };
    for d in &dirs {
        let analytic: f64 = grad.iter().zip(d).map(|(g, v)| g * v).sum();
        let numeric = directional_fd(f, x, d, FD_STEP);
        // directions where the function is flat carry no information
        if analytic.abs().max(numeric.abs()) < 1e-9 {
            continue;
        }
        if std::env::var("FD_DEBUG").is_ok() { eprintln!("{name}: {analytic} vs {numeric}"); }
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// A generator small enough for finite differences.
pub fn tiny_handle(seed: u64) -> GeneratorHandle {
    let arch = toy_arch(ToyGeneratorConfig { layers: 2, dim: 4, channels: 3, output_size: 8 }).unwrap();
    GeneratorHandle::from_arch(arch, seed)
}

pub fn random_latent(handle: &GeneratorHandle, scale: f64, seed: u64) -> LatentCode {
    let (l, d) = handle.latent_shape();
    let mut rng = seeded(seed);
    LatentCode::new(Tensor::from_fn(&[l, d], |_| scale * normal(&mut rng))).unwrap()
}

pub fn random_frame(size: usize, seed: u64) -> Frame {
    let mut rng = seeded(seed);
    let px = (0..3 * size * size).map(|_| 0.5 + 0.2 * normal(&mut rng).clamp(-2.0, 2.0)).collect();
    Frame::new(size, px, 0).unwrap()
}

/// A random linear locator for `size` inputs and `n` landmarks, centred on
/// the grid so its heatmaps are not empty.
pub fn random_locator(size: usize, pool: usize, n: usize, seed: u64) -> LocatorExtractor {
    let mut rng = seeded(seed);
    let f = 3 * pool * pool;
    let mut p = ParamStore::new();
    p.add("locator.w", Tensor::from_fn(&[f, 2 * n], |_| 0.05 * normal(&mut rng)));
    p.add("locator.b", Tensor::from_fn(&[2 * n], |_| 0.5 + 0.2 * normal(&mut rng)));
    LocatorExtractor::from_params(p, size, pool, 1.5).unwrap()
}

pub fn perturbed(store: &ParamStore, scale: f64, seed: u64) -> ParamStore {
    let mut rng = seeded(seed);
    let mut out = store.clone();
    let flat: Vec<f64> = store.flat().iter().map(|v| v + scale * normal(&mut rng)).collect();
    out.set_flat(&flat).unwrap();
    out
}

pub fn with_flat(handle: &GeneratorHandle, flat: &[f64]) -> GeneratorHandle {
    let mut p = handle.params().clone();
    p.set_flat(flat).unwrap();
    handle.with_params(p).unwrap()
}

pub fn flat_grads(grads: &[Tensor]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data().iter().copied()).collect()
}
