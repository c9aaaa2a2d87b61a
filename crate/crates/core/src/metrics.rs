//! Evaluation metrics: PSNR, SSIM, landmark distance, Fréchet distance and a
//! reported perceptual distance.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::frame::{Frame, FrameSequence};
use crate::landmarks::LandmarkSet;
use crate::linalg::{sqrt_psd, SquareMatrix};
use crate::perceptual::PerceptualMetric;

/// Reported when the mean squared error is below `1e-10`.
pub const PSNR_CAP: f64 = 100.0;
/// Diagonal jitter added to covariance estimates.
pub const FID_JITTER: f64 = 1e-6;

pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    a.check_same_size(b)?;
    let n = a.pixels().len() as f64;
    Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Gaussian window used by [`ssim`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimWindow {
    pub size: usize,
    pub sigma: f64,
}

impl Default for SsimWindow {
    fn default() -> Self {
        Self { size: 11, sigma: 1.5 }
    }
}

impl SsimWindow {
    /// Normalized weights, row-major `size x size`.
    pub fn weights(&self) -> Vec<f64> {
        let c = (self.size as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
        let s: f64 = w.iter().sum();
        for v in &mut w {
            *v /= s;
        }
        w
    }
}

const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Local SSIM at the window placed with top-left corner `(x0, y0)`.
pub fn ssim_at(a: &Frame, b: &Frame, c: usize, x0: usize, y0: usize, window: &SsimWindow, weights: &[f64]) -> f64 {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in 0..window.size {
        for dx in 0..window.size {
            let w = weights[dy * window.size + dx];
            let (x, y) = (a.get(c, y0 + dy, x0 + dx), b.get(c, y0 + dy, x0 + dx));
            ma += w * x;
            mb += w * y;
            aa += w * x * x;
            bb += w * y * y;
            ab += w * x * y;
        }
    }
    let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Mean local SSIM over every window position fully inside the image and
/// over the three channels.
pub fn ssim(a: &Frame, b: &Frame, window: &SsimWindow) -> Result<f64> {
    a.check_same_size(b)?;
    let s = a.size();
    if window.size == 0 || window.size > s {
        return Err(Error::Config(format!("ssim window {} for image side {s}", window.size)));
    }
    let weights = window.weights();
    let span = s - window.size + 1;
    let mut total = 0.0;
    for c in 0..3 {
        for y0 in 0..span {
            for x0 in 0..span {
                total += ssim_at(a, b, c, x0, y0, window, &weights);
            }
        }
    }
    Ok(total / (3 * span * span) as f64)
}

/// Mean over frames of the mean per-point Euclidean distance.
pub fn f_ld(pred: &[LandmarkSet], gt: &[LandmarkSet]) -> Result<f64> {
    if pred.len() != gt.len() {
        return shape_err(format!("{} predicted vs {} reference frames", pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("landmark sequences".into()));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        p.check_same_len(g)?;
        let n = p.len().max(1) as f64;
        total += p.points().iter().zip(g.points()).map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).sum::<f64>() / n;
    }
    Ok(total / pred.len() as f64)
}

/// Fixed-width image embedding for Fréchet distances.
pub trait FeatureBackend: Send + Sync {
    fn name(&self) -> &str;
    fn features(&self, frame: &Frame) -> Result<Vec<f64>>;
}

/// Channel means and standard deviations of every layer of a perceptual
/// network.
pub struct PerceptualFeatures<'a> {
    pub metric: &'a dyn PerceptualMetric,
}

impl FeatureBackend for PerceptualFeatures<'_> {
    fn name(&self) -> &str {
        "perceptual-stats"
    }

    fn features(&self, frame: &Frame) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for layer in self.metric.features(frame) {
            let ch = layer.shape()[0];
            let per = layer.len() / ch;
            for chunk in layer.data().chunks(per) {
                let m = chunk.iter().sum::<f64>() / per as f64;
                let v = chunk.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / per as f64;
                out.push(m);
                out.push(v.sqrt());
            }
        }
        Ok(out)
    }
}

/// Mean and unbiased covariance of feature rows, with [`FID_JITTER`] on the
/// diagonal.
pub fn gaussian_fit(rows: &[Vec<f64>]) -> Result<(Vec<f64>, SquareMatrix)> {
    if rows.len() < 2 {
        return Err(Error::EmptyInput(format!("Fréchet distance needs at least 2 samples, got {}", rows.len())));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return shape_err("feature rows differ in width");
    }
    let n = rows.len() as f64;
    let mut mu = alloc::vec![0.0; d];
    for r in rows {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut cov = SquareMatrix::zeros(d);
    for r in rows {
        for i in 0..d {
            let di = r[i] - mu[i];
            for j in 0..d {
                cov.data[i * d + j] += di * (r[j] - mu[j]) / (n - 1.0);
            }
        }
    }
    for i in 0..d {
        cov.data[i * d + i] += FID_JITTER;
    }
    Ok((mu, cov.symmetrized()))
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, with the root taken
/// as `(S_a^{1/2} S_b S_a^{1/2})^{1/2}`.
pub fn frechet_distance(mu_a: &[f64], cov_a: &SquareMatrix, mu_b: &[f64], cov_b: &SquareMatrix) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.n != d || cov_b.n != d {
        return shape_err("Gaussian fits differ in dimension");
    }
    let mean: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let ra = sqrt_psd(cov_a);
    let inner = ra.matmul(cov_b).matmul(&ra).symmetrized();
    let cross = sqrt_psd(&inner).trace();
    // rounding can take identical fits a hair below zero
    Ok((mean + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between feature sets given as rows.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = gaussian_fit(a)?;
    let (mb, cb) = gaussian_fit(b)?;
    frechet_distance(&ma, &ca, &mb, &cb)
}

pub fn fid(a: &FrameSequence, b: &FrameSequence, backend: &dyn FeatureBackend) -> Result<f64> {
    let fa = a.frames().iter().map(|f| backend.features(f)).collect::<Result<Vec<_>>>()?;
    let fb = b.frames().iter().map(|f| backend.features(f)).collect::<Result<Vec<_>>>()?;
    fid_from_features(&fa, &fb)
}

/// Perceptual distance as reported in evaluations.
pub fn lpips_metric(a: &Frame, b: &Frame, metric: &dyn PerceptualMetric) -> Result<f64> {
    metric.distance(a, b)
}

/// Aggregate scores with per-frame series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub fid: Option<f64>,
    pub f_ld: Option<f64>,
    pub per_frame: PerFrame,
    pub metadata: EvalMetadata,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerFrame {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub lpips: Vec<f64>,
    pub f_ld: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub frames: usize,
    pub perceptual_backend: String,
    pub feature_backend: String,
}

/// Scores `pred` against `gt`. FID is skipped for fewer than two frames and
/// F-LD when landmarks are not supplied.
pub fn evaluate(
    pred: &FrameSequence,
    gt: &FrameSequence,
    landmarks: Option<(&[LandmarkSet], &[LandmarkSet])>,
    perceptual: &dyn PerceptualMetric,
    features: &dyn FeatureBackend,
) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return shape_err(format!("{} predicted vs {} reference frames", pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("evaluation frames".into()));
    }
    let window = SsimWindow::default();
    let mut per = PerFrame::default();
    for (p, g) in pred.frames().iter().zip(gt.frames()) {
        per.psnr.push(psnr(p, g)?);
        per.ssim.push(ssim(p, g, &window)?);
        per.lpips.push(lpips_metric(p, g, perceptual)?);
    }
    let f_ld_value = match landmarks {
        Some((lp, lg)) => {
            for (a, b) in lp.iter().zip(lg) {
                per.f_ld.push(f_ld(core::slice::from_ref(a), core::slice::from_ref(b))?);
            }
            Some(f_ld(lp, lg)?)
        }
        None => None,
    };
    let fid_value = if pred.len() >= 2 { Some(fid(pred, gt, features)?) } else { None };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalReport {
        psnr: mean(&per.psnr),
        ssim: mean(&per.ssim),
        lpips: mean(&per.lpips),
        fid: fid_value,
        f_ld: f_ld_value,
        metadata: EvalMetadata { frames: pred.len(), perceptual_backend: perceptual.name().into(), feature_backend: features.name().into() },
        per_frame: per,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_form() {
        let a = Frame::filled(8, [0.5; 3], 0).unwrap();
        let b = Frame::filled(8, [0.6; 3], 0).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn f_ld_three_four_five() {
        let a = LandmarkSet::new(alloc::vec![[0.1, 0.1], [0.2, 0.5]]).unwrap();
        let b = a.translated(0.3, 0.4);
        assert!((f_ld(&[a.clone()], &[b]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(f_ld(&[a.clone()], &[a]).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_gaussians_closed_form() {
        let mut ca = SquareMatrix::zeros(2);
        let mut cb = SquareMatrix::zeros(2);
        ca.set(0, 0, 4.0);
        ca.set(1, 1, 1.0);
        cb.set(0, 0, 1.0);
        cb.set(1, 1, 9.0);
        let d = frechet_distance(&[0.0, 1.0], &ca, &[2.0, 1.0], &cb).unwrap();
        // 4 + (2-1)^2 + (1-3)^2
        assert!((d - 9.0).abs() < 1e-9);
    }
}
