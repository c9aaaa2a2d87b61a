//! Per-frame mel-cepstral audio features.

use std::f64::consts::PI;
use std::sync::Arc;

use lek_core::audio2landmark::{AudioFeatureWindow, FEATURE_STEPS};
use lek_core::{Error as CoreError, Tensor};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{LekError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MfccConfig {
    /// Sub-steps per video frame.
    pub steps: usize,
    pub coefficients: usize,
    pub filters: usize,
    /// Analysis window length in seconds.
    pub window: f64,
    pub energy_floor: f64,
    /// Log-mel values more than this many dB below the loudest band are
    /// clamped, so leakage far from any partial does not jitter the cepstrum.
    pub dynamic_range_db: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self { steps: FEATURE_STEPS, coefficients: 13, filters: 26, window: 0.025, energy_floor: 1e-10, dynamic_range_db: 80.0 }
    }
}

impl MfccConfig {
    /// Width of one feature row: cepstra plus log-energy.
    pub fn dim(&self) -> usize {
        self.coefficients + 1
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// MFCC analyser for one sample rate.
pub struct Mfcc {
    cfg: MfccConfig,
    sample_rate: f64,
    win: usize,
    nfft: usize,
    /// Blackman-Harris taper; its -92 dB sidelobes keep leakage under the clamp.
    taper: Vec<f64>,
    /// `filters x (nfft/2 + 1)` triangular weights.
    bank: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl Mfcc {
    pub fn new(cfg: MfccConfig, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 || cfg.steps == 0 || cfg.filters < cfg.coefficients || cfg.coefficients == 0 {
            return Err(LekError::Config(format!("unusable audio front end {cfg:?} at {sample_rate} Hz")));
        }
        let sr = sample_rate as f64;
        let win = ((cfg.window * sr).round() as usize).max(2);
        let nfft = win.next_power_of_two();
        let taper = (0..win)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / (win - 1) as f64;
                0.35875 - 0.48829 * t.cos() + 0.14128 * (2.0 * t).cos() - 0.01168 * (3.0 * t).cos()
            })
            .collect();
        let bins = nfft / 2 + 1;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(sr / 2.0));
        let edges: Vec<f64> = (0..cfg.filters + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.filters + 1) as f64)).collect();
        let bank = (0..cfg.filters)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * sr / nfft as f64;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(nfft);
        Ok(Self { cfg, sample_rate: sr, win, nfft, taper, bank, fft })
    }

    /// Feature row of the window starting at `start` (zero-padded past the end).
    fn row(&self, samples: &[f64], start: usize) -> Vec<f64> {
        let seg = |i: usize| samples.get(start + i).copied().unwrap_or(0.0);
        let energy: f64 = (0..self.win).map(|i| seg(i) * seg(i)).sum();
        let mut buf: Vec<Complex<f64>> = (0..self.nfft).map(|i| Complex::new(if i < self.win { seg(i) * self.taper[i] } else { 0.0 }, 0.0)).collect();
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..self.nfft / 2 + 1].iter().map(|c| c.norm_sqr() / self.nfft as f64).collect();
        let mut logmel: Vec<f64> = self.bank.iter().map(|w| w.iter().zip(&power).map(|(a, p)| a * p).sum::<f64>().max(self.cfg.energy_floor).ln()).collect();
        let low = logmel.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - self.cfg.dynamic_range_db * 10f64.ln() / 10.0;
        for v in &mut logmel {
            *v = v.max(low);
        }
        let m = logmel.len() as f64;
        let mut out: Vec<f64> = (0..self.cfg.coefficients)
            .map(|k| {
                let norm = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
                norm * logmel.iter().enumerate().map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / m).cos()).sum::<f64>()
            })
            .collect();
        out.push(energy.max(self.cfg.energy_floor).ln());
        out
    }

    /// One `steps x dim` window per whole video frame covered by `samples`.
    ///
    /// Sub-step `j` of frame `i` is centered at `(i + (j + 0.5) / steps) / fps`
    /// seconds; windows that would cross the clip edges are shifted inside.
    pub fn windows(&self, samples: &[f64], fps: f64) -> Result<Vec<AudioFeatureWindow>> {
        if !(fps > 0.0) {
            return Err(LekError::Config(format!("fps must be positive, got {fps}")));
        }
        let frames = (samples.len() as f64 * fps / self.sample_rate + 1e-9).floor() as usize;
        if frames == 0 {
            return Err(CoreError::EmptyInput(format!("{} samples is shorter than one frame at {fps} fps", samples.len())).into());
        }
        let max_start = samples.len().saturating_sub(self.win);
        let t = self.cfg.steps;
        let mut out = Vec::with_capacity(frames);
        for i in 0..frames {
            let mut data = Vec::with_capacity(t * self.cfg.dim());
            for j in 0..t {
                let centre = (i as f64 + (j as f64 + 0.5) / t as f64) / fps * self.sample_rate;
                let start = (centre - self.win as f64 / 2.0).round().clamp(0.0, max_start as f64) as usize;
                data.extend(self.row(samples, start));
            }
            out.push(AudioFeatureWindow::new(Tensor::new(&[t, self.cfg.dim()], data)?, i)?);
        }
        Ok(out)
    }
}

/// Windows with the default front end: 13 cepstra plus log-energy, four
/// sub-steps per frame.
pub fn extract_audio_features(waveform: &[f64], sample_rate: u32, fps: f64) -> Result<Vec<AudioFeatureWindow>> {
    if waveform.is_empty() {
        return Err(CoreError::EmptyInput("empty waveform".into()).into());
    }
    Mfcc::new(MfccConfig::default(), sample_rate)?.windows(waveform, fps)
}
