//! Synthetic talking clip on disk: video, matching audio and landmarks.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use lek_core::face::{procedural_clip, ClipSpec, ToyClip};

use crate::error::{IoContext, Result};
use crate::media::{write_wav, write_y4m, Waveform};
use crate::persist::save_landmarks;

pub const SAMPLE_RATE: u32 = 16_000;

/// Paths written by [`write_toy_clip`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyFiles {
    pub video: PathBuf,
    pub audio: PathBuf,
    pub landmarks: PathBuf,
}

/// A voiced buzz whose loudness and second partial follow the mouth opening.
pub fn toy_speech(clip: &ToyClip, max_open: f64) -> Waveform {
    let fps = clip.frames.fps;
    let n = (clip.params.len() as f64 / fps * SAMPLE_RATE as f64).round() as usize;
    let open: Vec<f64> = clip.params.iter().map(|p| p.mouth_open / max_open.max(1e-9)).collect();
    let mut phase = 0.0;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            // linear interpolation of the opening between frame centres
            let u = (t * fps - 0.5).clamp(0.0, (open.len() - 1) as f64);
            let k = u.floor() as usize;
            let frac = u - k as f64;
            let o = open[k] * (1.0 - frac) + open[(k + 1).min(open.len() - 1)] * frac;
            let formant = 500.0 + 1500.0 * o;
            phase += 2.0 * PI * formant / SAMPLE_RATE as f64;
            let amp = 0.05 + 0.4 * o;
            amp * (0.6 * (2.0 * PI * 140.0 * t).sin() + 0.4 * phase.sin())
        })
        .collect();
    Waveform { samples, sample_rate: SAMPLE_RATE }
}

/// Writes `clip.y4m`, `clip.wav` and `clip.landmarks.json` into `dir`.
pub fn write_toy_clip(dir: &Path, spec: &ClipSpec, seed: u64) -> Result<ToyFiles> {
    fs::create_dir_all(dir).at(dir)?;
    let clip = procedural_clip(spec, seed)?;
    let files = ToyFiles { video: dir.join("clip.y4m"), audio: dir.join("clip.wav"), landmarks: dir.join("clip.landmarks.json") };
    write_y4m(&files.video, &clip.frames)?;
    write_wav(&files.audio, &toy_speech(&clip, spec.max_open))?;
    save_landmarks(&files.landmarks, &clip.landmarks())?;
    Ok(files)
}
