//! Audio-to-landmark models: toy training and per-clip prediction.

use std::path::Path;

use lek_core::alignment::{rigid_pose_pairs, train_alignment, AlignmentParams, TOKEN_SIZE};
use lek_core::audio2landmark::{
    apply_displacements, finetune_predictor, predictor_samples, train_disentangle, train_predictor, two_factor_dataset, AudioFeatureWindow,
    DisentangleModel, PredictorModel,
};
use lek_core::landmarks::canonical_face;
use lek_core::{Error as CoreError, LandmarkSet, Tensor};

use crate::checkpoint;
use crate::config::PipelineConfig;
use crate::error::Result;
use crate::persist::write_curve;

pub const DISENTANGLE_FILE: &str = "disentangle.lekb";
pub const PREDICTOR_FILE: &str = "predictor.lekb";
pub const ALIGNMENT_FILE: &str = "alignment.lekb";

#[derive(Clone, Debug)]
pub struct AudioModels {
    pub disentangle: DisentangleModel,
    pub predictor: PredictorModel,
    pub alignment: AlignmentParams,
}

/// Per-step losses of [`train_audio_models`].
#[derive(Clone, Debug, Default)]
pub struct TrainingLogs {
    pub cross: Vec<f64>,
    pub predictor: Vec<f64>,
    pub alignment: Vec<f64>,
    pub finetune: Vec<f64>,
}

/// Trains the encoders on the two-factor corpus, the predictor on their
/// embeddings, the alignment network on the rigid-pose rig and finally the
/// predictor through the frozen alignment network.
pub fn train_audio_models(cfg: &PipelineConfig) -> Result<(AudioModels, TrainingLogs)> {
    let a = &cfg.a2l;
    let data = two_factor_dataset(&a.data)?;
    let (dis, cross) = train_disentangle(&DisentangleModel::new(a.model, cfg.seed), &data, &a.train)?;
    let samples = predictor_samples(&dis, &data)?;
    let (pred, plog) = train_predictor(&PredictorModel::new(a.model, cfg.seed.wrapping_add(1)), &samples, &a.predictor)?;
    let pairs = rigid_pose_pairs(&cfg.align.rig);
    let an0 = AlignmentParams::new(a.model.points, TOKEN_SIZE, cfg.seed);
    let (an, alog) = train_alignment(&an0, &pairs, &cfg.warp, &cfg.align.train)?;
    let (pred, flog) = if a.finetune.steps > 0 {
        finetune_predictor(&pred, &an, &canonical_face(0.0), &samples, &cfg.warp, &a.finetune)?
    } else {
        (pred, Vec::new())
    };
    let logs = TrainingLogs { cross: cross.iter().map(|l| l.total).collect(), predictor: plog, alignment: alog, finetune: flog };
    Ok((AudioModels { disentangle: dis, predictor: pred, alignment: an }, logs))
}

/// Writes the three checkpoints and their training curves into `dir`.
pub fn save_audio_models(dir: &Path, m: &AudioModels, logs: &TrainingLogs) -> Result<Vec<String>> {
    checkpoint::save_disentangle(&dir.join(DISENTANGLE_FILE), &m.disentangle)?;
    checkpoint::save_predictor(&dir.join(PREDICTOR_FILE), &m.predictor)?;
    checkpoint::save_alignment(&dir.join(ALIGNMENT_FILE), &m.alignment)?;
    let curves = [("cross_loss.csv", "loss", &logs.cross), ("predictor_loss.csv", "loss", &logs.predictor), ("alignment_loss.csv", "loss", &logs.alignment), ("finetune_loss.csv", "loss", &logs.finetune)];
    for (file, col, v) in curves {
        write_curve(&dir.join(file), col, v)?;
    }
    let mut files = vec![DISENTANGLE_FILE.to_string(), PREDICTOR_FILE.to_string(), ALIGNMENT_FILE.to_string()];
    files.extend(curves.iter().map(|c| c.0.to_string()));
    Ok(files)
}

pub fn load_audio_models(dir: &Path) -> Result<AudioModels> {
    Ok(AudioModels {
        disentangle: checkpoint::load_disentangle(&dir.join(DISENTANGLE_FILE))?,
        predictor: checkpoint::load_predictor(&dir.join(PREDICTOR_FILE))?,
        alignment: checkpoint::load_alignment(&dir.join(ALIGNMENT_FILE))?,
    })
}

/// Standardizes each feature column over the whole clip. Constant columns
/// become zero, so silence maps to an all-zero input.
pub fn normalize_features(windows: &[AudioFeatureWindow]) -> Result<Vec<AudioFeatureWindow>> {
    let first = windows.first().ok_or_else(|| CoreError::EmptyInput("audio windows".into()))?;
    let (t, f) = (first.steps(), first.dim());
    let rows = (windows.len() * t) as f64;
    let mut mean = vec![0.0; f];
    for w in windows {
        if w.steps() != t || w.dim() != f {
            return Err(CoreError::Shape("audio windows differ in shape".into()).into());
        }
        for (i, v) in w.features().data().iter().enumerate() {
            mean[i % f] += v / rows;
        }
    }
    let mut var = vec![0.0; f];
    for w in windows {
        for (i, v) in w.features().data().iter().enumerate() {
            var[i % f] += (v - mean[i % f]).powi(2) / rows;
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    windows
        .iter()
        .map(|w| {
            let data = w.features().data().iter().enumerate().map(|(i, v)| if sd[i % f] > 1e-9 { (v - mean[i % f]) / sd[i % f] } else { 0.0 }).collect();
            Ok(AudioFeatureWindow::new(Tensor::new(&[t, f], data)?, w.frame_index)?)
        })
        .collect()
}

/// Predicted face landmarks carried onto the head pose of `pose` (one set
/// per frame, crop-normalized).
pub fn predict_landmarks(models: &AudioModels, windows: &[AudioFeatureWindow], pose: &[LandmarkSet]) -> Result<Vec<LandmarkSet>> {
    if windows.len() != pose.len() {
        return Err(CoreError::Shape(format!("{} audio windows for {} frames", windows.len(), pose.len())).into());
    }
    let x = normalize_features(windows)?;
    let contents = models.disentangle.encode_content(&x)?;
    let emotion = models.disentangle.encode_emotion(&x)?;
    let disp = models.predictor.predict_displacements(&contents, &emotion)?;
    let faces = apply_displacements(&canonical_face(0.0), &disp)?;
    faces.iter().zip(pose).map(|(f, p)| Ok(models.alignment.align(p, f)?)).collect()
}
