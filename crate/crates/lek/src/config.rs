//! Pipeline configuration: one TOML document whose tables mirror the module
//! configs, with command-line overrides applied before deserialization.

use std::fs;
use std::path::{Path, PathBuf};

use lek_core::alignment::{AlignTrainConfig, RigConfig, WarpConfig};
use lek_core::audio2landmark::{A2lConfig, A2lTrainConfig, TwoFactorSpec};
use lek_core::generator::{PtiConfig, ToyEncoder, ToyGeneratorConfig, ToyPrior};
use lek_core::optim::OptimizerKind;
use lek_core::optimizer::OptimizeConfig;
use lek_core::stitching::StitchConfig;
use serde::{Deserialize, Serialize};

use crate::backends::BackendConfig;
use crate::error::{IoContext, LekError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// `.y4m` file or PNG directory.
    pub video: Option<PathBuf>,
    /// WAV file.
    pub audio: Option<PathBuf>,
    /// Frame rate of the audio track when it was cut for a video; must
    /// equal the video's.
    pub audio_fps: Option<f64>,
    /// Source landmarks (normalized to the source frame). Located with the
    /// heatmap backend when absent.
    pub landmarks: Option<PathBuf>,
    /// Reference video for evaluation.
    pub ground_truth: Option<PathBuf>,
    pub ground_truth_landmarks: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Side of the decoded source frames.
    pub source_size: usize,
    /// Side of the aligned face crops; equals the generator output size.
    pub crop_size: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { source_size: 64, crop_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A2lSection {
    pub model: A2lConfig,
    pub data: TwoFactorSpec,
    /// Cross-reconstruction training of the encoders.
    pub train: A2lTrainConfig,
    pub predictor: A2lTrainConfig,
    /// Predictor training through the frozen alignment network.
    pub finetune: A2lTrainConfig,
    /// Directory holding `disentangle.lekb`, `predictor.lekb` and `alignment.lekb`.
    pub checkpoints: Option<PathBuf>,
    /// Train the audio models on the synthetic corpus when no checkpoints are given.
    pub train_toy: bool,
}

impl Default for A2lSection {
    fn default() -> Self {
        let adam = |steps| A2lTrainConfig { steps, lr: 1e-3, optimizer: OptimizerKind::Adam, seed: 0 };
        Self {
            model: A2lConfig::default(),
            data: TwoFactorSpec::default(),
            train: adam(2000),
            predictor: adam(2000),
            finetune: adam(200),
            checkpoints: None,
            train_toy: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    pub train: AlignTrainConfig,
    pub rig: RigConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Every stochastic choice derives from this value.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub input: InputConfig,
    pub backends: BackendConfig,
    pub ingest: IngestConfig,
    pub a2l: A2lSection,
    pub align: AlignSection,
    pub warp: WarpConfig,
    pub generator: ToyGeneratorConfig,
    pub prior: ToyPrior,
    pub encoder: ToyEncoder,
    pub pti: PtiConfig,
    pub optimize: OptimizeConfig,
    pub stitch: StitchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("lek-run"),
            input: InputConfig::default(),
            backends: BackendConfig::default(),
            ingest: IngestConfig::default(),
            a2l: A2lSection::default(),
            align: AlignSection::default(),
            warp: WarpConfig::default(),
            generator: ToyGeneratorConfig::default(),
            prior: ToyPrior::default(),
            encoder: ToyEncoder::default(),
            pti: PtiConfig::default(),
            optimize: OptimizeConfig::default(),
            stitch: StitchConfig::default(),
        }
    }
}

/// Sets `dotted.key = value` in a TOML tree. `value` is parsed as a TOML
/// value and taken as a bare string when that fails.
pub fn set_path(root: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LekError::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| LekError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let path = format!("{prefix}{k}");
        match (v, known.get(k)) {
            (_, None) => return Err(LekError::Config(format!("unknown configuration key `{path}`"))),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => unknown_keys(g, kn, &format!("{path}."))?,
            _ => {}
        }
    }
    Ok(())
}

/// Parses `key=value` override strings.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| LekError::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl PipelineConfig {
    /// Reads `path` (if any), applies `overrides` and resolves relative
    /// input paths against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).at(p)?;
                text.parse::<toml::Table>().map_err(|e| LekError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_path(&mut table, k, v)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table.clone()).try_into().map_err(|e: toml::de::Error| LekError::Config(e.to_string()))?;
        // stage configs from the core crate tolerate unknown fields; anything
        // that does not survive a round trip was not understood
        let known: toml::Table = toml::Value::try_from(&cfg).ok().and_then(|v| v.as_table().cloned()).unwrap_or_default();
        unknown_keys(&table, &known, "")?;
        if let Some(base) = path.and_then(Path::parent) {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let i = &mut self.input;
        for p in [&mut i.video, &mut i.audio, &mut i.landmarks, &mut i.ground_truth, &mut i.ground_truth_landmarks, &mut self.a2l.checkpoints]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
        self.backends.resolve_paths(base);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copies the global seed into every stage config.
    pub fn seeded(mut self) -> Self {
        let s = self.seed;
        self.pti.seed = s;
        self.a2l.data.seed = s;
        self.a2l.train.seed = s;
        self.a2l.predictor.seed = s.wrapping_add(1);
        self.a2l.finetune.seed = s.wrapping_add(2);
        self.align.train.seed = s;
        self.align.rig.seed = s;
        self.warp.seed = s.wrapping_add(100);
        self.prior.seed = s.wrapping_add(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: lek_core::Error| LekError::Config(e.to_string());
        self.optimize.validate().map_err(cfg)?;
        self.pti.validate().map_err(cfg)?;
        self.stitch.validate().map_err(cfg)?;
        self.warp.validate().map_err(cfg)?;
        let IngestConfig { source_size, crop_size } = self.ingest;
        if !source_size.is_power_of_two() || !crop_size.is_power_of_two() {
            return Err(LekError::Config(format!("frame sizes {source_size}/{crop_size} must be powers of two")));
        }
        if self.optimize.weights.len() != self.a2l.model.points {
            return Err(LekError::Config(format!("{} landmark weights for {} points", self.optimize.weights.len(), self.a2l.model.points)));
        }
        if let Some(fps) = self.input.audio_fps {
            if !(fps > 0.0) {
                return Err(LekError::Config(format!("audio fps {fps}")));
            }
        }
        self.backends.parse()?;
        Ok(())
    }
}
