//! Backend selection by name.
//!
//! Bundled names: generator `toy`, heatmap `regress`, segmentation `hull`,
//! perceptual `toy`, fid features `perceptual-stats`, encoder `toy`.
//! `checkpoint:<path>` loads saved weights for the generator or heatmap
//! locator. `external:<name>` looks for `<name>` under `LEK_BACKEND_DIR`;
//! this build carries no loader for external models, so it falls back to the
//! bundled backend of that slot with a warning.

use std::path::{Path, PathBuf};

use lek_core::generator::{EncoderBackend, ToyEncoder};
use lek_core::perceptual::{PerceptualMetric, ToyPerceptual};
use lek_core::stitching::{HullSegmenter, Segmenter};
use serde::{Deserialize, Serialize};

use crate::error::{LekError, Result};

pub const BACKEND_DIR_VAR: &str = "LEK_BACKEND_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub generator: String,
    pub heatmap: String,
    pub segmentation: String,
    pub perceptual: String,
    pub fid_features: String,
    pub encoder: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            generator: "toy".into(),
            heatmap: "regress".into(),
            segmentation: "hull".into(),
            perceptual: "toy".into(),
            fid_features: "perceptual-stats".into(),
            encoder: "toy".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Choice {
    Bundled,
    Checkpoint(PathBuf),
    External(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Generator,
    Heatmap,
    Segmentation,
    Perceptual,
    FidFeatures,
    Encoder,
}

impl Slot {
    fn bundled(self) -> &'static str {
        match self {
            Self::Generator | Self::Perceptual | Self::Encoder => "toy",
            Self::Heatmap => "regress",
            Self::Segmentation => "hull",
            Self::FidFeatures => "perceptual-stats",
        }
    }

    fn takes_checkpoint(self) -> bool {
        matches!(self, Self::Generator | Self::Heatmap)
    }

    fn label(self) -> &'static str {
        match self {
            Self::Generator => "generator",
            Self::Heatmap => "heatmap",
            Self::Segmentation => "segmentation",
            Self::Perceptual => "perceptual",
            Self::FidFeatures => "fid-features",
            Self::Encoder => "encoder",
        }
    }
}

/// Parses one backend name for `slot`.
pub fn parse_choice(slot: Slot, name: &str) -> Result<Choice> {
    if name == slot.bundled() {
        return Ok(Choice::Bundled);
    }
    if let Some(p) = name.strip_prefix("checkpoint:") {
        if !slot.takes_checkpoint() {
            return Err(LekError::Config(format!("{} backend does not load checkpoints", slot.label())));
        }
        return Ok(Choice::Checkpoint(PathBuf::from(p)));
    }
    if let Some(n) = name.strip_prefix("external:") {
        if n.is_empty() {
            return Err(LekError::Config(format!("empty external {} backend name", slot.label())));
        }
        return Ok(Choice::External(n.to_string()));
    }
    Err(LekError::Config(format!("unknown {} backend `{name}` (bundled: `{}`)", slot.label(), slot.bundled())))
}

/// Parsed selections for every slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Choices {
    pub generator: Choice,
    pub heatmap: Choice,
    pub segmentation: Choice,
    pub perceptual: Choice,
    pub fid_features: Choice,
    pub encoder: Choice,
}

impl BackendConfig {
    pub fn parse(&self) -> Result<Choices> {
        let c = Choices {
            generator: parse_choice(Slot::Generator, &self.generator)?,
            heatmap: parse_choice(Slot::Heatmap, &self.heatmap)?,
            segmentation: parse_choice(Slot::Segmentation, &self.segmentation)?,
            perceptual: parse_choice(Slot::Perceptual, &self.perceptual)?,
            fid_features: parse_choice(Slot::FidFeatures, &self.fid_features)?,
            encoder: parse_choice(Slot::Encoder, &self.encoder)?,
        };
        for ch in [&c.generator, &c.heatmap] {
            if let Choice::Checkpoint(p) = ch {
                if !p.exists() {
                    return Err(LekError::Config(format!("checkpoint {} does not exist", p.display())));
                }
            }
        }
        Ok(c)
    }

    pub(crate) fn resolve_paths(&mut self, base: &Path) {
        for name in [&mut self.generator, &mut self.heatmap] {
            if let Some(p) = name.strip_prefix("checkpoint:") {
                let p = Path::new(p);
                if p.is_relative() {
                    *name = format!("checkpoint:{}", base.join(p).display());
                }
            }
        }
    }
}

/// Where external models are discovered.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Registry {
    pub dir: Option<PathBuf>,
}

impl Registry {
    pub fn from_env() -> Self {
        Self { dir: std::env::var_os(BACKEND_DIR_VAR).map(PathBuf::from) }
    }

    /// Collapses an external choice to the bundled backend, logging why.
    /// Returns the effective choice and a note for the run manifest.
    pub fn settle(&self, slot: Slot, choice: &Choice) -> (Choice, Option<String>) {
        let Choice::External(name) = choice else {
            return (choice.clone(), None);
        };
        let found = self.dir.as_ref().map(|d| d.join(name)).filter(|p| p.exists());
        let why = match found {
            Some(p) => format!("{} found at {} but no loader is built in", name, p.display()),
            None => format!("{name} not found under ${BACKEND_DIR_VAR}"),
        };
        let note = format!("{} backend external:{}: {}; using bundled `{}`", slot.label(), name, why, slot.bundled());
        log::warn!("{note}");
        (Choice::Bundled, Some(note))
    }
}

/// Runtime backends that need no training.
pub struct Runtime {
    pub perceptual: Box<dyn PerceptualMetric>,
    pub segmenter: Box<dyn Segmenter>,
    pub encoder: Box<dyn EncoderBackend>,
    pub notes: Vec<String>,
}

impl Runtime {
    pub fn new(choices: &Choices, registry: &Registry, encoder: ToyEncoder) -> Self {
        let mut notes = Vec::new();
        for (slot, ch) in [
            (Slot::Perceptual, &choices.perceptual),
            (Slot::Segmentation, &choices.segmentation),
            (Slot::Encoder, &choices.encoder),
            (Slot::FidFeatures, &choices.fid_features),
        ] {
            notes.extend(registry.settle(slot, ch).1);
        }
        Self { perceptual: Box::new(ToyPerceptual::default()), segmenter: Box::new(HullSegmenter), encoder: Box::new(encoder), notes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_per_slot() {
        assert_eq!(parse_choice(Slot::Heatmap, "regress").unwrap(), Choice::Bundled);
        assert_eq!(parse_choice(Slot::Generator, "external:stylegan2").unwrap(), Choice::External("stylegan2".into()));
        assert!(matches!(parse_choice(Slot::Segmentation, "checkpoint:x"), Err(LekError::Config(_))));
        assert!(matches!(parse_choice(Slot::Perceptual, "lpips-vgg"), Err(LekError::Config(_))));
    }

    #[test]
    fn missing_external_falls_back() {
        let r = Registry { dir: None };
        let (c, note) = r.settle(Slot::Perceptual, &Choice::External("lpips".into()));
        assert_eq!(c, Choice::Bundled);
        assert!(note.unwrap().contains("using bundled `toy`"));
    }

    #[test]
    fn missing_checkpoint_is_config_error() {
        let b = BackendConfig { generator: "checkpoint:/nonexistent/g.lekb".into(), ..Default::default() };
        assert_eq!(b.parse().unwrap_err().exit_code(), 2);
    }
}
