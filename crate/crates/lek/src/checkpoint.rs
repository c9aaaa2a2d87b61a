//! Model checkpoints as kind-tagged bundles.

use std::path::Path;

use lek_core::alignment::AlignmentParams;
use lek_core::audio2landmark::{A2lConfig, DisentangleModel, PredictorModel};
use lek_core::generator::{toy_arch, GeneratorHandle, ToyGeneratorConfig};
use lek_core::heatmap::LocatorExtractor;
use lek_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{LekError, Result};
use crate::persist::{load_bundle_kind, save_bundle, Bundle};

pub const GENERATOR: &str = "generator";
pub const LOCATOR: &str = "locator";
pub const DISENTANGLE: &str = "disentangle";
pub const PREDICTOR: &str = "predictor";
pub const ALIGNMENT: &str = "alignment";

fn backend(path: &Path, e: CoreError) -> LekError {
    LekError::Core(CoreError::Backend(format!("{}: {e}", path.display())))
}

/// Saves the current weights `θ` of a bundled-architecture generator.
pub fn save_generator(path: &Path, handle: &GeneratorHandle, arch: ToyGeneratorConfig) -> Result<()> {
    save_bundle(path, &Bundle::from_store(GENERATOR, json!({ "arch": arch }), handle.params()))
}

#[derive(Deserialize)]
struct GeneratorMeta {
    arch: ToyGeneratorConfig,
}

/// Loaded weights become both `θ` and `θ_orig`.
pub fn load_generator(path: &Path) -> Result<(GeneratorHandle, ToyGeneratorConfig)> {
    let b = load_bundle_kind(path, GENERATOR)?;
    let m: GeneratorMeta = b.meta_as(path)?;
    let arch = toy_arch(m.arch).map_err(|e| backend(path, e))?;
    let h = GeneratorHandle::new(arch, b.to_store()).map_err(|e| backend(path, e))?;
    Ok((h, m.arch))
}

#[derive(Serialize, Deserialize)]
struct LocatorMeta {
    input_size: usize,
    pool: usize,
    sigma: f64,
}

pub fn save_locator(path: &Path, loc: &LocatorExtractor) -> Result<()> {
    use lek_core::heatmap::HeatmapExtractor;
    let meta = LocatorMeta { input_size: loc.input_size(), pool: loc.pool(), sigma: loc.sigma };
    save_bundle(path, &Bundle::from_store(LOCATOR, serde_json::to_value(meta).expect("meta"), loc.params()))
}

pub fn load_locator(path: &Path) -> Result<LocatorExtractor> {
    let b = load_bundle_kind(path, LOCATOR)?;
    let m: LocatorMeta = b.meta_as(path)?;
    LocatorExtractor::from_params(b.to_store(), m.input_size, m.pool, m.sigma).map_err(|e| backend(path, e))
}

pub fn save_disentangle(path: &Path, m: &DisentangleModel) -> Result<()> {
    save_bundle(path, &Bundle::from_store(DISENTANGLE, json!({ "config": m.config() }), m.params()))
}

#[derive(Deserialize)]
struct A2lMeta {
    config: A2lConfig,
}

pub fn load_disentangle(path: &Path) -> Result<DisentangleModel> {
    let b = load_bundle_kind(path, DISENTANGLE)?;
    let m: A2lMeta = b.meta_as(path)?;
    DisentangleModel::with_params(m.config, &b.to_store()).map_err(|e| backend(path, e))
}

pub fn save_predictor(path: &Path, m: &PredictorModel) -> Result<()> {
    save_bundle(path, &Bundle::from_store(PREDICTOR, json!({ "config": m.config() }), m.params()))
}

pub fn load_predictor(path: &Path) -> Result<PredictorModel> {
    let b = load_bundle_kind(path, PREDICTOR)?;
    let m: A2lMeta = b.meta_as(path)?;
    PredictorModel::with_params(m.config, &b.to_store()).map_err(|e| backend(path, e))
}

pub fn save_alignment(path: &Path, p: &AlignmentParams) -> Result<()> {
    save_bundle(path, &Bundle::from_store(ALIGNMENT, json!({ "points": p.num_points(), "token_size": p.token_size() }), p.store()))
}

pub fn load_alignment(path: &Path) -> Result<AlignmentParams> {
    let b = load_bundle_kind(path, ALIGNMENT)?;
    AlignmentParams::from_store(b.to_store()).map_err(|e| backend(path, e))
}
