//! Stage runner.
//!
//! Stages run in a fixed order and persist everything they produce under the
//! run directory. Each stage has a key: the SHA-256 of its configuration and
//! of the artifacts it reads. A stage whose key matches the previous
//! manifest and whose artifacts are intact is skipped, so an interrupted run
//! resumes after its last completed stage.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lek_core::generator::{invert, pivotal_tune, toy_arch, GeneratorHandle};
use lek_core::heatmap::{HeatmapExtractor, LocatorExtractor, LocatorFit};
use lek_core::metrics::{evaluate, EvalReport, PerceptualFeatures};
use lek_core::optimizer::{optimize_sequence, Backends, LatentTrajectory, SmoothVariant};
use lek_core::stitching::{composite, segment_face, stitch_tune, RegionMask};
use lek_core::{crop_align_face, Error as CoreError, Frame, FrameSequence, LandmarkSet};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::backends::{Choice, Choices, Registry, Runtime, Slot};
use crate::checkpoint::{load_generator, load_locator, save_generator, save_locator};
use crate::config::PipelineConfig;
use crate::error::{IoContext, LekError, Result};
use crate::features::extract_audio_features;
use crate::media::{extract_frames, read_wav, write_y4m, VideoSource};
use crate::persist::{
    load_features, load_frames, load_landmarks, load_mask, load_trajectory, save_features, save_frames, save_landmarks, save_mask, save_trajectory,
    sha256_file, write_atomic, write_curve, write_loss_log,
};
use crate::speech::{load_audio_models, predict_landmarks, save_audio_models, train_audio_models, ALIGNMENT_FILE, DISENTANGLE_FILE, PREDICTOR_FILE};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lek.lock";

/// Stage order of an editing run.
pub const STAGES: [&str; 10] = ["heatmap", "ingest", "audio2landmark", "generator", "invert", "pti", "optimize", "stitch", "composite", "evaluate"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub seconds: f64,
    /// Taken from a previous run instead of recomputed.
    pub reused: bool,
    pub artifacts: BTreeMap<String, Artifact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    /// Configuration with `output_dir` blanked, so runs in different
    /// directories compare equal.
    pub config: Value,
    pub backend_notes: Vec<String>,
    pub stages: Vec<StageRecord>,
    pub completed: bool,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST);
        let text = fs::read_to_string(&p).at(&p)?;
        serde_json::from_str(&text).map_err(|e| LekError::format(&p, e.to_string()))
    }

    /// Copy with timings zeroed and reuse flags cleared.
    pub fn without_timings(&self) -> Self {
        let mut m = self.clone();
        for s in &mut m.stages {
            s.seconds = 0.0;
            s.reused = false;
        }
        m
    }
}

/// Exclusive ownership of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(LekError::Locked(dir.to_path_buf())),
            Err(e) => Err(LekError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// SHA-256 of a file, or of a directory's sorted file names and contents.
pub fn hash_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return sha256_file(path);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path).at(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
    entries.sort();
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        h.update(fs::read(&e).at(&e)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// A named checkpoint that cannot be loaded is a backend failure.
fn as_backend(e: LekError) -> LekError {
    match e {
        LekError::Core(CoreError::Backend(_)) => e,
        other => CoreError::Backend(other.to_string()).into(),
    }
}

fn digest(v: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json")))
}

/// Source-frame normalized coordinates of crop-normalized landmarks.
pub fn crop_to_source(crop: &Frame, landmarks: &LandmarkSet, source_size: usize) -> Result<LandmarkSet> {
    let (cs, ss) = (crop.size() as f64, source_size as f64);
    let pts = landmarks
        .points()
        .iter()
        .map(|p| {
            let q = crop.crop_transform.apply([p[0] * cs, p[1] * cs]);
            [q[0] / ss, q[1] / ss]
        })
        .collect();
    Ok(LandmarkSet::new(pts)?)
}

/// Landmarks located by `loc` on each frame, resized to its input size first.
pub fn locate_all(loc: &LocatorExtractor, frames: &[Frame]) -> Result<Vec<LandmarkSet>> {
    frames
        .iter()
        .map(|f| {
            let f = if f.size() == loc.input_size() { f.clone() } else { f.resized(loc.input_size())? };
            Ok(loc.locate(&f)?)
        })
        .collect()
}

/// One smoothness setting of the ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub lambda_smooth: f64,
    pub smooth_variant: SmoothVariant,
    pub mean_latent_distance: f64,
    pub frame_difference_energy: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<AblationVariant>,
}

pub struct Pipeline {
    dir: PathBuf,
    cfg: PipelineConfig,
    choices: Choices,
    runtime: Runtime,
    manifest: RunManifest,
    previous: Option<RunManifest>,
    _lock: RunLock,
}

impl Pipeline {
    /// Validates `cfg`, locks its output directory and reads any previous
    /// manifest there.
    pub fn open(cfg: PipelineConfig, registry: &Registry) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.seeded();
        let parsed = cfg.backends.parse()?;
        let mut notes = Vec::new();
        let mut settle = |slot, ch: &Choice| {
            let (c, n) = registry.settle(slot, ch);
            notes.extend(n);
            c
        };
        let choices = Choices {
            generator: settle(Slot::Generator, &parsed.generator),
            heatmap: settle(Slot::Heatmap, &parsed.heatmap),
            ..parsed.clone()
        };
        let runtime = Runtime::new(&parsed, registry, cfg.encoder);
        notes.extend(runtime.notes.iter().cloned());
        let dir = cfg.output_dir.clone();
        let lock = RunLock::acquire(&dir)?;
        let previous = if dir.join(MANIFEST).exists() {
            match RunManifest::load(&dir) {
                Ok(m) => Some(m),
                Err(e) => {
                    log::warn!("ignoring unreadable manifest: {e}");
                    None
                }
            }
        } else {
            None
        };
        let mut snapshot = cfg.clone();
        snapshot.output_dir = PathBuf::new();
        let manifest = RunManifest {
            version: VERSION.to_string(),
            seed: cfg.seed,
            config: serde_json::to_value(&snapshot).expect("config serializes"),
            backend_notes: notes,
            stages: Vec::new(),
            completed: false,
            failed_stage: None,
            error: None,
        };
        Ok(Self { dir, cfg, choices, runtime, manifest, previous, _lock: lock })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.path(MANIFEST), text.as_bytes())
    }

    /// Hash of artifact `name` produced by the earlier stage `stage`.
    fn input(&self, stage: &str, name: &str) -> Result<String> {
        self.manifest
            .stage(stage)
            .and_then(|s| s.artifacts.get(name))
            .map(|a| a.sha256.clone())
            .ok_or_else(|| LekError::Config(format!("stage `{stage}` has not produced `{name}`")))
    }

    fn reusable(&self, name: &str, key: &str) -> Option<StageRecord> {
        let prev = self.previous.as_ref()?.stage(name)?;
        if prev.key != key {
            return None;
        }
        for a in prev.artifacts.values() {
            match sha256_file(&self.path(&a.path)) {
                Ok(h) if h == a.sha256 => {}
                _ => return None,
            }
        }
        Some(StageRecord { reused: true, seconds: 0.0, ..prev.clone() })
    }

    /// Runs `compute` unless a matching completed record exists. `compute`
    /// returns the relative paths of the files it wrote.
    fn stage<F>(&mut self, name: &str, inputs: Value, compute: F) -> Result<()>
    where
        F: FnOnce(&mut Self) -> Result<Vec<String>>,
    {
        let key = digest(&json!({ "stage": name, "version": VERSION, "inputs": inputs }));
        if let Some(rec) = self.reusable(name, &key) {
            log::info!("stage {name}: reusing {} artifacts", rec.artifacts.len());
            self.manifest.stages.push(rec);
            return self.write_manifest();
        }
        log::info!("stage {name}: running");
        let t0 = Instant::now();
        let result = compute(self).and_then(|files| {
            let mut artifacts = BTreeMap::new();
            for f in files {
                let sha256 = sha256_file(&self.path(&f))?;
                artifacts.insert(f.clone(), Artifact { path: f, sha256 });
            }
            Ok(artifacts)
        });
        match result {
            Ok(artifacts) => {
                let seconds = t0.elapsed().as_secs_f64();
                log::info!("stage {name}: {seconds:.1} s");
                self.manifest.stages.push(StageRecord { name: name.to_string(), key, seconds, reused: false, artifacts });
                self.write_manifest()
            }
            Err(e) => {
                self.manifest.failed_stage = Some(name.to_string());
                self.manifest.error = Some(e.to_string());
                self.write_manifest()?;
                Err(LekError::Stage { stage: name.to_string(), source: Box::new(e) })
            }
        }
    }

    fn locator(&self) -> Result<LocatorExtractor> {
        load_locator(&self.path("locator.lekb"))
    }

    fn generator(&self, file: &str) -> Result<GeneratorHandle> {
        Ok(load_generator(&self.path(file))?.0)
    }

    /// Runs every stage in order, stopping after `stop_after` when given.
    pub fn run(&mut self, stop_after: Option<&str>) -> Result<&RunManifest> {
        if let Some(s) = stop_after {
            if !STAGES.contains(&s) {
                return Err(LekError::Config(format!("unknown stage `{s}`; stages are {STAGES:?}")));
            }
        }
        for name in STAGES {
            if let Err(e) = self.run_stage(name) {
                if matches!(e, LekError::Stage { .. }) {
                    return Err(e);
                }
                // failed while gathering the stage's inputs
                self.manifest.failed_stage = Some(name.to_string());
                self.manifest.error = Some(e.to_string());
                self.write_manifest()?;
                return Err(LekError::Stage { stage: name.to_string(), source: Box::new(e) });
            }
            if stop_after == Some(name) {
                self.write_manifest()?;
                return Ok(&self.manifest);
            }
        }
        self.manifest.completed = true;
        self.write_manifest()?;
        Ok(&self.manifest)
    }

    /// Runs the stages up to and including `last`.
    pub fn run_until(&mut self, last: &str) -> Result<&RunManifest> {
        self.run(Some(last))
    }

    fn run_stage(&mut self, name: &str) -> Result<()> {
        match name {
            "heatmap" => self.heatmap_stage(),
            "ingest" => self.ingest_stage(),
            "audio2landmark" => self.a2l_stage(),
            "generator" => self.generator_stage(),
            "invert" => self.invert_stage(),
            "pti" => self.pti_stage(),
            "optimize" => self.optimize_stage(),
            "stitch" => self.stitch_stage(),
            "composite" => self.composite_stage(),
            "evaluate" => self.evaluate_stage(),
            other => Err(LekError::Config(format!("unknown stage `{other}`"))),
        }
    }

    fn choice_input(ch: &Choice) -> Result<Value> {
        Ok(match ch {
            Choice::Bundled => json!("bundled"),
            Choice::Checkpoint(p) => json!({ "checkpoint": sha256_file(p)? }),
            Choice::External(n) => json!({ "external": n }),
        })
    }

    fn heatmap_stage(&mut self) -> Result<()> {
        let inputs = json!({ "choice": Self::choice_input(&self.choices.heatmap)?, "size": self.cfg.ingest.crop_size });
        self.stage("heatmap", inputs, |p| {
            let loc = match &p.choices.heatmap {
                Choice::Checkpoint(path) => load_locator(path).map_err(as_backend)?,
                _ => LocatorExtractor::fit_procedural(&LocatorFit { input_size: p.cfg.ingest.crop_size, ..Default::default() })?,
            };
            if loc.num_landmarks() != p.cfg.a2l.model.points {
                return Err(CoreError::Backend(format!("locator emits {} landmarks, expected {}", loc.num_landmarks(), p.cfg.a2l.model.points)).into());
            }
            save_locator(&p.path("locator.lekb"), &loc)?;
            Ok(vec!["locator.lekb".into()])
        })
    }

    fn ingest_stage(&mut self) -> Result<()> {
        let inp = &self.cfg.input;
        let video = inp.video.clone().ok_or_else(|| LekError::Config("input.video is required".into()))?;
        let audio = inp.audio.clone().ok_or_else(|| LekError::Config("input.audio is required".into()))?;
        let landmarks = inp.landmarks.clone();
        let hash = |p: &Option<PathBuf>| -> Result<Value> { Ok(p.as_ref().map(|p| hash_path(p)).transpose()?.map_or(Value::Null, Value::String)) };
        let inputs = json!({
            "video": hash_path(&video)?,
            "audio": sha256_file(&audio)?,
            "landmarks": hash(&landmarks)?,
            "audio_fps": inp.audio_fps,
            "ingest": self.cfg.ingest,
            "locator": self.input("heatmap", "locator.lekb")?,
        });
        self.stage("ingest", inputs, move |p| {
            let ic = p.cfg.ingest;
            let source = extract_frames(&VideoSource::open(&video)?, ic.source_size)?;
            let src_lm = match &landmarks {
                Some(path) => load_landmarks(path)?,
                None => locate_all(&p.locator()?, source.frames())?,
            };
            if src_lm.len() != source.len() {
                return Err(LekError::Config(format!("{} landmark sets for {} frames", src_lm.len(), source.len())));
            }
            let mut crops = Vec::with_capacity(source.len());
            let mut crop_lm = Vec::with_capacity(source.len());
            for (f, l) in source.frames().iter().zip(&src_lm) {
                let c = crop_align_face(f, l, ic.crop_size)?;
                crop_lm.push(c.landmarks_to_crop(l, ic.source_size)?);
                crops.push(c);
            }
            let crops = FrameSequence::new(crops, source.fps)?;
            if let Some(fps) = p.cfg.input.audio_fps {
                if (fps - source.fps).abs() > 1e-9 {
                    return Err(LekError::Config(format!("audio fps {fps} differs from video fps {}", source.fps)));
                }
            }
            let wave = read_wav(&audio)?;
            let mut windows = extract_audio_features(&wave.samples, wave.sample_rate, source.fps)?;
            if windows.len() < source.len() {
                return Err(LekError::Config(format!("audio covers {} frames, video has {}", windows.len(), source.len())));
            }
            windows.truncate(source.len());
            save_frames(&p.path("source.lekb"), &source)?;
            save_frames(&p.path("crops.lekb"), &crops)?;
            save_landmarks(&p.path("source_landmarks.json"), &src_lm)?;
            save_landmarks(&p.path("crop_landmarks.json"), &crop_lm)?;
            save_features(&p.path("features.lekb"), &windows)?;
            Ok(["source.lekb", "crops.lekb", "source_landmarks.json", "crop_landmarks.json", "features.lekb"].map(String::from).to_vec())
        })
    }

    fn a2l_stage(&mut self) -> Result<()> {
        let ckpt = self.cfg.a2l.checkpoints.clone();
        let ckpt_hashes = match &ckpt {
            Some(d) => {
                let mut v = Vec::new();
                for f in [DISENTANGLE_FILE, PREDICTOR_FILE, ALIGNMENT_FILE] {
                    let p = d.join(f);
                    if !p.exists() {
                        return Err(LekError::Config(format!("missing checkpoint {}", p.display())));
                    }
                    v.push(sha256_file(&p)?);
                }
                json!(v)
            }
            None if self.cfg.a2l.train_toy => Value::Null,
            None => return Err(LekError::Config("no audio-to-landmark checkpoints; set a2l.checkpoints or pass --train-toy".into())),
        };
        let inputs = json!({
            "features": self.input("ingest", "features.lekb")?,
            "pose": self.input("ingest", "crop_landmarks.json")?,
            "a2l": { "model": self.cfg.a2l.model, "data": self.cfg.a2l.data, "train": self.cfg.a2l.train,
                     "predictor": self.cfg.a2l.predictor, "finetune": self.cfg.a2l.finetune },
            "align": self.cfg.align,
            "warp": self.cfg.warp,
            "seed": self.cfg.seed,
            "checkpoints": ckpt_hashes,
        });
        self.stage("audio2landmark", inputs, move |p| {
            let mut files = Vec::new();
            let models = match &ckpt {
                Some(d) => load_audio_models(d)?,
                None => {
                    let (m, logs) = train_audio_models(&p.cfg)?;
                    let dir = p.path("a2l");
                    fs::create_dir_all(&dir).at(&dir)?;
                    files.extend(save_audio_models(&dir, &m, &logs)?.into_iter().map(|f| format!("a2l/{f}")));
                    m
                }
            };
            let windows = load_features(&p.path("features.lekb"))?;
            let pose = load_landmarks(&p.path("crop_landmarks.json"))?;
            let predicted = predict_landmarks(&models, &windows, &pose)?;
            save_landmarks(&p.path("landmarks.json"), &predicted)?;
            files.push("landmarks.json".into());
            Ok(files)
        })
    }

    fn generator_stage(&mut self) -> Result<()> {
        let inputs = json!({
            "choice": Self::choice_input(&self.choices.generator)?,
            "arch": self.cfg.generator,
            "prior": self.cfg.prior,
            "seed": self.cfg.seed,
        });
        self.stage("generator", inputs, |p| {
            let mut files = vec!["generator.lekb".to_string()];
            let (h, arch) = match &p.choices.generator {
                Choice::Checkpoint(path) => load_generator(path).map_err(as_backend)?,
                _ => {
                    let h0 = GeneratorHandle::from_arch(toy_arch(p.cfg.generator)?, p.cfg.seed);
                    let (h, log) = p.cfg.prior.train(&h0)?;
                    write_curve(&p.path("prior_loss.csv"), "loss", &log)?;
                    files.push("prior_loss.csv".into());
                    (h, p.cfg.generator)
                }
            };
            if h.output_size() != p.cfg.ingest.crop_size {
                return Err(CoreError::Backend(format!("generator emits {} px frames for {} px crops", h.output_size(), p.cfg.ingest.crop_size)).into());
            }
            save_generator(&p.path("generator.lekb"), &h, arch)?;
            Ok(files)
        })
    }

    fn invert_stage(&mut self) -> Result<()> {
        let inputs = json!({
            "crops": self.input("ingest", "crops.lekb")?,
            "generator": self.input("generator", "generator.lekb")?,
            "encoder": self.cfg.encoder,
            "backend": self.runtime.encoder.name(),
        });
        self.stage("invert", inputs, |p| {
            let h = p.generator("generator.lekb")?;
            let crops = load_frames(&p.path("crops.lekb"))?;
            let pivots = crops.frames().iter().map(|f| invert(f, p.runtime.encoder.as_ref(), &h)).collect::<lek_core::Result<Vec<_>>>()?;
            save_trajectory(&p.path("pivots.lektraj"), &pivots)?;
            Ok(vec!["pivots.lektraj".into()])
        })
    }

    fn pti_stage(&mut self) -> Result<()> {
        let inputs = json!({
            "crops": self.input("ingest", "crops.lekb")?,
            "pivots": self.input("invert", "pivots.lektraj")?,
            "generator": self.input("generator", "generator.lekb")?,
            "pti": self.cfg.pti,
            "perceptual": self.runtime.perceptual.name(),
        });
        self.stage("pti", inputs, |p| {
            let h = p.generator("generator.lekb")?;
            let crops = load_frames(&p.path("crops.lekb"))?;
            let pivots = load_trajectory(&p.path("pivots.lektraj"))?;
            let tuned = pivotal_tune(&crops, &pivots, &h, &p.cfg.pti, p.runtime.perceptual.as_ref())?;
            save_generator(&p.path("generator_pti.lekb"), &tuned, p.cfg.generator)?;
            Ok(vec!["generator_pti.lekb".into()])
        })
    }

    fn optimize_stage(&mut self) -> Result<()> {
        let inputs = json!({
            "crops": self.input("ingest", "crops.lekb")?,
            "pivots": self.input("invert", "pivots.lektraj")?,
            "generator": self.input("pti", "generator_pti.lekb")?,
            "landmarks": self.input("audio2landmark", "landmarks.json")?,
            "locator": self.input("heatmap", "locator.lekb")?,
            "optimize": self.cfg.optimize,
            "perceptual": self.runtime.perceptual.name(),
        });
        self.stage("optimize", inputs, |p| {
            let tr = p.optimize_with(&p.cfg.optimize)?;
            save_trajectory(&p.path("trajectory.lektraj"), &tr.codes)?;
            write_loss_log(&p.path("optimize_loss.csv"), &tr)?;
            Ok(vec!["trajectory.lektraj".into(), "optimize_loss.csv".into()])
        })
    }

    fn optimize_with(&self, config: &lek_core::optimizer::OptimizeConfig) -> Result<LatentTrajectory> {
        let h = self.generator("generator_pti.lekb")?;
        let crops = load_frames(&self.path("crops.lekb"))?;
        let pivots = load_trajectory(&self.path("pivots.lektraj"))?;
        let targets = load_landmarks(&self.path("landmarks.json"))?;
        let loc = self.locator()?;
        let b = Backends { perceptual: self.runtime.perceptual.as_ref(), extractor: &loc };
        Ok(optimize_sequence(&crops, &pivots, &targets, &h, config, b)?)
    }

    fn mask_file(i: usize) -> String {
        format!("masks/mask_{i:04}.png")
    }

    fn stitch_stage(&mut self) -> Result<()> {
        let inputs = json!({
            "crops": self.input("ingest", "crops.lekb")?,
            "pose": self.input("ingest", "crop_landmarks.json")?,
            "trajectory": self.input("optimize", "trajectory.lektraj")?,
            "generator": self.input("pti", "generator_pti.lekb")?,
            "stitch": self.cfg.stitch,
            "segmentation": self.runtime.segmenter.name(),
        });
        self.stage("stitch", inputs, |p| {
            let h = p.generator("generator_pti.lekb")?;
            let crops = load_frames(&p.path("crops.lekb"))?;
            let lms = load_landmarks(&p.path("crop_landmarks.json"))?;
            let codes = load_trajectory(&p.path("trajectory.lektraj"))?;
            let mut files = Vec::new();
            let mut regions = Vec::with_capacity(crops.len());
            for (i, (f, l)) in crops.frames().iter().zip(&lms).enumerate() {
                let m = segment_face(f, l, p.runtime.segmenter.as_ref())?;
                save_mask(&p.path(&Self::mask_file(i)), &m)?;
                files.push(Self::mask_file(i));
                regions.push(RegionMask::from_mask(m, p.cfg.stitch.dilation_radius)?);
            }
            let n = codes.len();
            let tr = LatentTrajectory { codes, loss_log: vec![Vec::new(); n] };
            let stitched = stitch_tune(crops.frames(), &tr, &regions, &h, &p.cfg.stitch)?;
            save_generator(&p.path("generator_stitched.lekb"), &stitched, p.cfg.generator)?;
            files.push("generator_stitched.lekb".into());
            Ok(files)
        })
    }

    fn composite_stage(&mut self) -> Result<()> {
        let n = load_frames(&self.path("crops.lekb"))?.len();
        let masks: Vec<Value> = (0..n).map(|i| self.input("stitch", &Self::mask_file(i)).map(Value::String)).collect::<Result<_>>()?;
        let inputs = json!({
            "source": self.input("ingest", "source.lekb")?,
            "crops": self.input("ingest", "crops.lekb")?,
            "trajectory": self.input("optimize", "trajectory.lektraj")?,
            "generator": self.input("stitch", "generator_stitched.lekb")?,
            "masks": masks,
            "feather": self.cfg.stitch.feather,
        });
        self.stage("composite", inputs, |p| {
            let h = p.generator("generator_stitched.lekb")?;
            let source = load_frames(&p.path("source.lekb"))?;
            let crops = load_frames(&p.path("crops.lekb"))?;
            let codes = load_trajectory(&p.path("trajectory.lektraj"))?;
            let mut edited_crops = Vec::with_capacity(codes.len());
            let mut edited = Vec::with_capacity(codes.len());
            for (i, w) in codes.iter().enumerate() {
                let crop = &crops.frames()[i];
                let x = h.synthesize_indexed(w, crop.index)?.with_transform(crop.crop_transform);
                let mask = load_mask(&p.path(&Self::mask_file(i)))?;
                edited.push(composite(&x, &source.frames()[i], &mask, &crop.crop_transform, p.cfg.stitch.feather)?);
                edited_crops.push(x);
            }
            let edited = FrameSequence::new(edited, source.fps)?;
            save_frames(&p.path("edited.lekb"), &edited)?;
            save_frames(&p.path("edited_crops.lekb"), &FrameSequence::new(edited_crops, source.fps)?)?;
            write_y4m(&p.path("edited.y4m"), &edited)?;
            Ok(vec!["edited.lekb".into(), "edited_crops.lekb".into(), "edited.y4m".into()])
        })
    }

    fn evaluate_stage(&mut self) -> Result<()> {
        let gt = self.cfg.input.ground_truth.clone();
        let gt_lm = self.cfg.input.ground_truth_landmarks.clone();
        let hash = |p: &Option<PathBuf>| -> Result<Value> { Ok(p.as_ref().map(|p| hash_path(p)).transpose()?.map_or(Value::Null, Value::String)) };
        let inputs = json!({
            "edited": self.input("composite", "edited.lekb")?,
            "source": self.input("ingest", "source.lekb")?,
            "crops": self.input("ingest", "crops.lekb")?,
            "landmarks": self.input("audio2landmark", "landmarks.json")?,
            "locator": self.input("heatmap", "locator.lekb")?,
            "ground_truth": hash(&gt)?,
            "ground_truth_landmarks": hash(&gt_lm)?,
            "perceptual": self.runtime.perceptual.name(),
        });
        self.stage("evaluate", inputs, move |p| {
            let edited = load_frames(&p.path("edited.lekb"))?;
            let reference = match &gt {
                Some(g) => extract_frames(&VideoSource::open(g)?, p.cfg.ingest.source_size)?,
                None => load_frames(&p.path("source.lekb"))?,
            };
            let loc = p.locator()?;
            let located = locate_all(&loc, edited.frames())?;
            let target = match &gt_lm {
                Some(path) => load_landmarks(path)?,
                None => {
                    let crops = load_frames(&p.path("crops.lekb"))?;
                    let pred = load_landmarks(&p.path("landmarks.json"))?;
                    crops.frames().iter().zip(&pred).map(|(c, l)| crop_to_source(c, l, p.cfg.ingest.source_size)).collect::<Result<Vec<_>>>()?
                }
            };
            let report = p.report(&edited, &reference, Some((&located, &target)))?;
            write_atomic(&p.path("report.json"), serde_json::to_string_pretty(&report).expect("report").as_bytes())?;
            Ok(vec!["report.json".into()])
        })
    }

    pub fn report(&self, pred: &FrameSequence, gt: &FrameSequence, landmarks: Option<(&[LandmarkSet], &[LandmarkSet])>) -> Result<EvalReport> {
        let perceptual = self.runtime.perceptual.as_ref();
        Ok(evaluate(pred, gt, landmarks, perceptual, &PerceptualFeatures { metric: perceptual })?)
    }

    /// Re-optimizes the clip from the same pivots and tuned generator with
    /// the configured smoothing, without smoothing and with the frame-space
    /// variant. Needs the stages through `pti`.
    pub fn ablate(&mut self) -> Result<AblationReport> {
        let lambda = if self.cfg.optimize.lambda_smooth > 0.0 { self.cfg.optimize.lambda_smooth } else { 1e-4 };
        let variants = [("latent", lambda, SmoothVariant::Latent), ("none", 0.0, SmoothVariant::Latent), ("frame", lambda, SmoothVariant::Frame)];
        let mut out = Vec::new();
        for (name, lam, var) in variants {
            let mut config = self.cfg.optimize.clone();
            config.lambda_smooth = lam;
            config.smooth_variant = var;
            let stage = format!("ablate-{name}");
            let traj = format!("ablation/{name}.lektraj");
            let file = format!("ablation/{name}.json");
            let inputs = json!({
                "crops": self.input("ingest", "crops.lekb")?,
                "pivots": self.input("invert", "pivots.lektraj")?,
                "generator": self.input("pti", "generator_pti.lekb")?,
                "landmarks": self.input("audio2landmark", "landmarks.json")?,
                "locator": self.input("heatmap", "locator.lekb")?,
                "optimize": config,
            });
            let (t2, f2) = (traj.clone(), file.clone());
            self.stage(&stage, inputs, move |p| {
                let tr = p.optimize_with(&config)?;
                save_trajectory(&p.path(&t2), &tr.codes)?;
                let h = p.generator("generator_pti.lekb")?;
                let crops = load_frames(&p.path("crops.lekb"))?;
                let synth = tr.codes.iter().zip(crops.frames()).map(|(w, f)| h.synthesize_indexed(w, f.index)).collect::<lek_core::Result<Vec<_>>>()?;
                let synth = FrameSequence::new(synth, crops.fps)?;
                let located = locate_all(&p.locator()?, synth.frames())?;
                let targets = load_landmarks(&p.path("landmarks.json"))?;
                let v = AblationVariant {
                    name: name.to_string(),
                    lambda_smooth: lam,
                    smooth_variant: var,
                    mean_latent_distance: tr.mean_consecutive_distance(),
                    frame_difference_energy: tr.frame_difference_energy(&h)?,
                    report: p.report(&synth, &crops, Some((&located, &targets)))?,
                };
                write_atomic(&p.path(&f2), serde_json::to_string_pretty(&v).expect("variant").as_bytes())?;
                Ok(vec![t2, f2])
            })?;
            let text = fs::read_to_string(self.path(&file)).at(&self.path(&file))?;
            out.push(serde_json::from_str(&text).map_err(|e| LekError::format(&self.path(&file), e.to_string()))?);
        }
        let report = AblationReport { variants: out };
        write_atomic(&self.path("ablation.json"), serde_json::to_string_pretty(&report).expect("ablation").as_bytes())?;
        Ok(report)
    }
}

/// Frames from a bundle (`.lekb`) or a video source.
pub fn load_any_frames(path: &Path, size: usize) -> Result<FrameSequence> {
    if path.extension().is_some_and(|e| e == "lekb") {
        load_frames(path)
    } else {
        extract_frames(&VideoSource::open(path)?, size)
    }
}

/// Metrics with the bundled perceptual backend, outside a run.
pub fn evaluate_frames(pred: &FrameSequence, gt: &FrameSequence, landmarks: Option<(&[LandmarkSet], &[LandmarkSet])>) -> Result<EvalReport> {
    let m = lek_core::perceptual::ToyPerceptual::default();
    Ok(evaluate(pred, gt, landmarks, &m, &PerceptualFeatures { metric: &m })?)
}
