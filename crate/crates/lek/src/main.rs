use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lek::backends::Registry;
use lek::config::{parse_override, PipelineConfig};
use lek::error::{LekError, Result};
use lek::persist::{load_landmarks, write_atomic};
use lek::pipeline::{load_any_frames, Pipeline, RunManifest};
use lek::speech::{save_audio_models, train_audio_models};
use lek::toy::write_toy_clip;
use lek_core::face::ClipSpec;

#[derive(Parser)]
#[command(name = "lek", version, about = "Audio-driven lip editing of talking-head video")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Decode, crop and featurize the inputs.
    Ingest(RunArgs),
    /// Train the audio-to-landmark models on the synthetic corpus.
    TrainA2l(RunArgs),
    /// Run the full editing pipeline.
    Edit(RunArgs),
    /// Compare predicted frames with reference frames.
    Evaluate(EvalArgs),
    /// Re-optimize the clip with and without smoothing.
    Ablate(RunArgs),
    /// Write a synthetic talking clip (video, audio, landmarks).
    SynthClip(SynthArgs),
    /// Print the effective configuration.
    Config(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    video: Option<PathBuf>,
    #[arg(long)]
    audio: Option<PathBuf>,
    /// Source landmarks JSON; located on the frames when absent.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Train toy audio models instead of loading checkpoints.
    #[arg(long)]
    train_toy: bool,
    /// Stop after this stage.
    #[arg(long)]
    stop_after: Option<String>,
    /// Override a configuration key, e.g. `--set optimize.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted frames: `.lekb` bundle, `.y4m` or PNG directory.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, requires = "gt_landmarks")]
    pred_landmarks: Option<PathBuf>,
    #[arg(long, requires = "pred_landmarks")]
    gt_landmarks: Option<PathBuf>,
    /// Frame side used when decoding video inputs.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Report destination; printed to stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RunArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut ov: Vec<(String, String)> = self.overrides.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
        let mut put = |k: &str, v: String| ov.push((k.to_string(), v));
        let quote = |p: &PathBuf| toml::Value::String(p.display().to_string()).to_string();
        if let Some(s) = self.seed {
            put("seed", s.to_string());
        }
        if let Some(p) = &self.output {
            put("output_dir", quote(p));
        }
        for (k, v) in [("input.video", &self.video), ("input.audio", &self.audio), ("input.landmarks", &self.landmarks), ("input.ground_truth", &self.ground_truth)] {
            if let Some(p) = v {
                put(k, quote(p));
            }
        }
        if self.train_toy {
            put("a2l.train_toy", "true".into());
        }
        PipelineConfig::load(self.config.as_deref(), &ov)
    }
}

fn print_manifest(m: &RunManifest) {
    for s in &m.stages {
        let how = if s.reused { "reused" } else { "ran" };
        println!("{:<16} {how:<6} {:>8.2} s", s.name, s.seconds);
    }
    for n in &m.backend_notes {
        println!("note: {n}");
    }
}

fn run(cli: Cli) -> Result<()> {
    let registry = Registry::from_env();
    match cli.cmd {
        Cmd::Ingest(a) => {
            let mut p = Pipeline::open(a.load()?, &registry)?;
            print_manifest(p.run_until("ingest")?);
        }
        Cmd::Edit(a) => {
            let mut p = Pipeline::open(a.load()?, &registry)?;
            let m = p.run(a.stop_after.as_deref())?;
            print_manifest(m);
            if m.completed {
                println!("wrote {}", p.dir().join("edited.y4m").display());
            }
        }
        Cmd::Ablate(a) => {
            let mut p = Pipeline::open(a.load()?, &registry)?;
            p.run_until("pti")?;
            let r = p.ablate()?;
            for v in &r.variants {
                println!(
                    "{:<8} lambda {:<8} latent {:.3e} fde {:.3e} psnr {:.2}",
                    v.name, v.lambda_smooth, v.mean_latent_distance, v.frame_difference_energy, v.report.psnr
                );
            }
        }
        Cmd::TrainA2l(a) => {
            let cfg = a.load()?;
            cfg.validate()?;
            let cfg = cfg.seeded();
            let dir = cfg.a2l.checkpoints.clone().unwrap_or_else(|| cfg.output_dir.join("a2l"));
            std::fs::create_dir_all(&dir).map_err(|e| LekError::io(&dir, e))?;
            let (m, logs) = train_audio_models(&cfg)?;
            for f in save_audio_models(&dir, &m, &logs)? {
                println!("{}", dir.join(f).display());
            }
        }
        Cmd::Evaluate(a) => {
            let pred = load_any_frames(&a.pred, a.size)?;
            let gt = load_any_frames(&a.gt, a.size)?;
            let lms = match (&a.pred_landmarks, &a.gt_landmarks) {
                (Some(p), Some(g)) => Some((load_landmarks(p)?, load_landmarks(g)?)),
                _ => None,
            };
            let report = lek::pipeline::evaluate_frames(&pred, &gt, lms.as_ref().map(|(p, g)| (p.as_slice(), g.as_slice())))?;
            let text = serde_json::to_string_pretty(&report).expect("report");
            match &a.output {
                Some(p) => write_atomic(p, text.as_bytes())?,
                None => println!("{text}"),
            }
        }
        Cmd::SynthClip(a) => {
            let spec = ClipSpec { frames: a.frames, size: a.size, fps: a.fps, ..Default::default() };
            let f = write_toy_clip(&a.output, &spec, a.seed)?;
            for p in [f.video, f.audio, f.landmarks] {
                println!("{}", p.display());
            }
        }
        Cmd::Config(a) => {
            let cfg = a.load()?;
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn report(e: &LekError) {
    eprintln!("error: {e}");
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        eprintln!("  caused by: {s}");
        src = s.source();
    }
}
