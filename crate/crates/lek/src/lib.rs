//! Standard-library companion to `lek-core`: media decoding, audio
//! features, file formats, checkpoints, configuration and the stage runner
//! behind the `lek` command.

pub mod backends;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod media;
pub mod persist;
pub mod pipeline;
pub mod speech;
pub mod toy;

pub use error::{LekError, Result};

/// JSON schema of `report.json` and of `lek evaluate` output.
pub const EVAL_REPORT_SCHEMA: &str = include_str!("../schema/eval_report.schema.json");
