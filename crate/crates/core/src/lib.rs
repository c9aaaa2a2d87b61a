//! Core algorithms for latent-space talking-face editing.
//!
//! Everything here is `no_std` with `alloc`. File formats, audio decoding and
//! the command-line driver live in the `lek` crate.

#![no_std]

extern crate alloc;

pub mod alignment;
pub mod audio2landmark;
pub mod error;
pub mod face;
pub mod frame;
pub mod generator;
pub mod geometry;
pub mod heatmap;
pub mod landmarks;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod optimizer;
pub mod params;
pub mod perceptual;
pub mod rng;
pub mod stitching;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use frame::{crop_align_face, Frame, FrameSequence};
pub use geometry::Affine2;
pub use landmarks::LandmarkSet;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
