//! Bottom-up conditioned top-down multi-instance pose estimation.
//!
//! A bottom-up model proposes poses for a whole scene; each proposal defines
//! a crop and is rendered into a condition heatmap, and a conditional
//! top-down network predicts the pose of the instance the condition points at.

pub mod condition;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod io;
pub mod nets;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod schema;
pub mod synth;

pub use error::{Error, Result};
