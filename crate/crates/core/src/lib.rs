//! Deformable 3D registration engine.
//!
//! Global semantic features (reduced to a few channels) and local MIND
//! descriptors drive a coupled convex discrete initialization that is then
//! refined by Adam instance optimization of a smooth displacement field.

pub mod cli;
pub mod convex;
pub mod dimred;
pub mod error;
pub mod grid;
pub mod instance_opt;
pub mod io;
pub mod metrics;
pub mod mind;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{DisplacementField, FeatureVolume, Volume};
