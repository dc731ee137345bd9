//! Event-camera referring-expression grounding at desk scale.
//!
//! The crate covers the full pipeline: event voxelization, cue-phrase
//! matching and token maps, a small deterministic grounding network with
//! attribute-expert fusion, Hungarian pseudo-target training, late-fusion
//! inference, benchmark metrics, a synthetic scene generator, and the
//! file formats plus CLI that tie them together.

pub mod boxes;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod event;
pub mod frame;
pub mod fusion;
pub mod labels;
pub mod linalg;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
