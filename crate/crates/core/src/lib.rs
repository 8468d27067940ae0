//! An instrumented transformer inference engine for studying embedding-space
//! walks: encoder/decoder stacks with standard and refactored attention,
//! walk tracing, position-kernel analysis, concept composition and a small
//! multiple-choice evaluation harness.

pub mod analysis;
pub mod bench;
pub mod compose;
pub mod error;
pub mod io;
pub mod model;
pub mod numkern;
pub mod synth;
pub mod walk;

pub use error::{Error, Result};
pub use model::Model;
