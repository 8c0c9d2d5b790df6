//! CTC sequence transduction with multi-task n-gram target decompositions.

pub mod config;
pub mod ctc;
pub mod decode;
pub mod decomp;
pub mod error;
pub mod image;
pub mod lm;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
