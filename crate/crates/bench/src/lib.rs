//! Experiment harness for natural-gradient sparse GP inference.

pub mod data;
pub mod error;
pub mod synth;
pub mod experiment;
pub mod trace;
pub mod gradcheck;
