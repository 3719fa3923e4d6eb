//! Generative pre-training on per-node NetFlow traffic time series.
//!
//! The pipeline: parse flow records ([`flow`]), aggregate them into per-node per-minute
//! features ([`schema`], [`tensor`]), quantize them into categorical tokens ([`discretize`]),
//! pre-train a causal decoder on next-minute prediction ([`model`], [`train`]), and fine-tune
//! a survival head on its hidden states for early DDoS detection ([`detect`]). [`synth`]
//! produces labeled synthetic traffic so every stage can run without private data.

pub mod detect;
pub mod discretize;
pub mod error;
pub mod flow;
#[doc(hidden)]
pub mod fuzzing;
pub mod model;
pub mod schema;
pub mod synth;
pub mod tensor;
pub mod time;
pub mod train;

pub use error::{Error, Result};
