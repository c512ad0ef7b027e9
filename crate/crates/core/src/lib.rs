//! Two-stage vision modeling with a learned discrete guiding code.
//!
//! Stage I trains a feed-forward base model `f(x, z)` jointly with a
//! restricted oracle that compresses the ground-truth label into a short
//! discrete code `z` through a vector-quantization bottleneck. Stage II
//! trains an autoregressive language model to predict the code from the
//! image alone; inference composes the two as `f(x, LM(x))`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod inference;
pub mod models;
pub mod run;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod viz;
pub mod transformer;
pub mod tasks;
pub mod vq;
pub mod util;

pub use error::{Error, Result};
