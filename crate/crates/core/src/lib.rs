//! Streaming 4D language fields.
//!
//! A frozen streaming geometry encoder turns video frames into geometry
//! tokens; a semantic bridging decoder maps those tokens to low-dimensional
//! language-aligned feature maps and RGB reconstructions. Text queries are
//! matched per frame, lifted to 3D through predicted (or ground-truth)
//! depth and cameras, and assembled over time.

pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod fsutil;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod query;
pub mod rng;
pub mod sbd;
pub mod selftest;
pub mod supervision;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Tape, Tensor, Var};
