//! Layout generation by continuous diffusion with differentiable aesthetic
//! constraints.
//!
//! The library represents a document layout as a fixed-length sequence of
//! (label, box) rows, diffuses it in a continuous state space, trains a
//! permutation-equivariant denoiser whose loss includes alignment and overlap
//! penalties, samples unconditionally or under masked conditioning, and
//! post-processes results with a constraint-driven optimizer. Evaluation
//! metrics, a synthetic corpus generator, JSONL ingestion, and an SVG
//! renderer round out the toolkit; the `lace` binary exposes everything on
//! the command line.

pub mod checkpoint;
pub mod cli;
pub mod conditioning;
pub mod denoiser;
pub mod error;
pub mod layout;
pub mod constraints;
pub mod corpus;
pub mod metrics;
pub mod postprocess;
pub mod render;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
