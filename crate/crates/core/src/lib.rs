//! Group-partitioned normalization (BatchNorm, LayerNorm, GroupNorm, InstanceNorm,
//! SwitchNorm and LocalNorm) on top of a small reverse-mode tensor engine, plus the
//! noise models, evaluation strategies and experiment harness used to measure
//! classification robustness under image degradation.
//!
//! All image tensors use `[N, H, W, C]` storage order. Rank-2 activations `[N, D]`
//! are treated as `[N, 1, 1, D]` by the normalization engine.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod noise;
pub mod norm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Rng, Tensor};

/// Version string embedded in checkpoints and output headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
