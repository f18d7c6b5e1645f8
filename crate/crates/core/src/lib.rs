//! Deterministic toy transformer engine with query-conditioned visual token
//! pruning across video segments, a linear frame-sampling baseline, a
//! planted-event synthetic benchmark and evaluation utilities.
//!
//! Everything numeric is generic over [`kernels::Scalar`] (`f32` or `f64`);
//! reductions accumulate in `f64` either way. The aliases below pin the
//! common instantiations.
//!
//! ```
//! use selfres::{init_weights, ModelConfig, Weights32};
//!
//! let cfg = ModelConfig { layers: 2, ..ModelConfig::default() };
//! let w: Weights32 = init_weights(&cfg).unwrap();
//! assert_eq!(w.layers.len(), 2);
//! ```

pub mod error;
pub mod evalkit;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod segmenter;
pub mod synthbench;
pub mod tensor_io;

pub use error::{Error, Result};
pub use kernels::{Matrix, Scalar};
pub use model::{init_weights, ModelConfig, Weights};
pub use sampler::{ScheduleMode, SamplingSchedule, ScoreMode, Signature};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Weights32 = Weights<f32>;
pub type Weights64 = Weights<f64>;
pub type Signature32 = Signature<f32>;
pub type Signature64 = Signature<f64>;
