//! CPU training engine for convolutional networks under stochastic
//! image-size regimes.
//!
//! The crate trains small ResNets while varying the image side length from
//! step to step, holding the per-step compute budget roughly constant by
//! adjusting either the batch size or the number of batch-augmentation
//! duplicates. Around that core it provides gradient-norm smoothing across
//! size switches, exact batch-norm recalibration at any evaluation size, and
//! an analysis suite for gradient correlations and size sweeps.
//!
//! Everything runs on the CPU, single-threaded, generically over f32 or f64
//! ([`Elem`]), and deterministically for a fixed seed.

pub mod analysis;
pub mod calib;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod elem;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sched;
pub mod tensor;
pub mod train;

pub use elem::{Dtype, Elem};
pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
