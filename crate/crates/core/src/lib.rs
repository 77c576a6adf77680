//! Equivariant interatomic potentials with (k, l)-block structural pruning.
//!
//! The crate is organised bottom-up:
//!
//! - [`so3`]: real spherical harmonics, Clebsch–Gordan coefficients, Wigner-D
//!   matrices and rotation sampling.
//! - [`irreps`]: feature layouts, per-atom feature tensors and block masks.
//! - [`tape`]: a small reverse-mode differentiation engine over 2-D tensors.
//! - [`model`]: the message-passing potential (energies and forces).
//! - [`importance`]: calibration-time block importance scores.
//! - [`prune`]: mask generation and structural alignment of checkpoints.
//! - [`train`]: loss, optimiser and the retraining / fine-tuning loop.
//! - [`data`]: synthetic corpora, corpus I/O and calibration sampling.
//! - [`checkpoint`]: the single-file checkpoint container.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod importance;
pub mod irreps;
pub mod model;
pub mod poly;
pub mod prune;
pub mod so3;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use irreps::{FeatureTensor, IrrepsLayout, PruneMask};
pub use model::{AtomicSystem, ModelConfig, ModelParams, Precision, Prediction};
pub use so3::Rotation;
