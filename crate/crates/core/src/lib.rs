//! Discriminative feature generation (DFG) for class-imbalanced classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: tensors and a reverse-mode differentiation engine with
//!   second-order support for the gradient penalty.
//! * [`nn`]: layer primitives and parameter initialisation.
//! * [`arch`]: declarative network specs, the LeNet split and DCGAN-style
//!   generator/critic builders, and checkpoints.
//! * [`attention`]: filter importance by single-filter ablation, class-wise
//!   aggregation, blending and masking.
//! * [`losses`]: critic, generator, extractor and classifier objectives.
//! * [`train`]: optimizers, source pretraining, baselines and the DFG loop.
//! * [`data`]: IDX ingestion, preprocessing, synthetic data, step imbalance.
//! * [`eval`]: metrics, aggregation, PCA and CSV exports.

pub mod arch;
pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{DfgError, Result};
pub use tensor::{Real, Tensor, Var};
