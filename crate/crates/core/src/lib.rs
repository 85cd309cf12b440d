//! Semi-supervised learning with contrastive predictive coding.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`rng`]: dense f64 tensors and a counter-based RNG whose
//!   streams are reproducible across platforms.
//! - [`tape`], [`params`], [`gradcheck`]: a reverse-mode autodiff engine with
//!   exactly the kernels the models need, plus a finite-difference oracle.
//! - [`model`]: encoders, the recurrent context aggregator with a Gaussian
//!   head, bilinear step scorers, and the InfoNCE step loss.
//! - [`objectives`]: the semi-supervised objectives — labeled/unlabeled
//!   contrastive losses with a classification head, and the class-conditional
//!   variational variant with Gumbel-Softmax label relaxation.
//! - [`data`]: patch grids, text sequences, synthetic Gaussian sequence
//!   generators with closed-form mutual information, splits, negative
//!   sampling, IDX file I/O.
//! - [`train`]: Adam, mixed batches, the training loop, top-k evaluation,
//!   checkpointing, complexity accounting.
//! - [`verify`]: self-check suites (gradient checks, entropy oracles,
//!   Gumbel fidelity, MI-bound validity) shared by the CLI and tests.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use params::{ParamId, ParamSet};
pub use rng::RngState;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
