//! Deterministic desk-scale framework for studying dropout in super-resolution
//! networks.
//!
//! The crate covers the whole loop: seeded degradation synthesis, a small
//! reverse-mode differentiation engine with the layers an SRResNet needs,
//! training with L1 + Adam + cosine annealing, PSNR evaluation grids, and
//! the analysis tools (channel saliency maps, energy-normalized channel
//! ablation, degradation-representation clustering scored by the
//! Calinski-Harabasz index).

pub mod degrade;
pub mod error;
pub mod evaluate;
pub mod interpret;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{Shape4, Tensor4};

/// Images are `Tensor4<f32>` with values nominally in `[0, 1]`.
pub type ImageTensor = Tensor4<f32>;
