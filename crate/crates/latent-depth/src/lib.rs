//! Transformers with latent layer depth.
//!
//! Each layer's non-residual block is multiplied by a per-layer gate sampled
//! from a learned Bernoulli posterior via the Gumbel-Softmax relaxation. The
//! posterior is trained jointly with the model weights in a two-level loop,
//! supports per-task tables with aggregated-posterior priors and a targeted
//! depth penalty, and can be thresholded into hard layer pruning at inference
//! time.
//!
//! The crate is desk-scale by design: dense f64 tensors, a Wengert-tape
//! autodiff engine with a finite-difference oracle, synthetic cipher
//! transduction tasks standing in for multilingual translation, and a CLI
//! that drives corpus generation, training, evaluation, pruning, and
//! gradient audits.

pub mod diagnostics;
pub mod gate;
pub mod loss;
pub mod model;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use tensor::Tensor;
