//! Sparse dictionary fine-tuning for attention layers.
//!
//! Adapted features are built as sparse combinations of learned dictionary
//! atoms, `ΔO = σ_λ(A·X·W_s)·D`, on top of a frozen attention layer. The crate
//! bundles a small reverse-mode autodiff engine, sparse-coding operators,
//! attention and adapter layers, two toy tasks (masked Fourier signals and
//! digit denoising), training loops and the analysis tools used to study
//! atom influence, cost and stability.

pub mod analysis;
pub mod attention;
pub mod config;
pub mod error;
pub mod experiment;
pub mod rng;
pub mod sparse;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
