//! CLIPin at desk scale: CLIP-style contrastive pretraining fused with a
//! non-contrastive online/target branch through shared pre-projectors.
//!
//! The crate is organized as a pipeline:
//!
//! - [`numerics`]: f64 tensors, reverse-mode autodiff, deterministic RNG,
//!   finite-difference gradient oracle.
//! - [`model`]: encoders, projectors, predictors, the online/target split and
//!   its momentum (EMA) update.
//! - [`losses`]: symmetric InfoNCE, negative-cosine inter-/intra-modal terms,
//!   fixed and learnable loss weighting.
//! - [`augment`]: deterministic two-view image/text augmentation.
//! - [`data`]: synthetic latent-factor corpus, codebook tokenizer, pair files.
//! - [`train`]: AdamW, warmup schedule, training loop, checkpoints, ablation.
//! - [`eval`]: linear probe, zero-shot classification, ranking metrics,
//!   collapse diagnostics.
//!
//! Everything downstream of one root seed is bit-reproducible: same seed and
//! config, same losses, same checkpoint bytes.

pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
