//! Adversarial training with contrastive learning (ATCL) for transformer
//! language and translation models, on a from-scratch autodiff engine.
//!
//! The training step perturbs one embedded token per sentence along the
//! normalized loss gradient, forwards the clean and perturbed batches, and
//! optimizes `L + alpha * L_adv + beta * L_cont`, where `L_cont` pulls the
//! clean and perturbed pre-softmax representations of the perturbed token
//! together against negatives sampled from the batch.

pub mod adversarial;
pub mod autodiff;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod model;
pub mod text;
pub mod training;

pub use error::{Error, Result};
