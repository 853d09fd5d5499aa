//! Desk-scale vision-transformer lab: a tape-based autodiff core, a micro
//! ViT with CLS-prompt injection hooks, token mixup, a prototype cosine
//! classifier, and the session harness that ties them into a few-shot
//! class-incremental benchmark.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mixup;
pub mod plan;
pub mod prompts;
pub mod proto;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
