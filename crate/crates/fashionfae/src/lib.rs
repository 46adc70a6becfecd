//! Desk-scale multimodal pre-training for attribute-rich fashion items.
//!
//! The crate provides, end to end: a synthetic corpus generator whose images
//! are rendered from the item attributes, a patch codebook tokenizer, a
//! reverse-mode autodiff engine, the two-encoder model with its fusion-token
//! mechanism and three operating modes, five pre-training objectives with
//! their masking procedures, an AdamW training loop with checkpointing, and
//! cross-modal retrieval / recognition evaluation.
//!
//! See the `examples/` directory for one runnable walkthrough per
//! capability, or the `ffae` binary for the batch pipeline.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod patches;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
