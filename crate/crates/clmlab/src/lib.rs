//! Desk-scale laboratory for studying whether pretraining loss predicts
//! downstream transfer in chemical language models.
//!
//! The crate pretrains tiny Transformer encoders on SMILES with masked
//! language modeling, evaluates transfer by fine-tuning and linear probing,
//! computes transferability proxies (Hessian trace, PGM distance, zero-shot
//! loss), fits parametric scaling laws, and quantifies consistency between
//! pretraining and downstream metrics with rank correlations.

pub mod analysis;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pretrain;
pub mod synth;
pub mod tokenizer;
pub mod transfer;
pub mod viz;

pub use error::{Error, Result};
