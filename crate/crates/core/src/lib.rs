//! Desk-scale knowledge distillation for BERT-style transformer encoders.
//!
//! Everything numeric lives in this crate: a dense `f64` tensor type with
//! reverse-mode differentiation, WordPiece-style tokenization, MLM masking,
//! standard and bottleneck encoders, the distillation loss suites, training
//! loops, and task metrics. The crate is `no_std` (with `alloc`) so the
//! algorithmic core stays free of IO; file formats, checkpoints, timing and
//! the CLI live in the companion `distillkit` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
