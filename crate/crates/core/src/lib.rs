//! Masked sequence-to-sequence pre-training at desk scale.
//!
//! The crate is organised bottom-up: a small reverse-mode autodiff engine
//! ([`tape`]), BPE subwords ([`tokenizer`]), span masking ([`masking`]), an
//! encoder-decoder transformer ([`model`]), the pre-training loop
//! ([`training`]), generation and metrics ([`decoding`], [`eval`]),
//! fine-tuning and back-translation ([`finetune`]), and the experiment
//! harness used by the `mass` binary ([`harness`]).

pub mod checkpoint;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod harness;
pub mod masking;
pub mod model;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
