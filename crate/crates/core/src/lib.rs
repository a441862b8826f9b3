//! Restoration of damaged texts with character+word sequence-to-sequence
//! attention models.
//!
//! The crate covers the whole offline path: normalizing raw annotated
//! corpora, building alphabets and word vocabularies, a small reverse-mode
//! autodiff engine, the recurrent encoder-decoder and a character language
//! model baseline, training, beam decoding and evaluation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the precision used for training and serving.

pub mod autodiff;
pub mod beam;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod restore;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use beam::{BeamConfig, Hypothesis};
pub use checkpoint::{Checkpoint, ModelSpec};
pub use error::{Error, Result, TensorError};
pub use restore::Restorer;
pub use rng::RngState;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Seq2Seq32 = model::Seq2Seq<f32>;
pub type Seq2Seq64 = model::Seq2Seq<f64>;
pub type CharLm32 = model::CharLm<f32>;
pub type CharLm64 = model::CharLm<f64>;
pub type Seq2SeqRestorer32 = restore::Seq2SeqRestorer<f32>;
pub type Seq2SeqRestorer64 = restore::Seq2SeqRestorer<f64>;
pub type LmRestorer32 = restore::LmRestorer<f32>;
pub type LmRestorer64 = restore::LmRestorer<f64>;
