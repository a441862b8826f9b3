//! Recurrent encoder-decoder restoration model and the character language
//! model baseline.

mod lm;
mod lstm;
mod params;
mod seq2seq;

pub use lm::{CharLm, LmConfig, LmState, LmVars};
pub use lstm::LstmLayer;
pub use params::{Bound, Manifest, Parameters};
pub use seq2seq::{
    argmax_output, DecoderState, EncoderOutput, ModelConfig, Seq2Seq, Seq2SeqVars, SourceBatch, StepOutput, Variant,
};
