#![allow(dead_code)]

use lacuna_core::corpus::CleanRecord;
use lacuna_core::model::{ModelConfig, Seq2Seq, Variant};
use lacuna_core::restore::Seq2SeqRestorer;
use lacuna_core::vocab::{CharAlphabet, WordVocab};
use lacuna_core::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn letters() -> CharAlphabet {
    CharAlphabet::with_extra("abcdefghijklmnopqrstuvwxyz.".chars()).unwrap()
}

pub fn tiny_config(variant: Variant, alphabet: &CharAlphabet, vocab: Option<&WordVocab>) -> ModelConfig {
    let mut c = ModelConfig::new(variant, alphabet.len(), vocab.map_or(0, |v| v.len()));
    c.hidden = 8;
    c.char_dim = 6;
    c.word_dim = 4;
    c.dropout = 0.0;
    c
}

pub fn tiny_restorer<T: Scalar>(variant: Variant, texts: &[&str], seed: u64) -> Seq2SeqRestorer<T> {
    let alphabet = letters();
    let vocab = variant
        .uses_words()
        .then(|| WordVocab::build(texts.iter().copied(), 100));
    let config = tiny_config(variant, &alphabet, vocab.as_ref());
    let model = Seq2Seq::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    Seq2SeqRestorer::new(model, alphabet, vocab).unwrap()
}

/// Deterministic pseudo-text over lowercase letters and spaces.
pub fn pseudo_text(len: usize, seed: u64) -> String {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["alpha", "beta", "gamma", "delta", "kappa", "sigma", "omega", "theta"];
    let mut s = String::new();
    while s.chars().count() < len {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(words[rng.gen_range(0..words.len())]);
    }
    s.chars().take(len).collect()
}

pub fn records(n: usize, len: usize) -> Vec<CleanRecord> {
    (0..n as u64)
        .map(|i| CleanRecord::new(i, pseudo_text(len, i)))
        .collect()
}
