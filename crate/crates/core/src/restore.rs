//! Inference front end shared by evaluation, the CLI and the service.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{log_sum_exp, Tape};
use crate::beam::{beam_search, sort_hypotheses, BeamConfig, BeamStepper, Hypothesis, StepScores};
use crate::checkpoint::{Checkpoint, ModelSpec};
use crate::error::{Error, Result};
use crate::model::{CharLm, DecoderState, EncoderOutput, LmState, LmVars, Seq2Seq, Seq2SeqVars, SourceBatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{encode, CharAlphabet, EncodedSequence, WordVocab, PREDICT, START_ID};

/// A model that proposes fills for the `?` run of a text.
pub trait Restorer: Send + Sync {
    fn alphabet(&self) -> &CharAlphabet;

    /// Short identifier such as `seq2seq/bi-word` or `lm`.
    fn describe(&self) -> String;

    /// Top-k fills for the single `?` run in `masked`, best first.
    fn propose(&self, masked: &str, beam: &BeamConfig) -> Result<Vec<Hypothesis>>;

    /// Log-probability the model assigns to `fill` for the `?` run.
    fn score(&self, masked: &str, fill: &str) -> Result<f64>;
}

/// Start and length (in characters) of the single `?` run in `text`.
pub fn find_gap(text: &str) -> Result<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let start = chars
        .iter()
        .position(|&c| c == PREDICT)
        .ok_or_else(|| Error::InvalidArgument("text has no `?` gap".into()))?;
    let len = chars[start..].iter().take_while(|&&c| c == PREDICT).count();
    if chars[start + len..].contains(&PREDICT) {
        return Err(Error::InvalidArgument("text has more than one `?` gap".into()));
    }
    Ok((start, len))
}

/// Window `[start, end)` of at most `max` characters around a gap, centered
/// where the text allows and always containing the whole gap.
pub fn centered_window(text_len: usize, gap_start: usize, gap_len: usize, max: usize) -> (usize, usize) {
    let w = max.max(gap_len).min(text_len);
    let slack = w - gap_len;
    let start = gap_start.saturating_sub(slack / 2).min(text_len - w);
    (start, start + w)
}

fn inference_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn log_softmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        let row = t.row(r);
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|&x| (x - lse).to_f64().unwrap_or(f64::NAN)));
    }
    out
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

/// The encoder-decoder model with the vocabularies it was trained with.
#[derive(Debug, Clone)]
pub struct Seq2SeqRestorer<T> {
    pub model: Seq2Seq<T>,
    pub alphabet: CharAlphabet,
    pub vocab: Option<WordVocab>,
}

struct Seq2SeqStepper<'a, T: Scalar> {
    model: &'a Seq2Seq<T>,
    tape: Tape<T>,
    vars: Seq2SeqVars,
    enc: EncoderOutput,
    state: DecoderState,
    first: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> BeamStepper for Seq2SeqStepper<'_, T> {
    fn step(&mut self, parents: &[usize], prev: &[usize]) -> Result<StepScores> {
        if !self.first {
            self.state = self.state.select(&mut self.tape, parents)?;
        }
        self.first = false;
        let out = self
            .model
            .decode_step(&mut self.tape, &self.vars, prev, &self.state, &self.enc, &mut self.rng)?;
        self.state = out.state;
        let logits = self.tape.value(out.logits);
        Ok(StepScores {
            log_probs: log_softmax_rows(logits),
            vocab: logits.cols(),
            attention: to_f64(self.tape.value(out.attention)),
        })
    }
}

impl<T: Scalar> Seq2SeqRestorer<T> {
    pub fn new(model: Seq2Seq<T>, alphabet: CharAlphabet, vocab: Option<WordVocab>) -> Result<Self> {
        if model.config.alphabet_size != alphabet.len() {
            return Err(Error::Format(format!(
                "model expects {} symbols, alphabet has {}",
                model.config.alphabet_size,
                alphabet.len()
            )));
        }
        if model.config.variant.uses_words() {
            match &vocab {
                Some(v) if v.len() == model.config.vocab_size => {}
                _ => return Err(Error::Format("word vocabulary does not match the model".into())),
            }
        }
        Ok(Self { model, alphabet, vocab })
    }

    pub fn encode(&self, text: &str) -> Result<EncodedSequence> {
        let vocab = if self.model.config.variant.uses_words() {
            self.vocab.as_ref()
        } else {
            None
        };
        encode(text, &self.alphabet, vocab)
    }

    fn stepper(&self, seq: &EncodedSequence) -> Result<Seq2SeqStepper<'_, T>> {
        let mut tape = Tape::new(false);
        let mut rng = inference_rng();
        let vars = self.model.bind(&mut tape, false)?;
        let batch = SourceBatch::new(&[seq])?;
        let enc = self.model.encode(&mut tape, &vars, &batch, &mut rng)?;
        let state = self.model.init_decoder(&mut tape, &vars, &enc)?;
        Ok(Seq2SeqStepper {
            model: &self.model,
            tape,
            vars,
            enc,
            state,
            first: true,
            rng,
        })
    }

    /// Beam search over every `?` position of an encoded input.
    pub fn beam(&self, seq: &EncodedSequence, beam: &BeamConfig) -> Result<Vec<Hypothesis>> {
        let length = seq.gap_len();
        let mut stepper = self.stepper(seq)?;
        let found = beam_search(&mut stepper, length, &self.alphabet.output_ids(), START_ID, beam)?;
        Ok(found
            .into_iter()
            .map(|(ids, log_prob, attention)| Hypothesis {
                text: self.alphabet.decode(&ids),
                log_prob,
                attention,
                ids,
            })
            .collect())
    }

    /// Teacher-forced log-probability of each candidate fill.
    pub fn score_fills(&self, seq: &EncodedSequence, fills: &[Vec<usize>]) -> Result<Vec<f64>> {
        let length = seq.gap_len();
        if fills.is_empty() {
            return Ok(Vec::new());
        }
        if fills.iter().any(|f| f.len() != length) {
            return Err(Error::InvalidArgument(format!("every fill must have length {length}")));
        }
        let mut s = self.stepper(seq)?;
        let rows = vec![0; fills.len()];
        s.state = s.state.select(&mut s.tape, &rows)?;
        s.first = false;
        let identity: Vec<usize> = (0..fills.len()).collect();
        let mut prev = vec![START_ID; fills.len()];
        let mut totals = vec![0.0; fills.len()];
        for t in 0..length {
            let scores = s.step(&identity, &prev)?;
            for (r, f) in fills.iter().enumerate() {
                totals[r] += scores.log_probs[r * scores.vocab + f[t]];
                prev[r] = f[t];
            }
        }
        Ok(totals)
    }
}

impl<T: Scalar> Restorer for Seq2SeqRestorer<T> {
    fn alphabet(&self) -> &CharAlphabet {
        &self.alphabet
    }

    fn describe(&self) -> String {
        format!("seq2seq/{}", self.model.config.variant)
    }

    fn propose(&self, masked: &str, beam: &BeamConfig) -> Result<Vec<Hypothesis>> {
        find_gap(masked)?;
        self.beam(&self.encode(masked)?, beam)
    }

    fn score(&self, masked: &str, fill: &str) -> Result<f64> {
        find_gap(masked)?;
        let ids = self.alphabet.encode_str(fill)?;
        Ok(self.score_fills(&self.encode(masked)?, &[ids])?[0])
    }
}

/// The character language model used as a restorer: candidates are ranked
/// by the probability of the whole text (left context, fill, right context).
#[derive(Debug, Clone)]
pub struct LmRestorer<T> {
    pub model: CharLm<T>,
    pub alphabet: CharAlphabet,
}

struct LmStepper<'a, T: Scalar> {
    model: &'a CharLm<T>,
    tape: Tape<T>,
    vars: LmVars,
    state: LmState,
    pending: Option<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> LmStepper<'_, T> {
    fn feed(&mut self, ids: &[usize]) -> Result<Vec<f64>> {
        let (logits, state) = self
            .model
            .step(&mut self.tape, &self.vars, ids, &self.state, &mut self.rng)?;
        self.state = state;
        Ok(log_softmax_rows(self.tape.value(logits)))
    }
}

impl<T: Scalar> BeamStepper for LmStepper<'_, T> {
    fn step(&mut self, parents: &[usize], prev: &[usize]) -> Result<StepScores> {
        let vocab = self.model.config.alphabet_size;
        let log_probs = match self.pending.take() {
            Some(lp) => lp,
            None => {
                self.state = self.state.select(&mut self.tape, parents)?;
                self.feed(prev)?
            }
        };
        Ok(StepScores {
            log_probs,
            vocab,
            attention: Vec::new(),
        })
    }
}

impl<T: Scalar> LmRestorer<T> {
    pub fn new(model: CharLm<T>, alphabet: CharAlphabet) -> Result<Self> {
        if model.config.alphabet_size != alphabet.len() {
            return Err(Error::Format("language model does not match the alphabet".into()));
        }
        Ok(Self { model, alphabet })
    }

    /// Runs the left context and returns the stepper positioned before the
    /// gap plus the log-probability of the left context itself.
    fn prefix(&self, left: &[usize]) -> Result<(LmStepper<'_, T>, f64)> {
        let mut tape = Tape::new(false);
        let vars = self.model.bind(&mut tape, false)?;
        let state = self.model.zero_state(&mut tape, 1);
        let mut s = LmStepper {
            model: &self.model,
            tape,
            vars,
            state,
            pending: None,
            rng: inference_rng(),
        };
        let v = self.model.config.alphabet_size;
        let mut lp = s.feed(&[START_ID])?;
        let mut total = 0.0;
        for &c in left {
            total += lp[c];
            lp = s.feed(&[c])?;
        }
        debug_assert_eq!(lp.len(), v);
        s.pending = Some(lp);
        Ok((s, total))
    }

    /// Log-probability of `fill` followed by `right` for every fill, given
    /// the state after the left context.
    fn continue_scores(&self, left: &[usize], fills: &[Vec<usize>], right: &[usize]) -> Result<Vec<f64>> {
        let (mut s, prefix_lp) = self.prefix(left)?;
        let first = s.pending.take().expect("prefix leaves pending scores");
        let n = fills.len();
        s.state = s.state.select(&mut s.tape, &vec![0; n])?;
        let v = self.model.config.alphabet_size;
        let mut totals = vec![prefix_lp; n];
        let mut lp: Vec<f64> = (0..n).flat_map(|_| first.iter().copied()).collect();
        let len = fills.first().map_or(0, |f| f.len()) + right.len();
        for t in 0..len {
            let next: Vec<usize> = fills
                .iter()
                .map(|f| if t < f.len() { f[t] } else { right[t - f.len()] })
                .collect();
            for (r, &c) in next.iter().enumerate() {
                totals[r] += lp[r * v + c];
            }
            if t + 1 < len {
                lp = s.feed(&next)?;
            }
        }
        Ok(totals)
    }

    fn split(&self, masked: &str) -> Result<(Vec<usize>, usize, Vec<usize>)> {
        let (start, len) = find_gap(masked)?;
        let ids = self.alphabet.encode_str(masked)?;
        Ok((ids[..start].to_vec(), len, ids[start + len..].to_vec()))
    }
}

impl<T: Scalar> Restorer for LmRestorer<T> {
    fn alphabet(&self) -> &CharAlphabet {
        &self.alphabet
    }

    fn describe(&self) -> String {
        "lm".into()
    }

    fn propose(&self, masked: &str, beam: &BeamConfig) -> Result<Vec<Hypothesis>> {
        beam.validate()?;
        let (left, len, right) = self.split(masked)?;
        let (mut stepper, _) = self.prefix(&left)?;
        let keep = BeamConfig {
            beam_width: beam.beam_width,
            top_k: beam.beam_width,
        };
        let found = beam_search(&mut stepper, len, &self.alphabet.output_ids(), START_ID, &keep)?;
        drop(stepper);
        let fills: Vec<Vec<usize>> = found.into_iter().map(|(ids, _, _)| ids).collect();
        let scores = self.continue_scores(&left, &fills, &right)?;
        let mut hyps: Vec<Hypothesis> = fills
            .into_iter()
            .zip(scores)
            .map(|(ids, log_prob)| Hypothesis {
                text: self.alphabet.decode(&ids),
                log_prob,
                attention: Vec::new(),
                ids,
            })
            .collect();
        sort_hypotheses(&mut hyps);
        hyps.truncate(beam.top_k);
        Ok(hyps)
    }

    fn score(&self, masked: &str, fill: &str) -> Result<f64> {
        let (left, len, right) = self.split(masked)?;
        let ids = self.alphabet.encode_str(fill)?;
        if ids.len() != len {
            return Err(Error::InvalidArgument(format!("fill must have length {len}")));
        }
        Ok(self.continue_scores(&left, &[ids], &right)?[0])
    }
}

/// Builds the matching restorer for a checkpoint, in single precision.
pub fn restorer_from_checkpoint(ckpt: Checkpoint) -> Result<Box<dyn Restorer>> {
    match ckpt.model {
        ModelSpec::Seq2seq(config) => {
            let model = Seq2Seq::from_parts(config, ckpt.params)?;
            Ok(Box::new(Seq2SeqRestorer::new(model, ckpt.alphabet, ckpt.vocab)?))
        }
        ModelSpec::Lm(config) => {
            let model = CharLm::from_parts(config, ckpt.params)?;
            Ok(Box::new(LmRestorer::new(model, ckpt.alphabet)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_centered_and_clamped() {
        assert_eq!(centered_window(100, 50, 2, 20), (41, 61));
        assert_eq!(centered_window(100, 1, 2, 20), (0, 20));
        assert_eq!(centered_window(100, 97, 3, 20), (80, 100));
        assert_eq!(centered_window(30, 10, 5, 1000), (0, 30));
        assert_eq!(centered_window(30, 10, 5, 2), (10, 15));
    }

    #[test]
    fn gap_must_be_single_run() {
        assert_eq!(find_gap("ab??c").unwrap(), (2, 2));
        assert!(find_gap("abc").is_err());
        assert!(find_gap("a?b?").is_err());
    }
}
