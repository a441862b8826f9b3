use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::lstm::LstmLayer;
use crate::model::params::{Bound, Manifest, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{EncodedSequence, PAD_ID, START_ID};

/// Encoder flavour: direction count and whether the word stream is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Uni,
    Bi,
    BiWord,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Uni, Variant::Bi, Variant::BiWord];

    pub fn directions(self) -> usize {
        match self {
            Variant::Uni => 1,
            Variant::Bi | Variant::BiWord => 2,
        }
    }

    pub fn uses_words(self) -> bool {
        self == Variant::BiWord
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Uni => "uni",
            Variant::Bi => "bi",
            Variant::BiWord => "bi-word",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uni" => Ok(Variant::Uni),
            "bi" => Ok(Variant::Bi),
            "bi-word" => Ok(Variant::BiWord),
            _ => Err(Error::InvalidArgument(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub hidden: usize,
    pub char_dim: usize,
    pub word_dim: usize,
    pub dropout: f64,
    pub alphabet_size: usize,
    /// Word vocabulary size including reserved entries; 0 without words.
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, alphabet_size: usize, vocab_size: usize) -> Self {
        Self {
            variant,
            layers: 2,
            hidden: 512,
            char_dim: 128,
            word_dim: 128,
            dropout: 0.2,
            alphabet_size,
            vocab_size: if variant.uses_words() { vocab_size } else { 0 },
        }
    }

    pub fn encoder_width(&self) -> usize {
        self.hidden * self.variant.directions()
    }

    fn input_dim(&self) -> usize {
        self.char_dim + if self.variant.uses_words() { self.word_dim } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.layers == 0 || self.hidden == 0 || self.char_dim == 0 {
            return bad("layers, hidden and char_dim must be positive");
        }
        if self.alphabet_size <= START_ID {
            return bad("alphabet too small");
        }
        if self.variant.uses_words() && (self.word_dim == 0 || self.vocab_size < 2) {
            return bad("bi-word needs a word vocabulary and word_dim > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn manifest(&self) -> Manifest {
        let (h, d, v) = (self.hidden, self.encoder_width(), self.alphabet_size);
        let mut m: Manifest = vec![("embed.char".into(), vec![v, self.char_dim])];
        if self.variant.uses_words() {
            m.push(("embed.word".into(), vec![self.vocab_size, self.word_dim]));
        }
        let dirs: &[&str] = if self.variant.directions() == 2 {
            &["fwd", "bwd"]
        } else {
            &["fwd"]
        };
        for l in 0..self.layers {
            let input = if l == 0 { self.input_dim() } else { d };
            for dir in dirs {
                m.push((format!("encoder.l{l}.{dir}.weight"), vec![input + h, 4 * h]));
                m.push((format!("encoder.l{l}.{dir}.bias"), vec![4 * h]));
            }
        }
        for l in 0..self.layers {
            for part in ["h", "c"] {
                m.push((format!("bridge.l{l}.{part}.weight"), vec![d, h]));
                m.push((format!("bridge.l{l}.{part}.bias"), vec![h]));
            }
        }
        m.push(("decoder.embed".into(), vec![v, self.char_dim]));
        for l in 0..self.layers {
            let input = if l == 0 { self.char_dim + h } else { h };
            m.push((format!("decoder.l{l}.weight"), vec![input + h, 4 * h]));
            m.push((format!("decoder.l{l}.bias"), vec![4 * h]));
        }
        m.push(("attention.weight".into(), vec![h, d]));
        m.push(("attention.combine.weight".into(), vec![h + d, h]));
        m.push(("attention.combine.bias".into(), vec![h]));
        m.push(("output.weight".into(), vec![h, v]));
        m.push(("output.bias".into(), vec![v]));
        m
    }
}

/// Padded, time-major view of a batch of encoded inputs.
#[derive(Debug, Clone)]
pub struct SourceBatch {
    pub lengths: Vec<usize>,
    pub char_ids: Vec<Vec<usize>>,
    pub word_ids: Vec<Vec<usize>>,
}

impl SourceBatch {
    pub fn new(seqs: &[&EncodedSequence]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidArgument("empty source sequence".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let steps = *lengths.iter().max().expect("non-empty batch");
        let column = |t: usize, f: &dyn Fn(&EncodedSequence) -> &[usize], pad: usize| -> Vec<usize> {
            seqs.iter().map(|s| f(s).get(t).copied().unwrap_or(pad)).collect()
        };
        let char_ids = (0..steps).map(|t| column(t, &|s| &s.char_ids, PAD_ID)).collect();
        let word_ids = (0..steps)
            .map(|t| column(t, &|s| &s.word_ids, crate::vocab::NO_WORD))
            .collect();
        Ok(Self {
            lengths,
            char_ids,
            word_ids,
        })
    }

    pub fn steps(&self) -> usize {
        self.char_ids.len()
    }
}

/// Encoder states for a batch.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[B, T * width]`: position `t` occupies columns `t*width..(t+1)*width`.
    pub memory: Var,
    pub lengths: Vec<usize>,
    pub steps: usize,
    pub width: usize,
    /// Per layer, directions concatenated: `[B, width]`.
    pub final_h: Vec<Var>,
    pub final_c: Vec<Var>,
}

/// Recurrent decoder state plus the previous attentional output.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    pub feed: Var,
}

impl DecoderState {
    /// Row `i` of the result is row `rows[i]` of `self`.
    pub fn select<T: Scalar>(&self, tape: &mut Tape<T>, rows: &[usize]) -> Result<Self> {
        let mut pick = |v: Var| tape.gather_rows(v, rows);
        Ok(Self {
            h: self.h.iter().map(|&v| pick(v)).collect::<std::result::Result<_, _>>()?,
            c: self.c.iter().map(|&v| pick(v)).collect::<std::result::Result<_, _>>()?,
            feed: pick(self.feed)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Var,
    pub attention: Var,
    pub state: DecoderState,
}

/// Model parameters resolved to tape variables.
#[derive(Debug, Clone)]
pub struct Seq2SeqVars {
    bound: Bound,
    char_embed: Var,
    word_embed: Option<Var>,
    encoder: Vec<Vec<LstmLayer>>,
    bridge: Vec<[(Var, Var); 2]>,
    decoder_embed: Var,
    decoder: Vec<LstmLayer>,
    attention: Var,
    combine: (Var, Var),
    output: (Var, Var),
}

impl Seq2SeqVars {
    pub fn bound(&self) -> &Bound {
        &self.bound
    }
}

/// Character (+ word) encoder-decoder with bilinear attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Scalar> Seq2Seq<T> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config.manifest(), rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters<T>) -> Result<Self> {
        config.validate()?;
        params.check_manifest(&config.manifest())?;
        Ok(Self { config, params })
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Seq2SeqVars> {
        self.vars(self.params.bind(tape, requires_grad))
    }

    /// Resolves already recorded parameters.
    pub fn vars(&self, bound: Bound) -> Result<Seq2SeqVars> {
        let h = self.config.hidden;
        let dirs: &[&str] = if self.config.variant.directions() == 2 {
            &["fwd", "bwd"]
        } else {
            &["fwd"]
        };
        let mut encoder = Vec::new();
        let mut bridge = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..self.config.layers {
            encoder.push(
                dirs.iter()
                    .map(|d| LstmLayer::bind(&bound, &format!("encoder.l{l}.{d}"), h))
                    .collect::<Result<Vec<_>>>()?,
            );
            let pair = |p: &str| -> Result<(Var, Var)> {
                Ok((
                    bound.var(&format!("bridge.l{l}.{p}.weight"))?,
                    bound.var(&format!("bridge.l{l}.{p}.bias"))?,
                ))
            };
            bridge.push([pair("h")?, pair("c")?]);
            decoder.push(LstmLayer::bind(&bound, &format!("decoder.l{l}"), h)?);
        }
        Ok(Seq2SeqVars {
            char_embed: bound.var("embed.char")?,
            word_embed: if self.config.variant.uses_words() {
                Some(bound.var("embed.word")?)
            } else {
                None
            },
            encoder,
            bridge,
            decoder_embed: bound.var("decoder.embed")?,
            decoder,
            attention: bound.var("attention.weight")?,
            combine: (
                bound.var("attention.combine.weight")?,
                bound.var("attention.combine.bias")?,
            ),
            output: (bound.var("output.weight")?, bound.var("output.bias")?),
            bound,
        })
    }

    /// Runs the stacked (bi)directional encoder over a padded batch.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        vars: &Seq2SeqVars,
        batch: &SourceBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<EncoderOutput> {
        let p = self.config.dropout;
        let mut xs = Vec::with_capacity(batch.steps());
        for t in 0..batch.steps() {
            let chars = tape.gather_rows(vars.char_embed, &batch.char_ids[t])?;
            let x = match vars.word_embed {
                Some(we) => {
                    let words = tape.gather_rows(we, &batch.word_ids[t])?;
                    tape.concat(&[chars, words])?
                }
                None => chars,
            };
            xs.push(x);
        }
        let mut final_h = Vec::with_capacity(self.config.layers);
        let mut final_c = Vec::with_capacity(self.config.layers);
        for layer in &vars.encoder {
            let inputs: Vec<Var> = xs
                .iter()
                .map(|&x| tape.dropout(x, p, rng))
                .collect::<std::result::Result<_, _>>()?;
            let mut outs: Vec<Vec<Var>> = Vec::with_capacity(layer.len());
            let mut hs = Vec::new();
            let mut cs = Vec::new();
            for (dir, lstm) in layer.iter().enumerate() {
                let (o, h, c) = lstm.run(tape, &inputs, &batch.lengths, dir == 1)?;
                outs.push(o);
                hs.push(h);
                cs.push(c);
            }
            xs = if outs.len() == 1 {
                outs.pop().expect("one direction")
            } else {
                (0..batch.steps())
                    .map(|t| tape.concat(&[outs[0][t], outs[1][t]]))
                    .collect::<std::result::Result<_, _>>()?
            };
            final_h.push(if hs.len() == 1 { hs[0] } else { tape.concat(&hs)? });
            final_c.push(if cs.len() == 1 { cs[0] } else { tape.concat(&cs)? });
        }
        let memory = tape.concat(&xs)?;
        Ok(EncoderOutput {
            memory,
            lengths: batch.lengths.clone(),
            steps: batch.steps(),
            width: self.config.encoder_width(),
            final_h,
            final_c,
        })
    }

    /// Maps the final encoder state of each layer to the decoder's initial
    /// state through learned linear maps.
    pub fn init_decoder(&self, tape: &mut Tape<T>, vars: &Seq2SeqVars, enc: &EncoderOutput) -> Result<DecoderState> {
        let mut h = Vec::with_capacity(self.config.layers);
        let mut c = Vec::with_capacity(self.config.layers);
        for (l, [(wh, bh), (wc, bc)]) in vars.bridge.iter().enumerate() {
            let ph = tape.matmul(enc.final_h[l], *wh)?;
            let ph = tape.add(ph, *bh)?;
            h.push(tape.tanh(ph)?);
            let pc = tape.matmul(enc.final_c[l], *wc)?;
            c.push(tape.add(pc, *bc)?);
        }
        let rows = enc.lengths.len();
        let feed = tape.constant(Tensor::zeros(&[rows, self.config.hidden]));
        Ok(DecoderState { h, c, feed })
    }

    /// One decoder step for a batch of previous characters.
    ///
    /// `enc` may hold a single row shared by every decoder row (beam search)
    /// or one row per decoder row.
    pub fn decode_step(
        &self,
        tape: &mut Tape<T>,
        vars: &Seq2SeqVars,
        prev: &[usize],
        state: &DecoderState,
        enc: &EncoderOutput,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutput> {
        let p = self.config.dropout;
        let emb = tape.gather_rows(vars.decoder_embed, prev)?;
        let mut x = tape.concat(&[emb, state.feed])?;
        let mut h = Vec::with_capacity(vars.decoder.len());
        let mut c = Vec::with_capacity(vars.decoder.len());
        for (l, layer) in vars.decoder.iter().enumerate() {
            let xd = tape.dropout(x, p, rng)?;
            let (nh, nc) = layer.step(tape, xd, state.h[l], state.c[l])?;
            h.push(nh);
            c.push(nc);
            x = nh;
        }
        let top = x;
        let query = tape.matmul(top, vars.attention)?;
        let scores = tape.attention_scores(enc.memory, query)?;
        let valid: Vec<usize> = if enc.lengths.len() == prev.len() {
            enc.lengths.clone()
        } else {
            vec![enc.lengths[0]; prev.len()]
        };
        let attention = tape.softmax(scores, Some(&valid))?;
        let context = tape.attention_context(attention, enc.memory)?;
        let joined = tape.concat(&[top, context])?;
        let combined = tape.matmul(joined, vars.combine.0)?;
        let combined = tape.add(combined, vars.combine.1)?;
        let feed = tape.tanh(combined)?;
        let out_in = tape.dropout(feed, p, rng)?;
        let logits = tape.matmul(out_in, vars.output.0)?;
        let logits = tape.add(logits, vars.output.1)?;
        Ok(StepOutput {
            logits,
            attention,
            state: DecoderState { h, c, feed },
        })
    }

    /// Mean per-step cross-entropy over the gap characters, averaged over
    /// the batch.
    ///
    /// At each step after the first, the fed-back character is the model's
    /// own argmax prediction with probability `scheduled_p` and the ground
    /// truth otherwise.
    pub fn forward_loss(
        &self,
        tape: &mut Tape<T>,
        vars: &Seq2SeqVars,
        examples: &[(&EncodedSequence, &[usize])],
        scheduled_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for (seq, target) in examples {
            if target.is_empty() || target.len() != seq.gap_len() {
                return Err(Error::InvalidArgument(format!(
                    "target length {} does not match {} masked positions",
                    target.len(),
                    seq.gap_len()
                )));
            }
            if let Some(&bad) = target.iter().find(|&&t| t >= self.config.alphabet_size) {
                return Err(Error::InvalidArgument(format!("target id {bad} outside the alphabet")));
            }
        }
        let seqs: Vec<&EncodedSequence> = examples.iter().map(|(s, _)| *s).collect();
        let batch = SourceBatch::new(&seqs)?;
        let enc = self.encode(tape, vars, &batch, rng)?;
        let mut state = self.init_decoder(tape, vars, &enc)?;
        let b = examples.len();
        let steps = examples.iter().map(|(_, t)| t.len()).max().expect("non-empty");
        let mut prev = vec![START_ID; b];
        let mut loss: Option<Var> = None;
        let denom = T::from_usize_lossy(b);
        for s in 0..steps {
            let out = self.decode_step(tape, vars, &prev, &state, &enc, rng)?;
            let targets: Vec<usize> = examples.iter().map(|(_, t)| t.get(s).copied().unwrap_or(0)).collect();
            let weights: Vec<T> = examples
                .iter()
                .map(|(_, t)| {
                    if s < t.len() {
                        T::one() / (T::from_usize_lossy(t.len()) * denom)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let ce = tape.cross_entropy(out.logits, &targets, &weights)?;
            loss = Some(match loss {
                Some(l) => tape.add(l, ce)?,
                None => ce,
            });
            if s + 1 < steps {
                let logits = tape.value(out.logits);
                for (row, slot) in prev.iter_mut().enumerate() {
                    let sampled = scheduled_p > 0.0 && rng.gen::<f64>() < scheduled_p;
                    *slot = if sampled {
                        argmax_output(logits.row(row))
                    } else {
                        targets[row]
                    };
                }
            }
            state = out.state;
        }
        Ok(loss.expect("at least one step"))
    }
}

/// Highest-scoring emittable character (ties to the lower index).
pub fn argmax_output<T: Scalar>(logits: &[T]) -> usize {
    let mut best = None::<(usize, T)>;
    for (i, &v) in logits.iter().enumerate() {
        if matches!(
            i,
            crate::vocab::PAD_ID | START_ID | crate::vocab::MISSING_ID | crate::vocab::PREDICT_ID
        ) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i)
}
