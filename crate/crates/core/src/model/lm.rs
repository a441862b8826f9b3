use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::lstm::LstmLayer;
use crate::model::params::{Bound, Manifest, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::START_ID;

/// Character language model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub hidden: usize,
    pub char_dim: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied when validation loss
    /// fails to improve.
    pub decay: f64,
    pub clip: f64,
    pub dropout: f64,
    pub alphabet_size: usize,
}

impl LmConfig {
    pub fn new(alphabet_size: usize) -> Self {
        Self {
            layers: 2,
            hidden: 1024,
            char_dim: 1024,
            learning_rate: 2e-3,
            decay: 0.95,
            clip: 5.0,
            dropout: 0.2,
            alphabet_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.layers > 0
            && self.hidden > 0
            && self.char_dim > 0
            && self.learning_rate > 0.0
            && self.decay > 0.0
            && self.decay <= 1.0
            && self.clip > 0.0
            && (0.0..1.0).contains(&self.dropout)
            && self.alphabet_size > START_ID;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid language model config {self:?}"
            )))
        }
    }

    pub fn manifest(&self) -> Manifest {
        let h = self.hidden;
        let mut m: Manifest = vec![("embed.char".into(), vec![self.alphabet_size, self.char_dim])];
        for l in 0..self.layers {
            let input = if l == 0 { self.char_dim } else { h };
            m.push((format!("lm.l{l}.weight"), vec![input + h, 4 * h]));
            m.push((format!("lm.l{l}.bias"), vec![4 * h]));
        }
        m.push(("output.weight".into(), vec![h, self.alphabet_size]));
        m.push(("output.bias".into(), vec![self.alphabet_size]));
        m
    }
}

#[derive(Debug, Clone)]
pub struct LmVars {
    embed: Var,
    layers: Vec<LstmLayer>,
    output: (Var, Var),
    params: Vec<Var>,
}

impl LmVars {
    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

/// Recurrent state of every layer.
#[derive(Debug, Clone)]
pub struct LmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LmState {
    pub fn select<T: Scalar>(&self, tape: &mut Tape<T>, rows: &[usize]) -> Result<Self> {
        let mut pick = |v: Var| tape.gather_rows(v, rows);
        Ok(Self {
            h: self.h.iter().map(|&v| pick(v)).collect::<std::result::Result<_, _>>()?,
            c: self.c.iter().map(|&v| pick(v)).collect::<std::result::Result<_, _>>()?,
        })
    }
}

/// Left-to-right character LSTM language model.
#[derive(Debug, Clone, PartialEq)]
pub struct CharLm<T> {
    pub config: LmConfig,
    pub params: Parameters<T>,
}

impl<T: Scalar> CharLm<T> {
    pub fn init<R: Rng + ?Sized>(config: LmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config.manifest(), rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: LmConfig, params: Parameters<T>) -> Result<Self> {
        config.validate()?;
        params.check_manifest(&config.manifest())?;
        Ok(Self { config, params })
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<LmVars> {
        self.vars(self.params.bind(tape, requires_grad))
    }

    pub fn vars(&self, bound: Bound) -> Result<LmVars> {
        let layers = (0..self.config.layers)
            .map(|l| LstmLayer::bind(&bound, &format!("lm.l{l}"), self.config.hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(LmVars {
            embed: bound.var("embed.char")?,
            layers,
            output: (bound.var("output.weight")?, bound.var("output.bias")?),
            params: bound.vars().to_vec(),
        })
    }

    pub fn zero_state(&self, tape: &mut Tape<T>, rows: usize) -> LmState {
        let zero = tape.constant(Tensor::zeros(&[rows, self.config.hidden]));
        LmState {
            h: vec![zero; self.config.layers],
            c: vec![zero; self.config.layers],
        }
    }

    /// Consumes one character per row and returns next-character logits.
    pub fn step(
        &self,
        tape: &mut Tape<T>,
        vars: &LmVars,
        ids: &[usize],
        state: &LmState,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, LmState)> {
        let p = self.config.dropout;
        let mut x = tape.gather_rows(vars.embed, ids)?;
        let mut next = LmState {
            h: Vec::with_capacity(vars.layers.len()),
            c: Vec::with_capacity(vars.layers.len()),
        };
        for (l, layer) in vars.layers.iter().enumerate() {
            let xd = tape.dropout(x, p, rng)?;
            let (h, c) = layer.step(tape, xd, state.h[l], state.c[l])?;
            next.h.push(h);
            next.c.push(c);
            x = h;
        }
        let x = tape.dropout(x, p, rng)?;
        let logits = tape.matmul(x, vars.output.0)?;
        let logits = tape.add(logits, vars.output.1)?;
        Ok((logits, next))
    }

    /// Next-character cross-entropy averaged over each window, then over
    /// the batch. Every window is read from the start symbol, so its first
    /// character is predicted too.
    pub fn loss(&self, tape: &mut Tape<T>, vars: &LmVars, windows: &[&[usize]], rng: &mut ChaCha8Rng) -> Result<Var> {
        if windows.is_empty() || windows.iter().any(|w| w.is_empty()) {
            return Err(Error::InvalidArgument("empty language model window".into()));
        }
        let b = windows.len();
        let steps = windows.iter().map(|w| w.len()).max().expect("non-empty");
        let denom = T::from_usize_lossy(b);
        let mut state = self.zero_state(tape, b);
        let mut prev = vec![START_ID; b];
        let mut total: Option<Var> = None;
        for t in 0..steps {
            let (logits, next) = self.step(tape, vars, &prev, &state, rng)?;
            let targets: Vec<usize> = windows.iter().map(|w| w.get(t).copied().unwrap_or(0)).collect();
            let weights: Vec<T> = windows
                .iter()
                .map(|w| {
                    if t < w.len() {
                        T::one() / (T::from_usize_lossy(w.len()) * denom)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let ce = tape.cross_entropy(logits, &targets, &weights)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
            state = next;
            prev = targets;
        }
        Ok(total.expect("at least one step"))
    }
}
