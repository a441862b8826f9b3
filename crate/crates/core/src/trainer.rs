//! Training example generation and the optimization loop.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, global_norm, AdamConfig, AdamState, Tape, Var};
use crate::beam::BeamConfig;
use crate::checkpoint::{Checkpoint, ModelSpec};
use crate::corpus::CleanRecord;
use crate::error::{Error, Result, TensorError};
use crate::eval::{evaluate, EvalConfig};
use crate::model::{CharLm, Parameters, Seq2Seq};
use crate::restore::{LmRestorer, Seq2SeqRestorer};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::vocab::{CharAlphabet, WordVocab, MISSING, PREDICT};

/// Length ranges for sampled contexts and targets, in characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingBounds {
    pub min_context: usize,
    pub max_context: usize,
    pub min_target: usize,
    pub max_target: usize,
}

impl Default for SamplingBounds {
    fn default() -> Self {
        Self {
            min_context: 100,
            max_context: 1000,
            min_target: 1,
            max_target: 10,
        }
    }
}

impl SamplingBounds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_context > 0
            && self.min_context <= self.max_context
            && self.min_target > 0
            && self.min_target <= self.max_target
            && self.max_target < self.min_context;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent sampling bounds {self:?}")))
        }
    }
}

/// A context window with a masked target span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub context: String,
    /// `context` with the target span replaced by `?`.
    pub input: String,
    pub target: String,
    pub gap_start: usize,
    pub gap_len: usize,
}

impl TrainingExample {
    pub fn new(context: &[char], gap_start: usize, gap_len: usize) -> Self {
        let input = context
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if i >= gap_start && i < gap_start + gap_len {
                    PREDICT
                } else {
                    c
                }
            })
            .collect();
        Self {
            context: context.iter().collect(),
            input,
            target: context[gap_start..gap_start + gap_len].iter().collect(),
            gap_start,
            gap_len,
        }
    }
}

const SPAN_TRIES: usize = 64;

/// Samples a span of length uniform in `[1, max_len]` at a uniform start,
/// resampling while it overlaps a `-`. After repeated misses it falls back
/// to a uniform choice among all clean spans. `None` when no character of
/// `chars` is clean.
pub fn sample_clean_span<R: Rng + ?Sized>(chars: &[char], max_len: usize, rng: &mut R) -> Option<(usize, usize)> {
    sample_span_in(chars, 1, max_len, rng)
}

fn sample_span_in<R: Rng + ?Sized>(
    chars: &[char],
    min_len: usize,
    max_len: usize,
    rng: &mut R,
) -> Option<(usize, usize)> {
    let max_len = max_len.min(chars.len());
    if chars.is_empty() || min_len > max_len {
        return None;
    }
    for _ in 0..SPAN_TRIES {
        let len = rng.gen_range(min_len..=max_len);
        let start = rng.gen_range(0..=chars.len() - len);
        if !chars[start..start + len].contains(&MISSING) {
            return Some((start, len));
        }
    }
    let mut clean = Vec::new();
    for len in min_len..=max_len {
        for start in 0..=chars.len() - len {
            if !chars[start..start + len].contains(&MISSING) {
                clean.push((start, len));
            }
        }
    }
    if clean.is_empty() {
        None
    } else {
        Some(clean[rng.gen_range(0..clean.len())])
    }
}

/// Draws a context window and a clean target span from one record.
///
/// Returns `Ok(None)` when the record has no usable target at all; records
/// shorter than the minimum context are an error.
pub fn sample_training_example<R: Rng + ?Sized>(
    text: &str,
    bounds: &SamplingBounds,
    rng: &mut R,
) -> Result<Option<TrainingExample>> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < bounds.min_context {
        return Err(Error::InvalidArgument(format!(
            "record of {} characters is shorter than the minimum context {}",
            chars.len(),
            bounds.min_context
        )));
    }
    if chars.iter().all(|&c| c == MISSING) {
        return Ok(None);
    }
    for _ in 0..SPAN_TRIES {
        let ctx = rng.gen_range(bounds.min_context..=bounds.max_context.min(chars.len()));
        let start = rng.gen_range(0..=chars.len() - ctx);
        let window = &chars[start..start + ctx];
        if let Some((s, l)) = sample_span_in(window, bounds.min_target, bounds.max_target, rng) {
            return Ok(Some(TrainingExample::new(window, s, l)));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip: f64,
    pub scheduled_p: f64,
    /// Steps over which the scheduled-sampling probability ramps linearly
    /// from 0 up to `scheduled_p`; 0 applies it from the first step.
    #[serde(default)]
    pub scheduled_warmup: u64,
    pub dropout: f64,
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub bounds: SamplingBounds,
    /// Multiplicative learning-rate decay applied when the validation score
    /// does not improve.
    pub lr_decay: Option<f64>,
    /// Beam used for validation decoding.
    pub valid_beam: BeamConfig,
    /// Validate on at most this many records.
    pub valid_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            clip: 5.0,
            scheduled_p: 0.5,
            scheduled_warmup: 0,
            dropout: 0.2,
            max_steps: 100_000,
            checkpoint_every: 1000,
            seed: 0,
            bounds: SamplingBounds::default(),
            lr_decay: None,
            valid_beam: BeamConfig::default(),
            valid_limit: None,
        }
    }
}

impl TrainConfig {
    /// Scheduled-sampling probability used at optimizer step `step` (1-based).
    pub fn scheduled_p_at(&self, step: u64) -> f64 {
        if step >= self.scheduled_warmup {
            self.scheduled_p
        } else {
            self.scheduled_p * step as f64 / self.scheduled_warmup as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.valid_beam.validate()?;
        let ok = self.batch_size > 0
            && self.learning_rate > 0.0
            && self.clip > 0.0
            && (0.0..=1.0).contains(&self.scheduled_p)
            && (0.0..1.0).contains(&self.dropout)
            && self.checkpoint_every > 0
            && self.lr_decay.is_none_or(|d| d > 0.0 && d <= 1.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training config {self:?}")))
        }
    }
}

/// Validation scores; `metric` is the one used for model selection
/// (lower is better).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub metric: f64,
    pub cer: Option<f64>,
    pub top20: Option<f64>,
    pub loss: Option<f64>,
}

/// A model that the training loop can optimize and checkpoint.
pub trait Trainable<T: Scalar>: Clone {
    fn params(&self) -> &Parameters<T>;
    fn params_mut(&mut self) -> &mut Parameters<T>;
    fn set_dropout(&mut self, p: f64);

    /// Records the batch loss and returns it with the parameter variables
    /// in parameter order.
    fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        batch: &[TrainingExample],
        scheduled_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)>;

    fn validate(&self, records: &[CleanRecord], config: &TrainConfig) -> Result<Validation>;

    fn spec(&self) -> ModelSpec;
    fn alphabet(&self) -> &CharAlphabet;
    fn vocab(&self) -> Option<&WordVocab>;
}

impl<T: Scalar> Trainable<T> for Seq2SeqRestorer<T> {
    fn params(&self) -> &Parameters<T> {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut Parameters<T> {
        &mut self.model.params
    }

    fn set_dropout(&mut self, p: f64) {
        self.model.config.dropout = p;
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        batch: &[TrainingExample],
        scheduled_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let vars = self.model.bind(tape, true)?;
        let seqs = batch
            .iter()
            .map(|e| self.encode(&e.input))
            .collect::<Result<Vec<_>>>()?;
        let targets = batch
            .iter()
            .map(|e| self.alphabet.encode_str(&e.target))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<_> = seqs.iter().zip(&targets).map(|(s, t)| (s, t.as_slice())).collect();
        let loss = self.model.forward_loss(tape, &vars, &pairs, scheduled_p, rng)?;
        Ok((loss, vars.bound().vars().to_vec()))
    }

    fn validate(&self, records: &[CleanRecord], config: &TrainConfig) -> Result<Validation> {
        let eval = EvalConfig {
            beam: config.valid_beam,
            max_context: config.bounds.max_context,
            max_target: config.bounds.max_target,
            limit: config.valid_limit,
            ..EvalConfig::default()
        };
        let r = evaluate(records, self, &eval)?;
        Ok(Validation {
            metric: r.cer,
            cer: Some(r.cer),
            top20: Some(r.top20),
            loss: None,
        })
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::Seq2seq(self.model.config.clone())
    }

    fn alphabet(&self) -> &CharAlphabet {
        &self.alphabet
    }

    fn vocab(&self) -> Option<&WordVocab> {
        self.vocab.as_ref()
    }
}

impl<T: Scalar> Trainable<T> for LmRestorer<T> {
    fn params(&self) -> &Parameters<T> {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut Parameters<T> {
        &mut self.model.params
    }

    fn set_dropout(&mut self, p: f64) {
        self.model.config.dropout = p;
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        batch: &[TrainingExample],
        _scheduled_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let vars = self.model.bind(tape, true)?;
        let windows = batch
            .iter()
            .map(|e| self.alphabet.encode_str(&e.context))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[usize]> = windows.iter().map(|w| w.as_slice()).collect();
        let loss = self.model.loss(tape, &vars, &refs, rng)?;
        Ok((loss, vars.params().to_vec()))
    }

    /// Mean per-character loss over the leading window of each record.
    fn validate(&self, records: &[CleanRecord], config: &TrainConfig) -> Result<Validation> {
        let limit = config.valid_limit.unwrap_or(usize::MAX);
        let mut total = 0.0;
        let mut count = 0usize;
        let mut rng = RngState::from_seed(0).rng();
        for r in records.iter().take(limit) {
            let ids = self.alphabet.encode_str(&r.text)?;
            let window = &ids[..ids.len().min(config.bounds.max_context)];
            if window.is_empty() {
                continue;
            }
            let mut tape = Tape::new(false);
            let vars = self.model.bind(&mut tape, false)?;
            let loss = self.model.loss(&mut tape, &vars, &[window], &mut rng)?;
            total += tape.value(loss).item()?.to_f64().unwrap_or(f64::NAN);
            count += 1;
        }
        let loss = if count == 0 { f64::NAN } else { total / count as f64 };
        Ok(Validation {
            metric: loss,
            cer: None,
            top20: None,
            loss: Some(loss),
        })
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::Lm(self.model.config.clone())
    }

    fn alphabet(&self) -> &CharAlphabet {
        &self.alphabet
    }

    fn vocab(&self) -> Option<&WordVocab> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub raw_grad_norm: f64,
    /// Global gradient norm actually applied (at most the clip value).
    pub grad_norm: f64,
}

/// Forward, backward, global-norm clipping and one Adam update.
pub fn train_step<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    adam: &mut AdamState<T>,
    batch: &[TrainingExample],
    config: &TrainConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let diverged = |e: Error| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::Diverged { step },
        other => other,
    };
    let mut tape = Tape::new(true);
    let (loss, vars) = model
        .batch_loss(&mut tape, batch, config.scheduled_p_at(step), rng)
        .map_err(diverged)?;
    let value = tape.value(loss).item()?.to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::Diverged { step });
    }
    let grads = tape.backward(loss).map_err(|e| diverged(e.into()))?;
    let mut g: Vec<_> = vars.iter().map(|&v| grads.tensor(v)).collect();
    let raw = clip_global_norm(&mut g, T::lit(config.clip)).map_err(|e| diverged(e.into()))?;
    let applied = global_norm(&g);
    adam.step(model.params_mut().tensors_mut().iter_mut(), &g)?;
    Ok(StepStats {
        loss: value,
        raw_grad_norm: raw.to_f64().unwrap_or(f64::NAN),
        grad_norm: applied.to_f64().unwrap_or(f64::NAN),
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    /// Mean training loss since the previous record.
    pub loss: Option<f64>,
    /// Post-clip gradient norm of the last step.
    pub grad_norm: Option<f64>,
    pub valid: Validation,
    pub learning_rate: f64,
    pub best: bool,
}

/// Where training starts: the random stream position and, when resuming,
/// the optimizer state and step counter.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub step: u64,
    pub rng: RngState,
    pub adam: Option<AdamState<T>>,
}

impl<T> TrainState<T> {
    pub fn fresh(rng: RngState) -> Self {
        Self {
            step: 0,
            rng,
            adam: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub progress: Vec<Progress>,
    /// Training loss of every step.
    pub losses: Vec<f64>,
}

fn snapshot<T: Scalar, M: Trainable<T>>(
    model: &M,
    adam: &AdamState<T>,
    step: u64,
    rng: RngState,
    config: &TrainConfig,
    progress: &Progress,
) -> Result<Checkpoint> {
    let params: Parameters<f32> = model.params().cast();
    let adam = AdamState {
        config: adam.config,
        step: adam.step,
        first: adam.first.iter().map(|t| t.cast()).collect(),
        second: adam.second.iter().map(|t| t.cast()).collect(),
    };
    let mut meta = BTreeMap::new();
    meta.insert("train_config".into(), serde_json::to_value(config)?);
    meta.insert("progress".into(), serde_json::to_value(progress)?);
    Ok(Checkpoint {
        model: model.spec(),
        alphabet: model.alphabet().clone(),
        vocab: model.vocab().cloned(),
        params,
        step,
        rng,
        adam: Some(adam),
        meta,
    })
}

/// Trains for `config.max_steps` steps, sampling each example from a
/// uniformly chosen training record. At step 0, every `checkpoint_every`
/// steps and at the end, the model is validated and a checkpoint is passed
/// to `sink`; the one with the lowest validation metric is kept as best.
pub fn fit<T: Scalar, M: Trainable<T>>(
    model: M,
    train: &[CleanRecord],
    valid: &[CleanRecord],
    config: &TrainConfig,
    start: TrainState<T>,
    sink: impl FnMut(&Checkpoint, &Progress) -> Result<()>,
) -> Result<FitOutcome> {
    config.validate()?;
    let pool: Vec<&CleanRecord> = train
        .iter()
        .filter(|r| r.text.chars().count() >= config.bounds.min_context)
        .collect();
    if pool.is_empty() && config.max_steps > start.step {
        return Err(Error::InvalidArgument(
            "no training record is long enough to sample".into(),
        ));
    }
    let bounds = config.bounds;
    let limit = 1000 * config.batch_size;
    let sampler = move |rng: &mut ChaCha8Rng| -> Result<TrainingExample> {
        for _ in 0..limit {
            let r = pool[rng.gen_range(0..pool.len())];
            if let Some(e) = sample_training_example(&r.text, &bounds, rng)? {
                return Ok(e);
            }
        }
        Err(Error::InvalidArgument("training records have no usable targets".into()))
    };
    fit_with(model, sampler, valid, config, start, sink)
}

/// [`fit`] with a caller-supplied example generator.
pub fn fit_with<T: Scalar, M: Trainable<T>>(
    mut model: M,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Result<TrainingExample>,
    valid: &[CleanRecord],
    config: &TrainConfig,
    start: TrainState<T>,
    mut sink: impl FnMut(&Checkpoint, &Progress) -> Result<()>,
) -> Result<FitOutcome> {
    config.validate()?;
    model.set_dropout(config.dropout);
    let mut rng = start.rng.rng();
    let mut adam = start.adam.unwrap_or_else(|| {
        AdamState::new(
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
            model.params().tensors(),
        )
    });
    let mut step = start.step;
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut progress = Vec::new();
    let mut losses = Vec::new();
    let mut window: (f64, usize) = (0.0, 0);
    let mut last_norm = None;
    let mut last;

    loop {
        let due = step == start.step || step.is_multiple_of(config.checkpoint_every) || step >= config.max_steps;
        if due {
            let v = model.validate(valid, config)?;
            let improved = valid.is_empty() || best.as_ref().is_none_or(|(m, _)| v.metric < *m || m.is_nan());
            if !improved {
                if let Some(d) = config.lr_decay {
                    adam.config.learning_rate *= d;
                }
            }
            let record = Progress {
                step,
                loss: (window.1 > 0).then(|| window.0 / window.1 as f64),
                grad_norm: last_norm,
                valid: v,
                learning_rate: adam.config.learning_rate,
                best: improved,
            };
            window = (0.0, 0);
            let ckpt = snapshot(
                &model,
                &adam,
                step,
                RngState::capture(start.rng.seed, &rng),
                config,
                &record,
            )?;
            sink(&ckpt, &record)?;
            if improved {
                best = Some((v.metric, ckpt.clone()));
            }
            progress.push(record);
            last = ckpt;
            if step >= config.max_steps {
                break;
            }
        }
        let batch = (0..config.batch_size)
            .map(|_| sample(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        step += 1;
        let stats = train_step(&mut model, &mut adam, &batch, config, step, &mut rng)?;
        losses.push(stats.loss);
        window.0 += stats.loss;
        window.1 += 1;
        last_norm = Some(stats.grad_norm);
    }
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(FitOutcome {
        best,
        last,
        progress,
        losses,
    })
}

/// Rebuilds a trainable seq2seq model from a checkpoint, in any precision.
pub fn seq2seq_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<Seq2SeqRestorer<T>> {
    match &ckpt.model {
        ModelSpec::Seq2seq(c) => Seq2SeqRestorer::new(
            Seq2Seq::from_parts(c.clone(), ckpt.params.cast())?,
            ckpt.alphabet.clone(),
            ckpt.vocab.clone(),
        ),
        ModelSpec::Lm(_) => Err(Error::Format("checkpoint holds a language model".into())),
    }
}

pub fn lm_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<LmRestorer<T>> {
    match &ckpt.model {
        ModelSpec::Lm(c) => LmRestorer::new(
            CharLm::from_parts(c.clone(), ckpt.params.cast())?,
            ckpt.alphabet.clone(),
        ),
        ModelSpec::Seq2seq(_) => Err(Error::Format("checkpoint holds a seq2seq model".into())),
    }
}

/// Optimizer state of a checkpoint in the working precision.
pub fn resume_state<T: Scalar>(ckpt: &Checkpoint) -> TrainState<T> {
    TrainState {
        step: ckpt.step,
        rng: ckpt.rng,
        adam: ckpt.adam.as_ref().map(|a| AdamState {
            config: a.config,
            step: a.step,
            first: a.first.iter().map(|t| t.cast()).collect(),
            second: a.second.iter().map(|t| t.cast()).collect(),
        }),
    }
}
