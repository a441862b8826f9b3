//! Metrics, held-out evaluation, the context-length sweep and iterative
//! restoration of texts with several gaps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam::{BeamConfig, Hypothesis};
use crate::corpus::CleanRecord;
use crate::error::{Error, Result};
use crate::restore::{centered_window, Restorer};
use crate::trainer::sample_clean_span;
use crate::vocab::{strip_diacritics, MISSING, PREDICT};

/// Levenshtein distance with unit costs.
pub fn edit_distance<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between prediction and target over the target length.
pub fn cer(pred: &str, target: &str) -> Result<f64> {
    let t: Vec<char> = target.chars().collect();
    if t.is_empty() {
        return Err(Error::InvalidArgument("CER of an empty target".into()));
    }
    let p: Vec<char> = pred.chars().collect();
    Ok(edit_distance(&p, &t) as f64 / t.len() as f64)
}

/// Whether `target` is among the first `k` hypotheses, ignoring accents.
pub fn top_k_hit(hyps: &[Hypothesis], target: &str, k: usize) -> bool {
    rank_of(hyps, target).is_some_and(|r| r <= k)
}

/// 1-based rank of `target` among the hypotheses, ignoring accents.
pub fn rank_of(hyps: &[Hypothesis], target: &str) -> Option<usize> {
    let t = strip_diacritics(target);
    hyps.iter().position(|h| strip_diacritics(&h.text) == t).map(|i| i + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub beam: BeamConfig,
    /// Seed of the per-record gap sampler.
    pub seed: u64,
    pub max_context: usize,
    pub max_target: usize,
    /// Evaluate only the first `limit` gaps.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            seed: 0,
            max_context: 1000,
            max_target: 10,
            limit: None,
        }
    }
}

/// A held-out gap inside a full record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalGap {
    pub id: u64,
    pub text: String,
    pub gap_start: usize,
    pub gap_len: usize,
}

impl EvalGap {
    pub fn target(&self) -> String {
        self.text.chars().skip(self.gap_start).take(self.gap_len).collect()
    }

    /// The window of at most `context` characters around the gap, with the
    /// gap replaced by `?`.
    pub fn masked_window(&self, context: usize) -> String {
        let chars: Vec<char> = self.text.chars().collect();
        let (a, b) = centered_window(chars.len(), self.gap_start, self.gap_len, context);
        (a..b)
            .map(|i| {
                if i >= self.gap_start && i < self.gap_start + self.gap_len {
                    PREDICT
                } else {
                    chars[i]
                }
            })
            .collect()
    }
}

/// One deterministic gap per record: the sampler for record `id` is the
/// ChaCha stream `id` of `seed`, so gaps do not depend on record order.
pub fn eval_gaps(records: &[CleanRecord], config: &EvalConfig) -> Vec<EvalGap> {
    let mut gaps = Vec::new();
    for r in records {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(r.id);
        let chars: Vec<char> = r.text.chars().collect();
        if let Some((gap_start, gap_len)) = sample_clean_span(&chars, config.max_target, &mut rng) {
            gaps.push(EvalGap {
                id: r.id,
                text: r.text.clone(),
                gap_start,
                gap_len,
            });
        }
        if config.limit.is_some_and(|l| gaps.len() >= l) {
            break;
        }
    }
    gaps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: u64,
    pub gap_start: usize,
    pub target: String,
    pub prediction: String,
    pub rank: Option<usize>,
    pub edit_distance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Total edit distance over total target characters.
    pub cer: f64,
    /// Fraction of gaps whose target is within the first `top_k` hypotheses.
    pub top20: f64,
    pub top_k: usize,
    pub examples: usize,
    pub records: Vec<EvalRecord>,
}

impl EvalResult {
    fn from_records(records: Vec<EvalRecord>, top_k: usize) -> Self {
        let chars: usize = records.iter().map(|r| r.target.chars().count()).sum();
        let dist: usize = records.iter().map(|r| r.edit_distance).sum();
        let hits = records.iter().filter(|r| r.rank.is_some_and(|k| k <= top_k)).count();
        let n = records.len();
        Self {
            cer: if chars == 0 { 0.0 } else { dist as f64 / chars as f64 },
            top20: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
            top_k,
            examples: n,
            records,
        }
    }
}

/// Evaluates the given gaps using at most `context` characters around each.
pub fn evaluate_gaps(
    gaps: &[EvalGap],
    restorer: &dyn Restorer,
    beam: &BeamConfig,
    context: usize,
) -> Result<EvalResult> {
    let mut records = Vec::with_capacity(gaps.len());
    for g in gaps {
        if context < g.gap_len + 1 {
            return Err(Error::InvalidArgument(format!(
                "context {context} is shorter than gap length {} plus one",
                g.gap_len
            )));
        }
        let hyps = restorer.propose(&g.masked_window(context), beam)?;
        let target = strip_diacritics(&g.target());
        let prediction = strip_diacritics(hyps.first().map_or("", |h| h.text.as_str()));
        let p: Vec<char> = prediction.chars().collect();
        let t: Vec<char> = target.chars().collect();
        records.push(EvalRecord {
            id: g.id,
            gap_start: g.gap_start,
            rank: rank_of(&hyps, &target),
            edit_distance: edit_distance(&p, &t),
            target,
            prediction,
        });
    }
    Ok(EvalResult::from_records(records, beam.top_k))
}

/// Held-out protocol: one seeded gap per record, the widest allowed
/// context centered on it, beam decoding, accent-insensitive comparison.
pub fn evaluate(records: &[CleanRecord], restorer: &dyn Restorer, config: &EvalConfig) -> Result<EvalResult> {
    let gaps = eval_gaps(records, config);
    evaluate_gaps(&gaps, restorer, &config.beam, config.max_context)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextSweepPoint {
    pub context: usize,
    pub top20: f64,
    pub cer: f64,
}

pub const SWEEP_GRID: [usize; 6] = [20, 50, 100, 200, 500, 1000];

/// The evaluation protocol repeated with the context truncated around the
/// same gaps to each requested length.
pub fn context_sweep(
    records: &[CleanRecord],
    restorer: &dyn Restorer,
    lengths: &[usize],
    config: &EvalConfig,
) -> Result<Vec<ContextSweepPoint>> {
    if let Some(&bad) = lengths.iter().find(|&&l| l < config.max_target + 1) {
        return Err(Error::InvalidArgument(format!(
            "context length {bad} is below the minimum {}",
            config.max_target + 1
        )));
    }
    let gaps = eval_gaps(records, config);
    lengths
        .iter()
        .map(|&context| {
            let r = evaluate_gaps(&gaps, restorer, &config.beam, context)?;
            Ok(ContextSweepPoint {
                context,
                top20: r.top20,
                cer: r.cer,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRestoration {
    pub start: usize,
    pub length: usize,
    pub hypotheses: Vec<Hypothesis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullRestoration {
    pub text: String,
    pub gaps: Vec<GapRestoration>,
}

/// Maximal runs of `-` as `(start, length)` in characters.
pub fn missing_runs(text: &str) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().chain(std::iter::once(&' ')).enumerate() {
        match (c == MISSING, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - s));
                start = None;
            }
            _ => {}
        }
    }
    runs
}

/// Fills every `-` run left to right, committing each gap's best
/// hypothesis before predicting the next one.
pub fn restore_full_text(
    text: &str,
    restorer: &dyn Restorer,
    beam: &BeamConfig,
    max_context: usize,
) -> Result<FullRestoration> {
    let mut chars: Vec<char> = text.chars().collect();
    if chars.contains(&PREDICT) {
        return Err(Error::InvalidArgument("mark gaps with `-`, not `?`".into()));
    }
    let mut gaps = Vec::new();
    for (start, length) in missing_runs(text) {
        let (a, b) = centered_window(chars.len(), start, length, max_context);
        let masked: String = (a..b)
            .map(|i| {
                if i >= start && i < start + length {
                    PREDICT
                } else {
                    chars[i]
                }
            })
            .collect();
        let hypotheses = restorer.propose(&masked, beam)?;
        let best = hypotheses
            .first()
            .ok_or_else(|| Error::Format("restorer returned no hypotheses".into()))?;
        for (slot, c) in chars[start..start + length].iter_mut().zip(best.text.chars()) {
            *slot = c;
        }
        gaps.push(GapRestoration {
            start,
            length,
            hypotheses,
        });
    }
    Ok(FullRestoration {
        text: chars.into_iter().collect(),
        gaps,
    })
}
