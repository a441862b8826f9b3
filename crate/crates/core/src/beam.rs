//! Fixed-length beam search and attention scaling for display.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub top_k: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 100,
            top_k: 20,
        }
    }
}

impl BeamConfig {
    pub fn new(beam_width: usize, top_k: usize) -> Result<Self> {
        let c = Self { beam_width, top_k };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.beam_width {
            return Err(Error::InvalidArgument(format!(
                "beam needs 1 <= top_k ({}) <= beam_width ({})",
                self.top_k, self.beam_width
            )));
        }
        Ok(())
    }
}

/// One ranked restoration of a gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    pub log_prob: f64,
    /// One row per decoded character, one column per source position.
    /// Empty for models without attention.
    pub attention: Vec<Vec<f64>>,
    #[serde(skip)]
    pub ids: Vec<usize>,
}

/// Scores produced by one decoding step for every live beam.
#[derive(Debug, Clone)]
pub struct StepScores {
    /// `rows * vocab` log-probabilities, row-major.
    pub log_probs: Vec<f64>,
    pub vocab: usize,
    /// `rows * source_len` attention weights, or empty.
    pub attention: Vec<f64>,
}

/// A model that can be stepped on a set of beams.
pub trait BeamStepper {
    /// Advances every beam by one character. Row `i` of the new beam set
    /// continues row `parents[i]` of the previous call after consuming
    /// `prev[i]`; on the first call `parents` is `[0]` and `prev` holds the
    /// start symbol.
    fn step(&mut self, parents: &[usize], prev: &[usize]) -> Result<StepScores>;
}

#[derive(Debug, Clone)]
struct Beam {
    ids: Vec<usize>,
    score: f64,
    attention: Vec<Vec<f64>>,
}

fn rank(a_score: f64, a_ids: &[usize], b_score: f64, b_ids: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_ids.cmp(b_ids))
}

/// A decoded id sequence with its total log-probability and per-step attention rows.
pub type RawHypothesis = (Vec<usize>, f64, Vec<Vec<f64>>);

/// Expands exactly `length` steps keeping the `beam_width` best prefixes by
/// total log-probability (ties to the lexicographically smaller id
/// sequence) and returns the best `top_k` as `(ids, log_prob, attention)`.
pub fn beam_search(
    stepper: &mut dyn BeamStepper,
    length: usize,
    outputs: &[usize],
    start_id: usize,
    config: &BeamConfig,
) -> Result<Vec<RawHypothesis>> {
    config.validate()?;
    if length == 0 {
        return Err(Error::InvalidArgument("nothing to predict: gap length is 0".into()));
    }
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("no output symbols".into()));
    }
    let mut beams = vec![Beam {
        ids: Vec::new(),
        score: 0.0,
        attention: Vec::new(),
    }];
    let mut parents = vec![0usize];
    let mut prev = vec![start_id];
    for _ in 0..length {
        let scores = stepper.step(&parents, &prev)?;
        let v = scores.vocab;
        if scores.log_probs.len() != beams.len() * v {
            return Err(Error::Format("stepper returned the wrong number of rows".into()));
        }
        let src = if scores.attention.is_empty() {
            0
        } else {
            scores.attention.len() / beams.len()
        };
        let mut cands: Vec<(usize, usize, f64)> = Vec::with_capacity(beams.len() * outputs.len());
        for (b, beam) in beams.iter().enumerate() {
            let row = &scores.log_probs[b * v..(b + 1) * v];
            for &o in outputs {
                let s = beam.score + row[o];
                if !s.is_finite() {
                    return Err(Error::Format("non-finite beam score".into()));
                }
                cands.push((b, o, s));
            }
        }
        let cmp = |x: &(usize, usize, f64), y: &(usize, usize, f64)| {
            y.2.partial_cmp(&x.2)
                .unwrap_or(Ordering::Equal)
                .then_with(|| beams[x.0].ids.cmp(&beams[y.0].ids))
                .then_with(|| x.1.cmp(&y.1))
        };
        if cands.len() > config.beam_width {
            cands.select_nth_unstable_by(config.beam_width, cmp);
        }
        cands.truncate(config.beam_width);
        cands.sort_by(cmp);
        let next: Vec<Beam> = cands
            .iter()
            .map(|&(b, o, s)| {
                let mut ids = beams[b].ids.clone();
                ids.push(o);
                let mut attention = beams[b].attention.clone();
                if src > 0 {
                    attention.push(scores.attention[b * src..(b + 1) * src].to_vec());
                }
                Beam {
                    ids,
                    score: s,
                    attention,
                }
            })
            .collect();
        parents = cands.iter().map(|c| c.0).collect();
        prev = cands.iter().map(|c| c.1).collect();
        beams = next;
    }
    beams.sort_by(|a, b| rank(a.score, &a.ids, b.score, &b.ids));
    beams.truncate(config.top_k);
    Ok(beams.into_iter().map(|b| (b.ids, b.score, b.attention)).collect())
}

/// Re-sorts hypotheses by descending log-probability with the
/// lexicographic tie rule.
pub fn sort_hypotheses(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| rank(a.log_prob, &a.ids, b.log_prob, &b.ids));
}

/// Min-max scales each attention row to `[0, 1]`, separately over the
/// masked columns and over the remaining columns. A region whose weights
/// are all equal maps to 0.
pub fn scale_attention_for_viz(rows: &[Vec<f64>], mask: &[bool]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|row| {
            if row.len() != mask.len() {
                return Err(Error::InvalidArgument(format!(
                    "attention row of length {} for a mask of length {}",
                    row.len(),
                    mask.len()
                )));
            }
            let mut out = vec![0.0; row.len()];
            for region in [true, false] {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for (&w, _) in row.iter().zip(mask).filter(|(_, &m)| m == region) {
                    lo = lo.min(w);
                    hi = hi.max(w);
                }
                let span = hi - lo;
                for ((o, &w), _) in out.iter_mut().zip(row).zip(mask).filter(|(_, &m)| m == region) {
                    *o = if span > 0.0 {
                        ((w - lo) / span).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                }
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed per-step distributions that ignore history.
    struct Table(Vec<Vec<f64>>, usize);

    impl BeamStepper for Table {
        fn step(&mut self, parents: &[usize], _prev: &[usize]) -> Result<StepScores> {
            let row = &self.0[self.1];
            self.1 += 1;
            Ok(StepScores {
                log_probs: parents.iter().flat_map(|_| row.iter().map(|p| p.ln())).collect(),
                vocab: row.len(),
                attention: Vec::new(),
            })
        }
    }

    #[test]
    fn two_symbol_beam_matches_enumeration() {
        let steps = vec![vec![0.6, 0.4], vec![0.3, 0.7]];
        let out = beam_search(
            &mut Table(steps.clone(), 0),
            2,
            &[0, 1],
            0,
            &BeamConfig::new(4, 4).unwrap(),
        )
        .unwrap();
        let mut all: Vec<(Vec<usize>, f64)> = Vec::new();
        for a in 0..2 {
            for b in 0..2 {
                all.push((vec![a, b], steps[0][a].ln() + steps[1][b].ln()));
            }
        }
        all.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        let got: Vec<Vec<usize>> = out.iter().map(|h| h.0.clone()).collect();
        let want: Vec<Vec<usize>> = all.iter().map(|h| h.0.clone()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let steps = vec![vec![0.5, 0.5]];
        let out = beam_search(&mut Table(steps, 0), 1, &[0, 1], 0, &BeamConfig::new(2, 2).unwrap()).unwrap();
        assert_eq!(out[0].0, vec![0]);
        assert_eq!(out[1].0, vec![1]);
    }

    #[test]
    fn zero_length_is_an_error() {
        let r = beam_search(&mut Table(vec![], 0), 0, &[0], 0, &BeamConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn top_k_above_width_is_rejected() {
        assert!(BeamConfig::new(5, 6).is_err());
        assert!(BeamConfig::new(5, 0).is_err());
    }

    #[test]
    fn masked_region_scales_independently() {
        let rows = vec![vec![0.1, 0.3, 0.2, 0.4]];
        let mask = [true, true, false, false];
        let s = scale_attention_for_viz(&rows, &mask).unwrap();
        assert_eq!(s[0], vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_row_scales_to_zero() {
        let s = scale_attention_for_viz(&[vec![0.25; 4]], &[false, true, false, true]).unwrap();
        assert_eq!(s[0], vec![0.0; 4]);
    }
}
