mod common;

use common::tiny_restorer;
use lacuna_core::autodiff::Tape;
use lacuna_core::beam::{scale_attention_for_viz, BeamConfig};
use lacuna_core::model::Variant;
use lacuna_core::model::{argmax_output, SourceBatch};
use lacuna_core::vocab::START_ID;
use lacuna_core::Restorer;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn all_fills(outputs: &[usize], len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                outputs.iter().map(move |&o| {
                    let mut q = p.clone();
                    q.push(o);
                    q
                })
            })
            .collect();
    }
    out
}

#[test]
fn exhaustive_width_matches_enumeration() {
    let r = tiny_restorer::<f64>(Variant::Bi, &[], 17);
    let outputs = r.alphabet.output_ids();
    let seq = r.encode("ab??c").unwrap();
    let fills = all_fills(&outputs, 2);
    let scores = r.score_fills(&seq, &fills).unwrap();
    let mut oracle: Vec<(Vec<usize>, f64)> = fills.into_iter().zip(scores).collect();
    oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let width = oracle.len();
    let hyps = r.beam(&seq, &BeamConfig::new(width, 20).unwrap()).unwrap();
    assert_eq!(hyps.len(), 20);
    for (h, (ids, lp)) in hyps.iter().zip(&oracle) {
        assert_eq!(&h.ids, ids);
        assert!((h.log_prob - lp).abs() < 1e-10);
    }
}

#[test]
fn width_one_is_greedy() {
    let r = tiny_restorer::<f64>(Variant::BiWord, &["ab cd"], 4);
    let seq = r.encode("ab c???").unwrap();
    let hyps = r.beam(&seq, &BeamConfig::new(1, 1).unwrap()).unwrap();

    let mut tape = Tape::new(false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vars = r.model.bind(&mut tape, false).unwrap();
    let enc = r
        .model
        .encode(&mut tape, &vars, &SourceBatch::new(&[&seq]).unwrap(), &mut rng)
        .unwrap();
    let mut state = r.model.init_decoder(&mut tape, &vars, &enc).unwrap();
    let mut prev = START_ID;
    let mut greedy = Vec::new();
    for _ in 0..3 {
        let out = r
            .model
            .decode_step(&mut tape, &vars, &[prev], &state, &enc, &mut rng)
            .unwrap();
        prev = argmax_output(tape.value(out.logits).data());
        greedy.push(prev);
        state = out.state;
    }
    assert_eq!(hyps[0].ids, greedy);
}

#[test]
fn returns_min_of_top_k_and_reachable() {
    let r = tiny_restorer::<f32>(Variant::Uni, &[], 3);
    let n = r.alphabet.output_ids().len();
    let hyps = r.propose("abc?d", &BeamConfig::default()).unwrap();
    assert_eq!(hyps.len(), 20.min(n));
    let hyps = r.propose("abc?????d", &BeamConfig::default()).unwrap();
    assert_eq!(hyps.len(), 20);
    for h in &hyps {
        assert_eq!(h.text.chars().count(), 5);
        assert_eq!(h.attention.len(), 5);
        assert!(h.log_prob <= 0.0 && h.log_prob.is_finite());
        assert!(!h.text.contains(['-', '?']));
    }
    assert!(hyps.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
}

#[test]
fn rescoring_reproduces_beam_scores() {
    let r = tiny_restorer::<f32>(Variant::BiWord, &["alpha beta"], 12);
    let masked = "alpha b??a gamma";
    let hyps = r.propose(masked, &BeamConfig::new(30, 10).unwrap()).unwrap();
    for h in &hyps {
        let s = r.score(masked, &h.text).unwrap();
        assert!((s - h.log_prob).abs() < 1e-4, "{s} vs {}", h.log_prob);
    }
}

#[test]
fn decoding_is_deterministic() {
    let r = tiny_restorer::<f32>(Variant::Bi, &[], 12);
    let a = r.propose("abc de??f", &BeamConfig::default()).unwrap();
    let b = r.propose("abc de??f", &BeamConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn no_gap_is_an_error() {
    let r = tiny_restorer::<f32>(Variant::Bi, &[], 12);
    assert!(r.propose("abc", &BeamConfig::default()).is_err());
    let seq = r.encode("abc").unwrap();
    assert!(r.beam(&seq, &BeamConfig::default()).is_err());
}

#[test]
fn hypotheses_serialize_with_text_score_and_attention() {
    let r = tiny_restorer::<f32>(Variant::Uni, &[], 1);
    let hyps = r.propose("ab?", &BeamConfig::new(3, 1).unwrap()).unwrap();
    let v = serde_json::to_value(&hyps[0]).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort();
    assert_eq!(keys, ["attention", "log_prob", "text"]);
}

proptest! {
    #[test]
    fn scaled_attention_lies_in_unit_interval(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..5),
        mask in prop::collection::vec(any::<bool>(), 6),
    ) {
        let s = scale_attention_for_viz(&rows, &mask).unwrap();
        for (row, orig) in s.iter().zip(&rows) {
            for region in [true, false] {
                let vals: Vec<f64> = row.iter().zip(&mask).filter(|(_, &m)| m == region).map(|(v, _)| *v).collect();
                let raw: Vec<f64> = orig.iter().zip(&mask).filter(|(_, &m)| m == region).map(|(v, _)| *v).collect();
                prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
                let distinct = raw.iter().any(|v| *v != raw[0]);
                if distinct {
                    prop_assert!(vals.contains(&0.0) && vals.contains(&1.0));
                }
            }
        }
    }
}
