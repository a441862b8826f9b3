mod common;

use common::{letters, records};
use lacuna_core::autodiff::{finite_difference_check, AdamConfig, AdamState, Tape};
use lacuna_core::beam::BeamConfig;
use lacuna_core::model::{CharLm, LmConfig};
use lacuna_core::restore::{LmRestorer, Restorer};
use lacuna_core::rng::RngState;
use lacuna_core::trainer::{fit, train_step, SamplingBounds, TrainConfig, TrainState, Trainable, TrainingExample};
use lacuna_core::vocab::CharAlphabet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn tiny(alphabet: &CharAlphabet, seed: u64) -> LmRestorer<f64> {
    let mut cfg = LmConfig::new(alphabet.len());
    cfg.hidden = 8;
    cfg.char_dim = 6;
    cfg.dropout = 0.0;
    let lm = CharLm::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    LmRestorer::new(lm, alphabet.clone()).unwrap()
}

fn small_alphabet() -> CharAlphabet {
    CharAlphabet::with_extra("abc".chars()).unwrap()
}

#[test]
fn defaults_match_published_setup() {
    let c = LmConfig::new(50);
    assert_eq!((c.layers, c.hidden, c.char_dim), (2, 1024, 1024));
    assert_eq!((c.learning_rate, c.decay, c.clip, c.dropout), (2e-3, 0.95, 5.0, 0.2));
}

#[test]
fn untrained_loss_is_near_uniform_entropy() {
    let alphabet = letters();
    let mut lm = tiny(&alphabet, 1);
    for name in ["output.weight", "output.bias"] {
        lm.model
            .params
            .get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= 0.01);
    }
    let ids = alphabet.encode_str("alpha beta gamma").unwrap();
    let mut tape = Tape::new(false);
    let vars = lm.model.bind(&mut tape, false).unwrap();
    let loss = lm.model.loss(&mut tape, &vars, &[&ids], &mut rng()).unwrap();
    let v = tape.value(loss).item().unwrap();
    assert!((v - (alphabet.len() as f64).ln()).abs() < 0.05, "{v}");
}

#[test]
fn loss_passes_gradient_check() {
    let alphabet = small_alphabet();
    let lm = tiny(&alphabet, 2);
    let ids = alphabet.encode_str("ab-c a").unwrap();
    for name in ["embed.char", "lm.l0.weight", "lm.l1.bias", "output.weight"] {
        let x = lm.model.params.get(name).unwrap().clone();
        let err = finite_difference_check(
            |tape, v| {
                let mut bound = lm.model.params.bind(tape, false);
                bound.replace(name, v).unwrap();
                let vars = lm.model.vars(bound).unwrap();
                Ok(lm.model.loss(tape, &vars, &[&ids], &mut rng()).unwrap())
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{name}: {err}");
    }
}

#[test]
fn overfits_one_sentence() {
    let alphabet = letters();
    let mut lm = tiny(&alphabet, 3);
    let ctx: Vec<char> = "alpha beta".chars().collect();
    let ex = TrainingExample::new(&ctx, 0, 1);
    let cfg = TrainConfig {
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: 3e-2,
            ..AdamConfig::default()
        },
        lm.params().tensors(),
    );
    let mut loss = f64::INFINITY;
    for step in 1..=2000 {
        loss = train_step(&mut lm, &mut adam, std::slice::from_ref(&ex), &cfg, step, &mut rng())
            .unwrap()
            .loss;
        if loss < 0.01 {
            break;
        }
    }
    assert!(loss < 0.01, "{loss}");
}

fn all_fills(n: usize, len: usize, outputs: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                outputs.iter().map(move |&o| {
                    let mut q = p.clone();
                    q.push(o);
                    q
                })
            })
            .collect();
    }
    assert_eq!(out.len(), n.pow(len as u32));
    out
}

/// Brute force: probability of the whole text for every fill.
fn exhaustive(lm: &LmRestorer<f64>, masked: &str, len: usize) -> Vec<(String, f64)> {
    let outputs = lm.alphabet.output_ids();
    let mut ranked: Vec<(Vec<usize>, String, f64)> = all_fills(outputs.len(), len, &outputs)
        .into_iter()
        .map(|ids| {
            let fill = lm.alphabet.decode(&ids);
            let full = masked.replacen(&"?".repeat(len), &fill, 1);
            let seq = lm.alphabet.encode_str(&full).unwrap();
            let mut tape = Tape::new(false);
            let vars = lm.model.bind(&mut tape, false).unwrap();
            let loss = lm.model.loss(&mut tape, &vars, &[&seq], &mut rng()).unwrap();
            let lp = -tape.value(loss).item().unwrap() * seq.len() as f64;
            (ids, fill, lp)
        })
        .collect();
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(_, f, lp)| (f, lp)).collect()
}

#[test]
fn single_character_gap_matches_brute_force() {
    let alphabet = small_alphabet();
    let lm = tiny(&alphabet, 4);
    let masked = "ab c?ba";
    let want = exhaustive(&lm, masked, 1);
    let got = lm.propose(masked, &BeamConfig::new(5, 5).unwrap()).unwrap();
    assert_eq!(got.len(), 5);
    for (h, (f, lp)) in got.iter().zip(&want) {
        assert_eq!(&h.text, f);
        assert!((h.log_prob - lp).abs() < 1e-9);
    }
}

#[test]
fn exhaustive_width_gives_exact_top_k() {
    let alphabet = small_alphabet();
    let lm = tiny(&alphabet, 5);
    for masked in ["??ab", "a b??c", "ab??"] {
        let want = exhaustive(&lm, masked, 2);
        let got = lm.propose(masked, &BeamConfig::new(25, 10).unwrap()).unwrap();
        let names: Vec<&str> = got.iter().map(|h| h.text.as_str()).collect();
        let expected: Vec<&str> = want.iter().take(10).map(|(f, _)| f.as_str()).collect();
        assert_eq!(names, expected, "{masked}");
        let s = lm.score(masked, &got[0].text).unwrap();
        assert!((s - got[0].log_prob).abs() < 1e-9);
    }
}

#[test]
fn several_gaps_are_rejected() {
    let lm = tiny(&small_alphabet(), 5);
    assert!(lm.propose("a?b?", &BeamConfig::default()).is_err());
}

#[test]
fn training_lowers_held_out_perplexity() {
    let alphabet = letters();
    let train = records(40, 60);
    let valid: Vec<_> = records(44, 60).split_off(40);
    let mut cfg = LmConfig::new(alphabet.len());
    cfg.hidden = 24;
    cfg.char_dim = 12;
    let lm = CharLm::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let lm = LmRestorer::new(lm, alphabet).unwrap();
    let config = TrainConfig {
        batch_size: 8,
        learning_rate: 2e-2,
        dropout: 0.0,
        max_steps: 150,
        checkpoint_every: 50,
        bounds: SamplingBounds {
            min_context: 30,
            max_context: 60,
            min_target: 1,
            max_target: 5,
        },
        lr_decay: Some(0.95),
        ..TrainConfig::default()
    };
    let out = fit(
        lm,
        &train,
        &valid,
        &config,
        TrainState::fresh(RngState::from_seed(1)),
        |_, _| Ok(()),
    )
    .unwrap();
    let first = out.progress.first().unwrap().valid.loss.unwrap();
    let best = out
        .progress
        .iter()
        .filter_map(|p| p.valid.loss)
        .fold(f64::INFINITY, f64::min);
    assert!(
        best.exp() < first.exp() * 0.5,
        "perplexity {} -> {}",
        first.exp(),
        best.exp()
    );
}
