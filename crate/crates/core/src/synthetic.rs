//! Generators for small synthetic corpora with known restoration targets.
//!
//! Texts use unaccented lowercase Greek so they pass through the same
//! alphabet and word handling as real inscriptions.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CleanRecord;
use crate::trainer::TrainingExample;

const CONSONANTS: [char; 14] = ['β', 'γ', 'δ', 'θ', 'κ', 'λ', 'μ', 'ν', 'π', 'ρ', 'σ', 'τ', 'φ', 'χ'];
const VOWELS: [char; 7] = ['α', 'ε', 'η', 'ι', 'ο', 'υ', 'ω'];
const ENDINGS: [&str; 5] = ["ος", "ων", "ης", "ας", "ου"];

const FILLER: [&str; 24] = [
    "και",
    "της",
    "τον",
    "των",
    "εδοξε",
    "βουλη",
    "δημω",
    "επειδη",
    "ανηρ",
    "αγαθος",
    "εστιν",
    "περι",
    "πολεως",
    "θεοις",
    "ιερον",
    "στηλην",
    "αρετης",
    "ενεκα",
    "ευνοιας",
    "εις",
    "εαυτον",
    "αναγραψαι",
    "λιθινην",
    "αγορα",
];

/// A pronounceable pseudo-word of `syllables` consonant-vowel pairs plus
/// an ending.
pub fn pseudo_word<R: Rng + ?Sized>(rng: &mut R, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).expect("non-empty"));
        w.push(*VOWELS.choose(rng).expect("non-empty"));
    }
    w.push_str(ENDINGS.choose(rng).expect("non-empty"));
    w
}

/// `n` distinct pseudo-words with 2 or 3 syllables (6 or 8 characters).
pub fn distinct_words<R: Rng + ?Sized>(rng: &mut R, n: usize, exclude: &BTreeSet<String>) -> Vec<String> {
    let mut seen = exclude.clone();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let w = pseudo_word(rng, syllables);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn filler<R: Rng + ?Sized>(rng: &mut R, words: std::ops::RangeInclusive<usize>) -> String {
    let n = rng.gen_range(words);
    (0..n)
        .map(|_| *FILLER.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A text in which one name occurs twice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameFixture {
    pub text: String,
    pub name: String,
    /// Character offsets of the two occurrences.
    pub first: usize,
    pub second: usize,
}

impl NameFixture {
    fn build(parts: &[&str], name: &str) -> Self {
        let mut text = String::new();
        let mut offsets = Vec::new();
        for p in parts {
            if *p == "\u{0}" {
                offsets.push(text.chars().count());
                text.push_str(name);
            } else {
                text.push_str(p);
            }
        }
        Self {
            text,
            name: name.to_string(),
            first: offsets[0],
            second: offsets[1],
        }
    }

    pub fn len(&self) -> usize {
        self.name.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.name.is_empty()
    }

    /// The text with the second occurrence replaced by `?`.
    pub fn masked(&self) -> String {
        let n = self.len();
        self.text
            .chars()
            .enumerate()
            .map(|(i, c)| {
                if i >= self.second && i < self.second + n {
                    '?'
                } else {
                    c
                }
            })
            .collect()
    }

    pub fn example(&self) -> TrainingExample {
        let chars: Vec<char> = self.text.chars().collect();
        TrainingExample::new(&chars, self.second, self.len())
    }

    /// The same text with both occurrences replaced by `other`.
    pub fn with_name(&self, other: &str) -> Self {
        let chars: Vec<char> = self.text.chars().collect();
        let n = self.len();
        let a: String = chars[..self.first].iter().collect();
        let b: String = chars[self.first + n..self.second].iter().collect();
        let c: String = chars[self.second + n..].iter().collect();
        Self::build(&[&a, "\u{0}", &b, "\u{0}", &c], other)
    }
}

/// Honorific-decree style text that names a person twice.
pub fn name_fixture<R: Rng + ?Sized>(rng: &mut R, name: &str, father: &str) -> NameFixture {
    let left = filler(rng, 1..=3);
    let middle = filler(rng, 1..=3);
    let right = filler(rng, 1..=3);
    let template = rng.gen_range(0..3);
    let (a, b, c) = match template {
        0 => (
            format!("{left} "),
            format!(" {father} ανεθηκεν τον βωμον {middle}. εδοξε τη βουλη επαινεσαι "),
            format!(" και στεφανωσαι {right}."),
        ),
        1 => (
            format!("εδοξε τω δημω. επειδη {left} "),
            format!(" {father} ανηρ αγαθος {middle}, επαινεσαι "),
            format!(" αρετης ενεκα {right}."),
        ),
        _ => (
            format!("{left} "),
            format!(" {father} ιερευς γενομενος {middle}. "),
            format!(" εποιησεν την στηλην {right}."),
        ),
    };
    NameFixture::build(&[&a, "\u{0}", &b, "\u{0}", &c], name)
}

/// Name-copy corpus. Every fixture uses its own name, and held-out and
/// spare names never occur in training text.
#[derive(Debug, Clone)]
pub struct NameCorpus {
    pub train: Vec<NameFixture>,
    pub held_out: Vec<NameFixture>,
    /// Names never used in any fixture, for substitution checks.
    pub spare_names: Vec<String>,
    fathers: Vec<String>,
    reserved: BTreeSet<String>,
}

impl NameCorpus {
    /// A new training fixture whose name is drawn fresh, avoiding held-out
    /// and spare names.
    pub fn sample_training<R: Rng + ?Sized>(&self, rng: &mut R) -> NameFixture {
        let name = loop {
            let syllables = rng.gen_range(2..=3);
            let w = pseudo_word(rng, syllables);
            if !self.reserved.contains(&w) {
                break w;
            }
        };
        let father = self.fathers.choose(rng).expect("non-empty").clone();
        name_fixture(rng, &name, &father)
    }
}

pub fn name_corpus(seed: u64, train: usize, held_out: usize) -> NameCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = distinct_words(&mut rng, train + held_out + 300, &BTreeSet::new());
    let (train_names, rest) = all.split_at(train);
    let (held_names, rest) = rest.split_at(held_out);
    let (fathers, spare) = rest.split_at(100);
    let mut gen = |names: &[String]| -> Vec<NameFixture> {
        names
            .iter()
            .map(|name| {
                let father = fathers.choose(&mut rng).expect("non-empty").clone();
                name_fixture(&mut rng, name, &father)
            })
            .collect()
    };
    let train = gen(train_names);
    let held_out = gen(held_names);
    let reserved = held_names.iter().chain(spare).chain(fathers).cloned().collect();
    NameCorpus {
        train,
        held_out,
        spare_names: spare.to_vec(),
        fathers: fathers.to_vec(),
        reserved,
    }
}

/// A text whose gap content is determined by the word that follows it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyedFixture {
    pub text: String,
    pub gap_start: usize,
    pub fill: String,
}

impl KeyedFixture {
    pub fn example(&self) -> TrainingExample {
        let chars: Vec<char> = self.text.chars().collect();
        TrainingExample::new(&chars, self.gap_start, self.fill.chars().count())
    }
}

/// Corpus where each text contains `code key`, the code being a fixed
/// arbitrary function of the key word and nothing to its left carrying
/// information about it.
#[derive(Debug, Clone)]
pub struct KeyedCorpus {
    pub keys: Vec<(String, String)>,
    pub train: Vec<KeyedFixture>,
    pub test: Vec<KeyedFixture>,
}

impl KeyedCorpus {
    pub fn records(&self) -> Vec<CleanRecord> {
        self.train
            .iter()
            .enumerate()
            .map(|(i, f)| CleanRecord::new(i as u64, f.text.clone()))
            .collect()
    }
}

pub fn keyed_corpus(seed: u64, keys: usize, train: usize, test: usize) -> KeyedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = distinct_words(&mut rng, keys, &BTreeSet::new());
    let table: Vec<(String, String)> = words
        .into_iter()
        .map(|k| {
            let code: String = (0..3)
                .map(|i| {
                    if i % 2 == 0 {
                        *CONSONANTS.choose(&mut rng).expect("non-empty")
                    } else {
                        *VOWELS.choose(&mut rng).expect("non-empty")
                    }
                })
                .collect();
            (k, code)
        })
        .collect();
    let mut gen = |n: usize| -> Vec<KeyedFixture> {
        (0..n)
            .map(|_| {
                let (key, code) = table.choose(&mut rng).expect("non-empty");
                let left = filler(&mut rng, 6..=10);
                let right = filler(&mut rng, 3..=6);
                let head = format!("{left} ");
                let text = format!("{head}{code} {key} {right}.");
                KeyedFixture {
                    gap_start: head.chars().count(),
                    fill: code.clone(),
                    text,
                }
            })
            .collect()
    };
    let train = gen(train);
    let test = gen(test);
    KeyedCorpus {
        keys: table,
        train,
        test,
    }
}
