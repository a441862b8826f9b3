//! Character alphabet, capped word vocabulary and aligned sequence encoding.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Padding symbol (private use codepoint, never appears in text).
pub const PAD: char = '\u{E000}';
/// Start-of-output symbol fed to the decoder at step 0.
pub const START: char = '\u{E001}';
pub const MISSING: char = '-';
pub const PREDICT: char = '?';
pub const NUMERAL: char = '0';
pub const SPACE: char = ' ';

/// Reserved symbols, in index order.
pub const RESERVED: [char; 6] = [PAD, START, MISSING, PREDICT, NUMERAL, SPACE];

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const MISSING_ID: usize = 2;
pub const PREDICT_ID: usize = 3;

/// Ordered list of distinct symbols with the reserved ones at fixed indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharAlphabet {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharAlphabet {
    /// Builds an alphabet from an explicit symbol list, which must start with
    /// [`RESERVED`] in order and contain no duplicates.
    pub fn from_symbols(symbols: Vec<char>) -> Result<Self> {
        if symbols.len() < RESERVED.len() || symbols[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("alphabet must begin with the reserved symbols".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Format(format!("duplicate alphabet symbol {c:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Reserved symbols plus the given extra symbols in the given order;
    /// extras that are already reserved are skipped.
    pub fn with_extra(extra: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut symbols = RESERVED.to_vec();
        for c in extra {
            if !symbols.contains(&c) {
                symbols.push(c);
            }
        }
        Self::from_symbols(symbols)
    }

    /// Corpus-derived alphabet: every character seen at least `min_count`
    /// times, ordered by descending frequency then codepoint.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: HashMap<char, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for c in text.chars() {
                *counts.entry(c).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::InvalidArgument(
                "cannot build an alphabet from an empty corpus".into(),
            ));
        }
        let mut ranked: Vec<(char, usize)> = counts
            .into_iter()
            .filter(|&(c, n)| n >= min_count.max(1) && !RESERVED.contains(&c))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Self::with_extra(ranked.into_iter().map(|(c, _)| c))
    }

    /// Lowercase Greek letters (monotonic and polytonic), the numeral
    /// placeholder, space and the punctuation kept in normalized texts.
    pub fn default_greek() -> Self {
        let greek = ('\u{0386}'..='\u{03CE}')
            .chain('\u{1F00}'..='\u{1FFF}')
            .filter(|c| c.is_lowercase());
        let punct = ['.', ',', ';', '·', '\''];
        Self::with_extra(greek.chain(punct)).expect("static alphabet is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, i: usize) -> Option<char> {
        self.symbols.get(i).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    /// Whether the decoder may emit this index as a restored character.
    pub fn is_output(&self, i: usize) -> bool {
        i < self.symbols.len() && !matches!(i, PAD_ID | START_ID | MISSING_ID | PREDICT_ID)
    }

    pub fn output_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_output(i)).collect()
    }

    pub fn encode_str(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| self.index(ch).ok_or(Error::UnknownChar { ch, position }))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.symbol(i)).collect()
    }

    /// Hex SHA-256 over the ordered symbol list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.symbols {
            h.update((*c as u32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Line-delimited `index<TAB>codepoint-hex`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.symbols.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{:04x}", *c as u32);
        }
        out
    }

    pub fn from_tsv(src: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        for (n, line) in src.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Format(format!("alphabet line {}: {line:?}", n + 1));
            let (idx, hex) = line.split_once('\t').ok_or_else(bad)?;
            let idx: usize = idx.trim().parse().map_err(|_| bad())?;
            if idx != symbols.len() {
                return Err(bad());
            }
            let cp = u32::from_str_radix(hex.trim(), 16).map_err(|_| bad())?;
            symbols.push(char::from_u32(cp).ok_or_else(bad)?);
        }
        Self::from_symbols(symbols)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let src = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_tsv(&src)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_tsv()).map_err(|e| Error::io(&path, e))
    }
}

pub const UNK_WORD: usize = 0;
pub const NO_WORD: usize = 1;
const RESERVED_WORDS: [&str; 2] = ["<unk>", "<no-word>"];

/// Most frequent complete words, capped in size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    entries: Vec<(String, u64)>,
    index: HashMap<String, usize>,
}

fn is_complete_word(w: &str) -> bool {
    !w.is_empty() && !w.chars().any(|c| c == MISSING || c == PREDICT || c.is_whitespace())
}

impl WordVocab {
    pub const DEFAULT_CAP: usize = 100_000;

    /// Top-`cap` whitespace-delimited words by frequency, ties broken
    /// lexicographically. Damaged words never count.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: HashMap<&'a str, u64> = HashMap::new();
        for text in texts {
            for w in text.split_whitespace().filter(|w| is_complete_word(w)) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(cap);
        Self::from_entries(ranked.into_iter().map(|(w, n)| (w.to_string(), n)))
            .expect("counted words are complete and distinct")
    }

    fn from_entries(words: impl IntoIterator<Item = (String, u64)>) -> Result<Self> {
        let mut entries: Vec<(String, u64)> = RESERVED_WORDS.iter().map(|w| (w.to_string(), 0)).collect();
        entries.extend(words);
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (w, _)) in entries.iter().enumerate() {
            if i >= RESERVED_WORDS.len() && !is_complete_word(w) {
                return Err(Error::Format(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { entries, index })
    }

    /// Total size including the two reserved entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn word(&self, i: usize) -> Option<&str> {
        self.entries.get(i).map(|(w, _)| w.as_str())
    }

    /// Index of a word; incomplete or unseen words map to [`UNK_WORD`].
    pub fn lookup(&self, w: &str) -> usize {
        if !is_complete_word(w) {
            return UNK_WORD;
        }
        match self.index.get(w) {
            Some(&i) if i >= RESERVED_WORDS.len() => i,
            _ => UNK_WORD,
        }
    }

    /// Line-delimited `index<TAB>word<TAB>count`, reserved entries included.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, (w, n)) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{w}\t{n}");
        }
        out
    }

    pub fn from_tsv(src: &str) -> Result<Self> {
        let mut words = Vec::new();
        for (n, line) in src.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Format(format!("vocab line {}: {line:?}", n + 1));
            let mut parts = line.split('\t');
            let (Some(idx), Some(word), Some(count), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad());
            };
            let idx: usize = idx.parse().map_err(|_| bad())?;
            let count: u64 = count.parse().map_err(|_| bad())?;
            if idx < RESERVED_WORDS.len() {
                if word != RESERVED_WORDS[idx] {
                    return Err(bad());
                }
                continue;
            }
            if idx != words.len() + RESERVED_WORDS.len() {
                return Err(bad());
            }
            words.push((word.to_string(), count));
        }
        Self::from_entries(words)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let src = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_tsv(&src)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_tsv()).map_err(|e| Error::io(&path, e))
    }
}

/// Per-character aligned input streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub char_ids: Vec<usize>,
    pub word_ids: Vec<usize>,
    pub predict_mask: Vec<bool>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.char_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_ids.is_empty()
    }

    /// Number of positions to restore.
    pub fn gap_len(&self) -> usize {
        self.predict_mask.iter().filter(|&&m| m).count()
    }
}

/// Encodes `text` into character ids, containing-word ids and the mask of
/// `?` positions. Without a vocabulary every word maps to unk.
pub fn encode(text: &str, alphabet: &CharAlphabet, vocab: Option<&WordVocab>) -> Result<EncodedSequence> {
    let chars: Vec<char> = text.chars().collect();
    let char_ids = alphabet.encode_str(text)?;
    let mut word_ids = vec![NO_WORD; chars.len()];
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let word: String = chars[start..i].iter().collect();
        let id = vocab.map_or(UNK_WORD, |v| v.lookup(&word));
        word_ids[start..i].iter_mut().for_each(|w| *w = id);
    }
    let predict_mask = chars.iter().map(|&c| c == PREDICT).collect();
    Ok(EncodedSequence {
        char_ids,
        word_ids,
        predict_mask,
    })
}

/// Removes accents and breathings: canonical decomposition, drop combining
/// marks, recompose.
pub fn strip_diacritics(text: &str) -> String {
    text.nfd().filter(|&c| !is_combining_mark(c)).nfc().collect()
}
