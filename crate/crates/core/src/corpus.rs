//! Raw annotated inscriptions to the normalized, split corpus.
//!
//! Raw interchange: one record per line, `id<TAB>raw_text`, optionally
//! followed by `<TAB>key=value` metadata fields. Lacunae are written `{N}`
//! (N missing characters). Editorial brackets are stripped, numerals become
//! a single `0` per run, human comments and Latin-script notes are dropped.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::vocab::{CharAlphabet, MISSING};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

/// Held-out split by the last decimal digit of the id: 3 is test, 4 is
/// validation, everything else trains.
pub fn assign_split(id: u64) -> Split {
    match id % 10 {
        3 => Split::Test,
        4 => Split::Valid,
        _ => Split::Train,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub id: u64,
    pub raw_text: String,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanRecord {
    pub id: u64,
    pub text: String,
    #[serde(skip)]
    pub split: Option<Split>,
}

impl CleanRecord {
    pub fn new(id: u64, text: impl Into<String>) -> Self {
        Self {
            id,
            text: text.into(),
            split: Some(assign_split(id)),
        }
    }

    pub fn split(&self) -> Split {
        self.split.unwrap_or_else(|| assign_split(self.id))
    }
}

/// Normalization stages, in application order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Numerals,
    EditorialSymbols,
    Notes,
    Lacunae,
    Lowercase,
    Spacing,
    AlphabetFilter,
    LengthFilter,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("stage {stage:?} rejected record {id}: {message}")]
pub struct NormalizeError {
    pub id: u64,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiscardReason {
    TooShort { len: usize },
    NonGreek,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Kept(CleanRecord),
    Discarded(DiscardReason),
}

/// Tunable inventories for the cleaning stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Regexes for numeral notations; a maximal run of matches becomes `0`.
    pub numeral_patterns: Vec<String>,
    /// Editorial characters stripped wherever they appear.
    pub editorial_symbols: Vec<char>,
    /// Regexes for human comments, removed entirely.
    pub comment_patterns: Vec<String>,
    /// Regex for non-Greek notes inside an otherwise Greek record.
    pub note_pattern: String,
    /// Records whose Greek share of letters falls below this are discarded.
    pub min_greek_ratio: f64,
    pub min_length: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            numeral_patterns: vec![
                r"[0-9]".into(),
                // Attic acrophonic and other ancient Greek numerals
                r"[\x{10140}-\x{1018F}]".into(),
                // Alphabetic numerals marked with keraia: ͵ατʹ, ιβʹ
                r"͵?[\p{Greek}&&\p{L}]{1,4}ʹ".into(),
            ],
            editorial_symbols: vec![
                '[', ']', '(', ')', '<', '>', '⟦', '⟧', '⸢', '⸣', '⌜', '⌝', '‹', '›', '«', '»', '|', '!', '†',
                '\u{0323}',
            ],
            comment_patterns: vec![r"/\*.*?\*/".into(), r"(?i)\bvac(?:at)?\b\.?".into()],
            note_pattern: r"[A-Za-z][A-Za-z.]*".into(),
            min_greek_ratio: 0.5,
            min_length: 100,
        }
    }
}

/// Per-stage counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub input_records: u64,
    pub kept: u64,
    pub numerals_replaced: u64,
    pub annotations_stripped: u64,
    pub notes_removed: u64,
    pub lacunae_expanded: u64,
    pub discarded_length: u64,
    pub discarded_non_greek: u64,
    pub rejected_malformed: u64,
}

impl NormalizationReport {
    pub fn discarded(&self) -> u64 {
        self.discarded_length + self.discarded_non_greek + self.rejected_malformed
    }

    pub fn merge(&mut self, o: &NormalizationReport) {
        self.input_records += o.input_records;
        self.kept += o.kept;
        self.numerals_replaced += o.numerals_replaced;
        self.annotations_stripped += o.annotations_stripped;
        self.notes_removed += o.notes_removed;
        self.lacunae_expanded += o.lacunae_expanded;
        self.discarded_length += o.discarded_length;
        self.discarded_non_greek += o.discarded_non_greek;
        self.rejected_malformed += o.rejected_malformed;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub inscriptions: u64,
    pub words: u64,
    pub chars: u64,
}

impl SplitStats {
    pub fn add(&mut self, text: &str) {
        self.inscriptions += 1;
        self.words += text.split_whitespace().count() as u64;
        self.chars += text.chars().filter(|c| !c.is_whitespace()).count() as u64;
    }
}

/// Per-split inscription/word/character counts plus the alphabet hash.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub train: SplitStats,
    pub valid: SplitStats,
    pub test: SplitStats,
    pub alphabet_hash: String,
}

impl CorpusManifest {
    pub fn stats_mut(&mut self, split: Split) -> &mut SplitStats {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn stats(&self, split: Split) -> SplitStats {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }

    /// Counts recomputed from records.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a CleanRecord>, alphabet: &CharAlphabet) -> Self {
        let mut m = CorpusManifest {
            alphabet_hash: alphabet.fingerprint(),
            ..Default::default()
        };
        for r in records {
            m.stats_mut(r.split()).add(&r.text);
        }
        m
    }
}

/// Compiled cleaning stages.
#[derive(Debug, Clone)]
pub struct Normalizer {
    config: PipelineConfig,
    numerals: Regex,
    comments: Vec<Regex>,
    notes: Regex,
    lacuna: Regex,
    whitespace: Regex,
    space_before_punct: Regex,
    repeated_punct: Regex,
    zero_run: Regex,
    editorial: HashSet<char>,
}

const PUNCT: &str = ".,;·";

impl Normalizer {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let bad = |e: regex::Error| Error::InvalidArgument(format!("pipeline pattern: {e}"));
        let alts = config
            .numeral_patterns
            .iter()
            .map(|p| format!("(?:{p})"))
            .collect::<Vec<_>>()
            .join("|");
        // Lacuna annotations are matched first so their digits survive.
        let numerals = Regex::new(&format!(r"(\{{[^{{}}]*\}})|(?:{alts})+")).map_err(bad)?;
        let comments = config
            .comment_patterns
            .iter()
            .map(|p| Regex::new(p))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?;
        Ok(Self {
            numerals,
            comments,
            notes: Regex::new(&config.note_pattern).map_err(bad)?,
            lacuna: Regex::new(r"\{([^{}]*)\}").expect("static regex"),
            whitespace: Regex::new(r"\s+").expect("static regex"),
            space_before_punct: Regex::new(&format!(r"\s+([{PUNCT}])")).expect("static regex"),
            repeated_punct: Regex::new(r"\.{2,}|,{2,}|;{2,}|·{2,}").expect("static regex"),
            zero_run: Regex::new("0{2,}").expect("static regex"),
            editorial: config.editorial_symbols.iter().copied().collect(),
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Runs every stage on one record, updating `report`.
    pub fn normalize(
        &self,
        raw: &RawRecord,
        alphabet: &CharAlphabet,
        report: &mut NormalizationReport,
    ) -> std::result::Result<Outcome, NormalizeError> {
        let reject = |stage, message: String| NormalizeError {
            id: raw.id,
            stage,
            message,
        };
        let mut text: String = raw.raw_text.nfc().collect();

        // 1. numerals
        let mut replaced = 0;
        text = self
            .numerals
            .replace_all(&text, |c: &regex::Captures| match c.get(1) {
                Some(keep) => keep.as_str().to_string(),
                None => {
                    replaced += 1;
                    "0".to_string()
                }
            })
            .into_owned();
        report.numerals_replaced += replaced;

        // 2. editorial symbols
        let before = text.chars().count();
        text.retain(|c| !self.editorial.contains(&c));
        report.annotations_stripped += (before - text.chars().count()) as u64;

        // 3. comments and non-Greek notes
        let (greek, latin) = letter_scripts(&text);
        if greek == 0 || (greek as f64) / ((greek + latin) as f64) < self.config.min_greek_ratio {
            return Ok(Outcome::Discarded(DiscardReason::NonGreek));
        }
        for re in &self.comments {
            report.notes_removed += re.find_iter(&text).count() as u64;
            text = re.replace_all(&text, " ").into_owned();
        }
        report.notes_removed += self.notes.find_iter(&text).count() as u64;
        text = self.notes.replace_all(&text, " ").into_owned();

        // 4. lacunae
        let mut expanded = String::with_capacity(text.len());
        let mut last = 0;
        for cap in self.lacuna.captures_iter(&text) {
            let whole = cap.get(0).expect("group 0");
            let n: usize = match cap[1].trim().parse() {
                Ok(n) if n > 0 => n,
                _ => return Err(reject(Stage::Lacunae, format!("malformed lacuna {:?}", whole.as_str()))),
            };
            expanded.push_str(&text[last..whole.start()]);
            expanded.extend(std::iter::repeat_n(MISSING, n));
            last = whole.end();
            report.lacunae_expanded += 1;
        }
        expanded.push_str(&text[last..]);
        if expanded.contains(['{', '}']) {
            return Err(reject(Stage::Lacunae, "unbalanced lacuna brace".into()));
        }
        text = expanded;

        // 5. lowercase
        text = text.to_lowercase();

        // 6. spacing and duplicate punctuation
        text = self.tidy(&text);

        // 7. alphabet filter
        text.retain(|c| c == MISSING || alphabet.contains(c));
        text = self.tidy(&text);
        text = self.zero_run.replace_all(&text, "0").into_owned();

        // 8. length
        let len = text.chars().count();
        if len < self.config.min_length {
            return Ok(Outcome::Discarded(DiscardReason::TooShort { len }));
        }
        Ok(Outcome::Kept(CleanRecord::new(raw.id, text)))
    }

    fn tidy(&self, text: &str) -> String {
        let t = self.whitespace.replace_all(text, " ");
        let t = self.space_before_punct.replace_all(&t, "$1");
        let t = self.repeated_punct.replace_all(&t, |c: &regex::Captures| {
            c[0].chars().next().expect("non-empty").to_string()
        });
        t.trim().to_string()
    }
}

fn letter_scripts(text: &str) -> (usize, usize) {
    let mut greek = 0;
    let mut latin = 0;
    for c in text.chars().filter(|c| c.is_alphabetic()) {
        match c as u32 {
            0x0370..=0x03FF | 0x1F00..=0x1FFF => greek += 1,
            _ if c.is_ascii_alphabetic() || ('\u{00C0}'..='\u{024F}').contains(&c) => latin += 1,
            _ => {}
        }
    }
    (greek, latin)
}

/// Normalizes a single record with a fresh report.
pub fn normalize_record(
    raw: &RawRecord,
    alphabet: &CharAlphabet,
    normalizer: &Normalizer,
) -> std::result::Result<Outcome, NormalizeError> {
    normalizer.normalize(raw, alphabet, &mut NormalizationReport::default())
}

/// Parses one raw interchange line.
pub fn parse_raw_line(line: &str) -> Result<RawRecord> {
    let mut fields = line.split('\t');
    let id_field = fields.next().unwrap_or_default();
    let id: u64 = id_field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad record id {id_field:?}")))?;
    let raw_text = fields
        .next()
        .filter(|t| !t.trim().is_empty())
        .ok_or_else(|| Error::Format(format!("record {id} has no text")))?
        .to_string();
    let mut metadata = BTreeMap::new();
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("record {id}: metadata field {f:?} is not key=value")))?;
        metadata.insert(k.to_string(), v.to_string());
    }
    Ok(RawRecord { id, raw_text, metadata })
}

/// Reads every regular file in `dir` (sorted by name) as raw interchange.
pub fn read_raw_dir(dir: &Path) -> Result<Vec<RawRecord>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for path in files {
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let rec = parse_raw_line(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if !seen.insert(rec.id) {
                return Err(Error::Format(format!(
                    "{}:{}: duplicate id {}",
                    path.display(),
                    n + 1,
                    rec.id
                )));
            }
            out.push(rec);
        }
    }
    Ok(out)
}

/// Outcome of a corpus build.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildSummary {
    pub manifest: CorpusManifest,
    pub report: NormalizationReport,
    pub rejections: Vec<NormalizeError>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

/// Normalizes every raw record under `raw_dir` and writes
/// `train.jsonl`, `valid.jsonl`, `test.jsonl`, `manifest.json` and
/// `report.json` to `out_dir`, records sorted by id.
pub fn build_corpus(
    raw_dir: &Path,
    out_dir: &Path,
    alphabet: &CharAlphabet,
    normalizer: &Normalizer,
) -> Result<BuildSummary> {
    let raw = read_raw_dir(raw_dir)?;
    let mut report = NormalizationReport::default();
    let mut kept = Vec::new();
    let mut rejections = Vec::new();
    for r in &raw {
        report.input_records += 1;
        match normalizer.normalize(r, alphabet, &mut report) {
            Ok(Outcome::Kept(rec)) => {
                report.kept += 1;
                kept.push(rec);
            }
            Ok(Outcome::Discarded(DiscardReason::TooShort { .. })) => report.discarded_length += 1,
            Ok(Outcome::Discarded(DiscardReason::NonGreek)) => report.discarded_non_greek += 1,
            Err(e) => {
                report.rejected_malformed += 1;
                rejections.push(e);
            }
        }
    }
    kept.sort_by_key(|r| r.id);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for split in Split::ALL {
        write_split(out_dir, split, kept.iter().filter(|r| r.split() == split))?;
    }
    let manifest = CorpusManifest::from_records(&kept, alphabet);
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    Ok(BuildSummary {
        manifest,
        report,
        rejections,
    })
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_split<'a>(dir: &Path, split: Split, records: impl IntoIterator<Item = &'a CleanRecord>) -> Result<()> {
    let path = dir.join(split.file_name());
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Reads one split file; a missing file is an empty split.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<CleanRecord>> {
    let path = dir.join(split.file_name());
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: CleanRecord = serde_json::from_str(&line)?;
        rec.split = Some(split);
        out.push(rec);
    }
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let s = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&s)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm() -> Normalizer {
        Normalizer::new(PipelineConfig::default()).unwrap()
    }

    fn raw(text: &str) -> RawRecord {
        RawRecord {
            id: 1,
            raw_text: text.to_string(),
            metadata: BTreeMap::new(),
        }
    }

    fn pad(s: &str) -> String {
        let mut t = s.to_string();
        while t.chars().count() < 100 {
            t.push_str(" αβγ");
        }
        t
    }

    fn kept(text: &str) -> String {
        match normalize_record(&raw(text), &CharAlphabet::default_greek(), &norm()).unwrap() {
            Outcome::Kept(r) => r.text,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn splits_by_last_digit() {
        assert_eq!(assign_split(316753), Split::Test);
        assert_eq!(assign_split(14), Split::Valid);
        assert_eq!(assign_split(20), Split::Train);
    }

    #[test]
    fn lacuna_expands_to_hyphens() {
        let out = kept(&pad("αβ{5}γδ"));
        assert!(out.starts_with("αβ-----γδ"), "{out}");
    }

    #[test]
    fn clean_text_is_fixed_point() {
        let t = pad("μηδεν αγαν");
        assert_eq!(kept(&t), t);
    }

    #[test]
    fn short_output_is_discarded() {
        let t: String = "α".repeat(99);
        assert_eq!(
            normalize_record(&raw(&t), &CharAlphabet::default_greek(), &norm()).unwrap(),
            Outcome::Discarded(DiscardReason::TooShort { len: 99 })
        );
        assert!(matches!(
            normalize_record(&raw(&"α".repeat(100)), &CharAlphabet::default_greek(), &norm()).unwrap(),
            Outcome::Kept(_)
        ));
    }

    #[test]
    fn malformed_lacunae_name_the_stage() {
        for bad in ["{0}", "{-3}", "{x}", "{5", "5}"] {
            let err = normalize_record(
                &raw(&pad(&format!("αβ {bad} γ"))),
                &CharAlphabet::default_greek(),
                &norm(),
            )
            .unwrap_err();
            assert_eq!(err.stage, Stage::Lacunae, "{bad}");
        }
    }

    #[test]
    fn latin_record_is_non_greek() {
        let t = pad("").replace("αβγ", "abc");
        assert_eq!(
            normalize_record(&raw(&t), &CharAlphabet::default_greek(), &norm()).unwrap(),
            Outcome::Discarded(DiscardReason::NonGreek)
        );
    }

    #[test]
    fn parses_raw_lines() {
        let r = parse_raw_line("42\tαβγ\tregion=Attica").unwrap();
        assert_eq!(r.id, 42);
        assert_eq!(r.metadata["region"], "Attica");
        assert!(parse_raw_line("x\tαβ").is_err());
        assert!(parse_raw_line("3\t").is_err());
    }
}
