//! CMU-style pronouncing dictionaries and phoneme coverage of candidate texts.
//!
//! ```
//! use ttasv::phoneme::{phoneme_set, PronDict};
//!
//! let dict = PronDict::parse("THE  DH AH0\nCAT  K AE1 T\n").unwrap();
//! let report = phoneme_set("The cat.", &dict);
//! assert_eq!(report.distinct_count, 5);
//! assert_eq!(report.coverage, 1.0);
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhonemeError {
    #[error("dictionary line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no corpus text has {min}..={max} words (target {target} phonemes)")]
    NoTextInBand { target: usize, min: usize, max: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Pronunciation = Vec<String>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PronDict {
    entries: BTreeMap<String, Vec<Pronunciation>>,
    inventory: BTreeSet<String>,
}

fn strip_stress(symbol: &str) -> &str {
    symbol.trim_end_matches(['0', '1', '2'])
}

fn valid_symbol(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_uppercase())
}

fn split_head(head: &str) -> Option<&str> {
    match head.find('(') {
        None => Some(head),
        Some(i) => {
            let rest = head[i + 1..].strip_suffix(')')?;
            if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            Some(&head[..i])
        }
    }
}

impl PronDict {
    pub fn parse(source: &str) -> Result<Self, PhonemeError> {
        let mut dict = PronDict::default();
        for (i, raw) in source.lines().enumerate() {
            let line = raw.trim_end();
            if line.starts_with(";;;") || line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| PhonemeError::Parse {
                line: i + 1,
                reason,
            };
            let mut fields = line.split_whitespace();
            let head = fields.next().unwrap_or_default();
            let word = split_head(head).ok_or_else(|| err(format!("bad entry head {head:?}")))?;
            if word.is_empty() {
                return Err(err("empty word".into()));
            }
            let mut pron = Vec::new();
            for sym in fields {
                let base = strip_stress(sym);
                if !valid_symbol(base) || sym.len() - base.len() > 1 {
                    return Err(err(format!("bad phoneme symbol {sym:?}")));
                }
                pron.push(base.to_string());
            }
            if pron.is_empty() {
                return Err(err(format!("entry {word:?} has no phonemes")));
            }
            dict.insert(word, pron);
        }
        Ok(dict)
    }

    /// Decodes as UTF-8, falling back to Latin-1 when the bytes are not valid UTF-8.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PhonemeError> {
        match std::str::from_utf8(bytes) {
            Ok(s) => Self::parse(s),
            Err(_) => {
                let s: String = bytes.iter().map(|&b| b as char).collect();
                Self::parse(&s)
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PhonemeError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn insert(&mut self, word: &str, pron: Pronunciation) {
        self.inventory.extend(pron.iter().cloned());
        self.entries.entry(word.to_uppercase()).or_default().push(pron);
    }

    /// Writes entries in cmudict layout, variants as `WORD(1)`, `WORD(2)`, ...
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (word, prons) in &self.entries {
            for (k, p) in prons.iter().enumerate() {
                if k == 0 {
                    out.push_str(word);
                } else {
                    let _ = write!(out, "{word}({k})");
                }
                out.push_str("  ");
                out.push_str(&p.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn get(&self, word: &str) -> Option<&[Pronunciation]> {
        self.entries.get(&word.to_uppercase()).map(Vec::as_slice)
    }

    pub fn first(&self, word: &str) -> Option<&Pronunciation> {
        self.get(word).and_then(|p| p.first())
    }

    pub fn inventory(&self) -> &BTreeSet<String> {
        &self.inventory
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhonemeReport {
    pub distinct_count: usize,
    pub coverage: f64,
    pub oov_words: Vec<String>,
    pub oov_rate: f64,
    /// Number of distinct in-vocabulary words whose pronunciation uses each phoneme.
    pub per_phoneme_counts: BTreeMap<String, usize>,
}

/// Uppercased words with leading and trailing punctuation removed. Inner
/// apostrophes survive so that `boy's` matches `BOY'S`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .chars()
                .filter(|&c| c.is_alphanumeric() || c == '\'')
                .collect::<String>()
                .to_uppercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn word_count(text: &str) -> usize {
    tokenize(text).len()
}

pub fn phoneme_set(text: &str, dict: &PronDict) -> PhonemeReport {
    let words: BTreeSet<String> = tokenize(text).into_iter().collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut oov = Vec::new();
    for w in &words {
        match dict.first(w) {
            Some(pron) => {
                let distinct: BTreeSet<&String> = pron.iter().collect();
                for p in distinct {
                    *counts.entry(p.clone()).or_default() += 1;
                }
            }
            None => oov.push(w.clone()),
        }
    }
    let distinct_count = counts.len();
    let inv = dict.inventory().len();
    PhonemeReport {
        distinct_count,
        coverage: if inv == 0 {
            0.0
        } else {
            distinct_count as f64 / inv as f64
        },
        oov_rate: if words.is_empty() {
            0.0
        } else {
            oov.len() as f64 / words.len() as f64
        },
        oov_words: oov,
        per_phoneme_counts: counts,
    }
}

/// For each target, the in-band text whose distinct phoneme count is closest
/// to it. Ties go to the lexicographically smallest text.
pub fn select_texts(
    corpus: &[String],
    dict: &PronDict,
    targets: &[usize],
    length_band: RangeInclusive<usize>,
) -> Result<BTreeMap<usize, String>, PhonemeError> {
    if corpus.is_empty() {
        return Err(PhonemeError::EmptyCorpus);
    }
    let candidates: Vec<(usize, &String)> = corpus
        .iter()
        .filter(|t| length_band.contains(&word_count(t)))
        .map(|t| (phoneme_set(t, dict).distinct_count, t))
        .collect();
    let mut out = BTreeMap::new();
    for &target in targets {
        let best = candidates
            .iter()
            .min_by(|a, b| {
                a.0.abs_diff(target)
                    .cmp(&b.0.abs_diff(target))
                    .then_with(|| a.1.cmp(b.1))
            })
            .ok_or(PhonemeError::NoTextInBand {
                target,
                min: *length_band.start(),
                max: *length_band.end(),
            })?;
        out.insert(target, best.1.clone());
    }
    Ok(out)
}
