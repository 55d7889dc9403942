//! Levenshtein distance and lexicon-based word correction.
//!
//! Two correctors are provided. [`correct_general`] snaps a word to the
//! nearest entry of a broad dictionary within a distance budget.
//! [`correct_domain`] uses a closed lexicon of known labels and weighs each
//! edit by the recogniser's confidence in the character it touches; it is
//! suppressed when the mean confidence falls below a gate.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Alphabet, Error, Result};

const GENERAL_WORDS: &str = include_str!("../data/general.txt");
const DOMAIN_WORDS: &str = include_str!("../data/domain.txt");

/// Unit-cost Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit cost from a predicted `word` to `target` where substituting or
/// deleting predicted character `i` costs `confidences[i]` and inserting a
/// character costs 1.
pub fn weighted_distance(word: &str, confidences: &[f64], target: &str) -> Result<f64> {
    let w: Vec<char> = word.chars().collect();
    if w.len() != confidences.len() {
        return Err(Error::Contract(format!(
            "{} confidences for a {}-character word",
            confidences.len(),
            w.len()
        )));
    }
    let t: Vec<char> = target.chars().collect();
    let mut prev: Vec<f64> = (0..=t.len()).map(|j| j as f64).collect();
    let mut cur = vec![0.0; t.len() + 1];
    for (i, cw) in w.iter().enumerate() {
        let c = confidences[i];
        cur[0] = prev[0] + c;
        for (j, ct) in t.iter().enumerate() {
            let sub = prev[j] + if cw == ct { 0.0 } else { c };
            cur[j + 1] = sub.min(prev[j + 1] + c).min(cur[j] + 1.0);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[t.len()])
}

/// Words over the alphabet with non-negative frequency weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<String, f64>,
}

impl Lexicon {
    /// Uppercases every word, rejects characters outside the alphabet and
    /// merges duplicates by summing their frequencies (default 1).
    pub fn build<S: AsRef<str>>(words: impl IntoIterator<Item = (S, Option<f64>)>) -> Result<Self> {
        let mut lex = Self::default();
        for (w, f) in words {
            lex.insert(w.as_ref(), f.unwrap_or(1.0))?;
        }
        Ok(lex)
    }

    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::build(words.into_iter().map(|w| (w, None)))
    }

    pub fn insert(&mut self, word: &str, frequency: f64) -> Result<()> {
        if !(frequency.is_finite() && frequency >= 0.0) {
            return Err(Error::Config(format!("frequency {frequency} for {word:?}")));
        }
        let word = word.trim().to_uppercase();
        if word.is_empty() {
            return Err(Error::Config("empty lexicon entry".into()));
        }
        Alphabet.validate(&word)?;
        *self.entries.entry(word).or_insert(0.0) += frequency;
        Ok(())
    }

    /// Parses `WORD[<TAB>frequency]` lines; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (word, freq) = match line.split_once('\t') {
                Some((w, f)) => {
                    let f = f.trim().parse::<f64>().map_err(|e| {
                        Error::Format(format!("lexicon line {}: bad frequency: {e}", n + 1))
                    })?;
                    (w, f)
                }
                None => (line, 1.0),
            };
            lex.insert(word, freq)?;
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(w, f)| format!("{w}\t{f}\n"))
            .collect()
    }

    /// The bundled general English list; frequency falls off with rank.
    pub fn general() -> Self {
        let mut lex = Self::default();
        for (rank, w) in GENERAL_WORDS.lines().filter(|l| !l.is_empty()).enumerate() {
            lex.insert(w, 1.0 / (rank + 1) as f64)
                .expect("bundled list is valid");
        }
        lex
    }

    /// The bundled mail-domain list (names, places, account words, numbers).
    pub fn domain() -> Self {
        Self::parse(DOMAIN_WORDS).expect("bundled list is valid")
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn frequency(&self, word: &str) -> Option<f64> {
        self.entries.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(w, f)| (w.as_str(), *f))
    }

    pub fn words(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

/// Words of the bundled domain lexicon, the default dataset vocabulary.
pub fn domain_wordlist() -> Vec<String> {
    Lexicon::domain().words()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub max_dist: usize,
    /// Minimum mean per-character confidence for domain correction.
    pub gate: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            max_dist: 2,
            gate: 0.3,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gate) {
            return Err(Error::Config(format!("gate {} outside [0, 1]", self.gate)));
        }
        Ok(())
    }
}

/// Better candidate under (lower cost, higher frequency, lexicographic).
fn better(cost: f64, freq: f64, word: &str, best: &Option<(f64, f64, &str)>, tol: f64) -> bool {
    match best {
        None => true,
        Some((bc, bf, bw)) => {
            if cost < bc - tol {
                true
            } else if cost > bc + tol {
                false
            } else if freq != *bf {
                freq > *bf
            } else {
                word < *bw
            }
        }
    }
}

pub fn correct_general(word: &str, lex: &Lexicon, cfg: &CorrectionConfig) -> String {
    if lex.contains(word) {
        return word.to_string();
    }
    let mut best: Option<(f64, f64, &str)> = None;
    for (cand, freq) in lex.iter() {
        let d = edit_distance(word, cand);
        if d > cfg.max_dist {
            continue;
        }
        if better(d as f64, freq, cand, &best, 0.0) {
            best = Some((d as f64, freq, cand));
        }
    }
    best.map_or_else(|| word.to_string(), |(_, _, w)| w.to_string())
}

/// Confidence-weighted nearest domain entry, or `word` unchanged when the
/// mean confidence is below `cfg.gate`, the word is empty, or the lexicon is
/// empty. The nearest entry is accepted at any distance.
pub fn correct_domain(
    word: &str,
    confidences: &[f64],
    lex: &Lexicon,
    cfg: &CorrectionConfig,
) -> Result<String> {
    let n = word.chars().count();
    if n != confidences.len() {
        return Err(Error::Contract(format!(
            "{} confidences for a {n}-character word",
            confidences.len()
        )));
    }
    if n == 0 {
        return Ok(String::new());
    }
    let mean = confidences.iter().sum::<f64>() / n as f64;
    if mean < cfg.gate {
        return Ok(word.to_string());
    }
    let mut best: Option<(f64, f64, &str)> = None;
    for (cand, freq) in lex.iter() {
        let d = weighted_distance(word, confidences, cand)?;
        if better(d, freq, cand, &best, 1e-9) {
            best = Some((d, freq, cand));
        }
    }
    Ok(best.map_or_else(|| word.to_string(), |(_, _, w)| w.to_string()))
}
