//! Counterfactual, noise, and distractor perturbations of benchmark items.
//!
//! Every perturber is a pure function of its inputs: the same item, seed and
//! parameters always give byte-identical output.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::{char_to_byte_range, BenchmarkItem, OptionChoice, Span};

/// Share of stem words edited at intensity 1.
pub const EDIT_RATE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("attribute {0:?} has no swap cycles")]
    UnknownAttribute(String),
    #[error("intensity must be in [0, 1], got {0}")]
    InvalidIntensity(f64),
    #[error("cannot read swap table: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed swap table: {0}")]
    Malformed(#[from] serde_json::Error),
}

/// Replacement cycles per demographic attribute: each term maps to the next
/// term of its cycle, the last back to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SwapTable {
    pub attributes: BTreeMap<String, Vec<Vec<String>>>,
}

impl Default for SwapTable {
    fn default() -> Self {
        serde_json::from_str(include_str!("../../data/swap_table.json"))
            .expect("bundled swap table parses")
    }
}

impl SwapTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PerturbError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// The term following `term` in its cycle, matched case-insensitively.
    pub fn next(&self, attribute: &str, term: &str) -> Option<&str> {
        let needle = term.to_lowercase();
        self.attributes.get(attribute)?.iter().find_map(|cycle| {
            let pos = cycle.iter().position(|t| t.to_lowercase() == needle)?;
            Some(cycle[(pos + 1) % cycle.len()].as_str())
        })
    }
}

/// Result of a demographic swap.
#[derive(Debug, Clone, PartialEq)]
pub enum DemographicOutcome {
    Perturbed(BenchmarkItem),
    Skipped { item_id: String, reason: String },
}

impl DemographicOutcome {
    pub fn item(self) -> Option<BenchmarkItem> {
        match self {
            Self::Perturbed(item) => Some(item),
            Self::Skipped { .. } => None,
        }
    }
}

/// Applies the casing of `original` to a lowercase table term.
fn match_case(original: &str, replacement: &str) -> String {
    if replacement.chars().any(char::is_uppercase) {
        return replacement.to_string();
    }
    let letters: Vec<char> = original.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.len() > 1 && letters.iter().all(|c| c.is_uppercase()) {
        return replacement.to_uppercase();
    }
    if original.chars().next().is_some_and(char::is_uppercase) {
        let mut chars = replacement.chars();
        return chars
            .next()
            .map(|f| f.to_uppercase().chain(chars).collect())
            .unwrap_or_default();
    }
    replacement.to_string()
}

/// Rewrites `stem` by replacing char `spans` (non-overlapping) and shifts all
/// demographic offsets accordingly.
fn splice(item: &BenchmarkItem, edits: &[(Span, String)]) -> BenchmarkItem {
    let mut sorted: Vec<&(Span, String)> = edits.iter().collect();
    sorted.sort_by_key(|(s, _)| s.start);

    let mut stem = String::with_capacity(item.stem.len());
    let mut cursor = 0;
    for (span, text) in &sorted {
        let range = char_to_byte_range(&item.stem, *span).expect("span validated");
        stem.push_str(&item.stem[cursor..range.start]);
        stem.push_str(text);
        cursor = range.end;
    }
    stem.push_str(&item.stem[cursor..]);

    let shift = |pos: usize| -> isize {
        sorted
            .iter()
            .filter(|(s, _)| s.end <= pos)
            .map(|(s, t)| t.chars().count() as isize - (s.end - s.start) as isize)
            .sum()
    };
    let mut out = item.clone();
    out.stem = stem;
    for spans in out.demographics.values_mut() {
        for span in spans.iter_mut() {
            let replaced = sorted.iter().find(|(s, _)| *s == *span);
            let start = (span.start as isize + shift(span.start)) as usize;
            let len = match replaced {
                Some((_, t)) => t.chars().count(),
                None => span.end - span.start,
            };
            *span = Span {
                start,
                end: start + len,
            };
        }
    }
    out
}

/// Swaps every span of `attribute` to the next term of its cycle.
///
/// Only the attribute spans change; other demographic offsets are shifted
/// to stay aligned. Items without the attribute, or whose span text has no
/// cycle, are skipped.
pub fn perturb_demographic(
    item: &BenchmarkItem,
    attribute: &str,
    table: &SwapTable,
) -> Result<DemographicOutcome, PerturbError> {
    if !table.attributes.contains_key(attribute) {
        return Err(PerturbError::UnknownAttribute(attribute.to_string()));
    }
    let skip = |reason: String| {
        Ok(DemographicOutcome::Skipped {
            item_id: item.id.clone(),
            reason,
        })
    };
    let spans = match item.demographics.get(attribute) {
        Some(spans) if !spans.is_empty() => spans,
        _ => return skip(format!("no {attribute} span")),
    };
    let mut edits = Vec::with_capacity(spans.len());
    for &span in spans {
        let Some(text) = item.span_text(span) else {
            return skip(format!("span {}..{} is outside the stem", span.start, span.end));
        };
        let Some(next) = table.next(attribute, text) else {
            return skip(format!("no swap for {text:?}"));
        };
        edits.push((span, match_case(text, next)));
    }
    Ok(DemographicOutcome::Perturbed(splice(item, &edits)))
}

#[derive(Debug, Deserialize)]
struct Lexicon {
    synonyms: BTreeMap<String, String>,
    fillers: Vec<String>,
}

static LEXICON: LazyLock<Lexicon> = LazyLock::new(|| {
    serde_json::from_str(include_str!("../../data/lexicon.json")).expect("bundled lexicon parses")
});

#[derive(Debug, Deserialize)]
struct DistractorBank {
    sentences: Vec<String>,
    options: Vec<String>,
}

static DISTRACTORS: LazyLock<DistractorBank> = LazyLock::new(|| {
    serde_json::from_str(include_str!("../../data/distractors.json"))
        .expect("bundled distractor bank parses")
});

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\S+").unwrap());

/// Filler words inserted by the linguistic perturber.
pub fn filler_words() -> &'static [String] {
    &LEXICON.fillers
}

/// Sentences appended by the adversarial perturber.
pub fn distractor_sentences() -> &'static [String] {
    &DISTRACTORS.sentences
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Typo,
    Synonym,
    Filler,
}

/// One word-level edit made by [`perturb_linguistic`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub kind: EditKind,
    /// Index of the edited word in the original stem.
    pub word: usize,
    pub before: String,
    pub after: String,
}

/// Swaps two adjacent interior letters, or drops one when that is impossible.
fn typo(word: &str, rng: &mut impl Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    let swappable: Vec<usize> = (0..chars.len().saturating_sub(1))
        .filter(|&i| chars[i] != chars[i + 1] && chars[i].is_alphabetic() && chars[i + 1].is_alphabetic())
        .collect();
    let mut out = chars.clone();
    if let Some(&i) = swappable.choose(rng) {
        out.swap(i, i + 1);
    } else {
        out.remove(rng.gen_range(0..chars.len()));
    }
    out.into_iter().collect()
}

/// Splits a word into (alphabetic core, trailing punctuation).
fn core_and_tail(word: &str) -> Option<(&str, &str)> {
    let end = word
        .char_indices()
        .find(|(_, c)| !c.is_alphabetic())
        .map_or(word.len(), |(i, _)| i);
    let (core, tail) = word.split_at(end);
    (core.chars().count() >= 3 && tail.chars().all(|c| ",.;:!?".contains(c))).then_some((core, tail))
}

/// Noisy copy of `item` plus the edits made.
///
/// Makes `round(intensity · words · EDIT_RATE)` edits to distinct eligible
/// stem words, each a typo, a lexicon synonym, or a filler word inserted
/// before it. Words overlapping demographic spans are never touched, and
/// those spans are re-aligned. Options and gold are left as they are.
pub fn perturb_linguistic_with_edits(
    item: &BenchmarkItem,
    seed: u64,
    intensity: f64,
) -> Result<(BenchmarkItem, Vec<Edit>), PerturbError> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(PerturbError::InvalidIntensity(intensity));
    }
    let words: Vec<(Span, &str)> = WORD
        .find_iter(&item.stem)
        .map(|m| {
            let start = item.stem[..m.start()].chars().count();
            let span = Span {
                start,
                end: start + m.as_str().chars().count(),
            };
            (span, m.as_str())
        })
        .collect();
    let target = (intensity * words.len() as f64 * EDIT_RATE).round() as usize;
    if target == 0 {
        return Ok((item.clone(), Vec::new()));
    }

    let protected = |s: Span| {
        item.demographics
            .values()
            .flatten()
            .any(|d| d.start < s.end && s.start < d.end)
    };
    let mut eligible: Vec<usize> = (0..words.len())
        .filter(|&i| !protected(words[i].0) && core_and_tail(words[i].1).is_some())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    eligible.truncate(target);
    eligible.sort_unstable();

    let mut edits = Vec::with_capacity(eligible.len());
    let mut splices = Vec::with_capacity(eligible.len());
    for i in eligible {
        let (span, word) = words[i];
        let (core, tail) = core_and_tail(word).expect("eligible words split");
        let synonym = LEXICON.synonyms.get(&core.to_lowercase());
        let kinds: &[EditKind] = if synonym.is_some() {
            &[EditKind::Typo, EditKind::Synonym, EditKind::Filler]
        } else {
            &[EditKind::Typo, EditKind::Filler]
        };
        let kind = *kinds.choose(&mut rng).expect("non-empty");
        let after = match kind {
            EditKind::Typo => format!("{}{tail}", typo(core, &mut rng)),
            EditKind::Synonym => format!("{}{tail}", match_case(core, synonym.expect("checked"))),
            EditKind::Filler => {
                let filler = LEXICON.fillers.choose(&mut rng).expect("fillers present");
                format!("{filler} {word}")
            }
        };
        splices.push((span, after.clone()));
        edits.push(Edit {
            kind,
            word: i,
            before: word.to_string(),
            after,
        });
    }
    Ok((splice(item, &splices), edits))
}

/// Noisy copy of `item`; see [`perturb_linguistic_with_edits`].
pub fn perturb_linguistic(
    item: &BenchmarkItem,
    seed: u64,
    intensity: f64,
) -> Result<BenchmarkItem, PerturbError> {
    perturb_linguistic_with_edits(item, seed, intensity).map(|(i, _)| i)
}

fn next_label(labels: &[String]) -> String {
    let letters: Option<Vec<char>> = labels
        .iter()
        .map(|l| {
            let mut cs = l.chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) if c.is_ascii_uppercase() => Some(c),
                _ => None,
            }
        })
        .collect();
    match letters.and_then(|ls| ls.into_iter().max()) {
        Some(c) if c < 'Z' => char::from(c as u8 + 1).to_string(),
        _ => format!("X{}", labels.len() + 1),
    }
}

/// Appends an irrelevant but plausible sentence and, for multiple-choice
/// items, one extra distractor option after the existing ones.
pub fn perturb_adversarial(item: &BenchmarkItem, seed: u64) -> BenchmarkItem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = DISTRACTORS.sentences.choose(&mut rng).expect("bank non-empty");
    let mut out = item.clone();
    let trimmed = out.stem.trim_end().len();
    out.stem.truncate(trimmed);
    if !out.stem.is_empty() {
        out.stem.push(' ');
    }
    out.stem.push_str(sentence);

    if item.is_multiple_choice() {
        let taken: Vec<String> = item.options.iter().map(|o| o.text.to_lowercase()).collect();
        let candidates: Vec<&String> = DISTRACTORS
            .options
            .iter()
            .filter(|o| !taken.contains(&o.to_lowercase()))
            .collect();
        if let Some(text) = candidates.choose(&mut rng) {
            out.options.push(OptionChoice {
                label: next_label(&item.option_labels()),
                text: (*text).clone(),
            });
        }
    }
    out
}
