//! Built-in stylometric embedder and paragraph-level segmentation.
//!
//! Vector layout for the built-in backend, for a function-word list of
//! length `F` and dimension `N`:
//!
//! | range            | feature                                           |
//! |------------------|---------------------------------------------------|
//! | `0..F`           | relative frequency of each function word          |
//! | `F..F+10`        | punctuation-class count per character             |
//! | `F+10`, `F+11`   | sentence length mean / stddev (words), scaled     |
//! | `F+12`           | mean word length (chars), scaled                  |
//! | `F+13`           | type–token ratio                                  |
//! | `F+14..N`        | zero                                              |

use std::collections::BTreeSet;
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Component, ManuscriptRecord, ModelError, SourceKind, WsVector};

pub const PUNCTUATION_CLASSES: usize = 10;
/// Features after the function words: punctuation classes plus four length statistics.
pub const FIXED_FEATURES: usize = PUNCTUATION_CLASSES + 4;

pub const DEFAULT_FUNCTION_WORDS: &[&str] = &[
    "the", "of", "and", "a", "to", "in", "is", "that", "for", "it", "as", "with", "be", "by",
    "on", "not", "this", "are", "which", "or", "from", "at", "an", "but", "we", "can", "these",
    "our", "such", "have", "has", "was", "were", "been", "their", "its", "also", "may", "more",
    "than", "however", "thus", "here", "each", "both", "between", "into", "would", "will",
    "there",
];

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("empty manuscript")]
    EmptyManuscript,
    #[error("manuscript `{0}` has neither text nor components")]
    NoPayload(String),
    #[error("manuscript `{id}`: component dimension {actual}, expected {expected}")]
    Dimension {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("manuscript `{id}`: component weight {weight} is not positive")]
    Weight { id: String, weight: f64 },
    #[error("invalid embedder config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    /// Output dimension of the built-in backend.
    pub dimension: usize,
    /// Dimension required of precomputed vectors; inferred from the first
    /// vector record when unset.
    pub precomputed_dimension: Option<usize>,
    pub function_words: Vec<String>,
    /// Adjacent paragraphs closer than this (L2) are merged.
    pub merge_threshold: f64,
    /// Sentence-length features are divided by this many words.
    pub sentence_length_scale: f64,
    /// Mean word length is divided by this many characters.
    pub word_length_scale: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dimension: 64,
            precomputed_dimension: None,
            function_words: DEFAULT_FUNCTION_WORDS.iter().map(|s| s.to_string()).collect(),
            merge_threshold: 0.15,
            sentence_length_scale: 50.0,
            word_length_scale: 10.0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension < 8 {
            return Err(EmbedError::Config(format!(
                "dimension {} is below the minimum of 8",
                self.dimension
            )));
        }
        if self.function_words.is_empty() {
            return Err(EmbedError::Config("function word list is empty".into()));
        }
        let unique: BTreeSet<&String> = self.function_words.iter().collect();
        if unique.len() != self.function_words.len() {
            return Err(EmbedError::Config("function word list has duplicates".into()));
        }
        if self.function_words.len() + FIXED_FEATURES > self.dimension {
            return Err(EmbedError::Config(format!(
                "{} function words plus {FIXED_FEATURES} fixed features exceed dimension {}",
                self.function_words.len(),
                self.dimension
            )));
        }
        if self.merge_threshold.is_nan() || self.merge_threshold <= 0.0 {
            return Err(EmbedError::Config("merge threshold must be positive".into()));
        }
        if !(self.sentence_length_scale > 0.0 && self.word_length_scale > 0.0) {
            return Err(EmbedError::Config("length scales must be positive".into()));
        }
        Ok(())
    }
}

/// Reads a function-word list: one word per line, blank lines ignored.
pub fn read_function_words<R: BufRead>(reader: R) -> Result<Vec<String>, EmbedError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let w = line.trim();
        if !w.is_empty() {
            out.push(w.to_lowercase());
        }
    }
    Ok(out)
}

fn punctuation_class(c: char) -> Option<usize> {
    Some(match c {
        '.' => 0,
        ',' => 1,
        ';' => 2,
        ':' => 3,
        '?' => 4,
        '!' => 5,
        '"' | '\'' | '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' => 6,
        '(' | ')' | '[' | ']' | '{' | '}' => 7,
        '-' | '\u{2013}' | '\u{2014}' => 8,
        c if c.is_ascii_punctuation() => 9,
        _ => return None,
    })
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

/// Embeds a text slice with the built-in stylometric backend.
pub fn embed(text: &str, config: &EmbedderConfig) -> WsVector {
    let fw = config.function_words.len();
    let mut out = vec![0.0; config.dimension];

    let lowered: Vec<String> = words(text).map(str::to_lowercase).collect();
    let total_words = lowered.len();
    if total_words > 0 {
        for w in &lowered {
            if let Some(i) = config.function_words.iter().position(|f| f == w) {
                out[i] += 1.0;
            }
        }
        let n = total_words as f64;
        out[..fw].iter_mut().for_each(|v| *v /= n);
    }

    let mut chars = 0usize;
    let mut punct = [0usize; PUNCTUATION_CLASSES];
    for c in text.chars() {
        chars += 1;
        if let Some(k) = punctuation_class(c) {
            punct[k] += 1;
        }
    }
    if chars > 0 {
        for (k, count) in punct.iter().enumerate() {
            out[fw + k] = *count as f64 / chars as f64;
        }
    }

    let sentence_lengths: Vec<f64> = text
        .split(['.', '?', '!'])
        .map(|s| words(s).count())
        .filter(|&n| n > 0)
        .map(|n| n as f64)
        .collect();
    if !sentence_lengths.is_empty() {
        let n = sentence_lengths.len() as f64;
        let mean = sentence_lengths.iter().sum::<f64>() / n;
        let var = sentence_lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        out[fw + PUNCTUATION_CLASSES] = mean / config.sentence_length_scale;
        out[fw + PUNCTUATION_CLASSES + 1] = var.sqrt() / config.sentence_length_scale;
    }

    if total_words > 0 {
        let letters: usize = words(text).map(|w| w.chars().count()).sum();
        out[fw + PUNCTUATION_CLASSES + 2] =
            letters as f64 / total_words as f64 / config.word_length_scale;
        let distinct: BTreeSet<&String> = lowered.iter().collect();
        out[fw + PUNCTUATION_CLASSES + 3] = distinct.len() as f64 / total_words as f64;
    }

    WsVector::new(out).expect("features are finite")
}

/// A contiguous span of the input, in character offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment<'a> {
    pub span: (usize, usize),
    pub text: &'a str,
}

/// Paragraphs as (char start, byte start) of each non-blank line run.
fn paragraph_starts(text: &str) -> Vec<(usize, usize)> {
    let mut starts = Vec::new();
    let mut in_paragraph = false;
    let mut char_pos = 0usize;
    let mut byte_pos = 0usize;
    for line in text.split_inclusive('\n') {
        let blank = line.trim().is_empty();
        if !blank && !in_paragraph {
            starts.push((char_pos, byte_pos));
        }
        in_paragraph = !blank;
        char_pos += line.chars().count();
        byte_pos += line.len();
    }
    starts
}

/// Splits `text` at paragraph boundaries and merges neighbours whose
/// embeddings lie closer than the merge threshold.
///
/// The returned spans cover the whole input in order; separators belong to
/// the span they follow.
pub fn segment<'a>(text: &'a str, config: &EmbedderConfig) -> Result<Vec<Segment<'a>>, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyManuscript);
    }
    let starts = paragraph_starts(text);
    let total_chars = text.chars().count();
    let mut bounds: Vec<((usize, usize), (usize, usize))> = Vec::with_capacity(starts.len());
    for (i, &start) in starts.iter().enumerate() {
        let start = if i == 0 { (0, 0) } else { start };
        let end = starts
            .get(i + 1)
            .copied()
            .unwrap_or((total_chars, text.len()));
        bounds.push((start, end));
    }

    let vectors: Vec<WsVector> = bounds
        .iter()
        .map(|&((_, b0), (_, b1))| embed(text[b0..b1].trim(), config))
        .collect();

    let mut groups: Vec<((usize, usize), (usize, usize))> = Vec::new();
    for (i, &(start, end)) in bounds.iter().enumerate() {
        let merge = i > 0
            && vectors[i - 1].squared_l2_distance(&vectors[i]).sqrt() < config.merge_threshold;
        match groups.last_mut() {
            Some(last) if merge => last.1 = end,
            _ => groups.push((start, end)),
        }
    }
    Ok(groups
        .into_iter()
        .map(|((c0, b0), (c1, b1))| Segment {
            span: (c0, c1),
            text: &text[b0..b1],
        })
        .collect())
}

/// Populates `record.components` from its text or precomputed vectors.
///
/// Weights are character shares for text and the given weights otherwise,
/// normalized to sum to one.
pub fn embed_manuscript(
    mut record: ManuscriptRecord,
    config: &EmbedderConfig,
) -> Result<ManuscriptRecord, EmbedError> {
    if let Some(text) = record.text.take() {
        let segments = segment(&text, config)?;
        let total = text.chars().count() as f64;
        record.components = segments
            .iter()
            .map(|s| Component {
                ws: embed(s.text.trim(), config),
                weight: (s.span.1 - s.span.0) as f64 / total,
                span: Some(s.span),
            })
            .collect();
        record.source_kind = SourceKind::FullText;
        return Ok(record);
    }
    if record.components.is_empty() {
        return Err(EmbedError::NoPayload(record.id));
    }
    let expected = config
        .precomputed_dimension
        .unwrap_or_else(|| record.components[0].ws.dim());
    let mut total = 0.0;
    for c in &record.components {
        if c.ws.dim() != expected {
            return Err(EmbedError::Dimension {
                id: record.id.clone(),
                expected,
                actual: c.ws.dim(),
            });
        }
        if !(c.weight.is_finite() && c.weight > 0.0) {
            return Err(EmbedError::Weight {
                id: record.id.clone(),
                weight: c.weight,
            });
        }
        total += c.weight;
    }
    if total != 1.0 {
        record.components.iter_mut().for_each(|c| c.weight /= total);
    }
    record.source_kind = SourceKind::PrecomputedVectors;
    Ok(record)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedReport {
    pub embedded: usize,
    pub from_text: usize,
    pub precomputed: usize,
    pub failed: usize,
}

/// Embeds every manuscript in parallel, keeping input order and dropping
/// failures. Precomputed records must all share one dimension.
pub fn embed_corpus(
    records: Vec<ManuscriptRecord>,
    config: &EmbedderConfig,
) -> Result<(Vec<ManuscriptRecord>, EmbedReport), EmbedError> {
    config.validate()?;
    let mut config = config.clone();
    if config.precomputed_dimension.is_none() {
        config.precomputed_dimension = records
            .iter()
            .find(|r| r.text.is_none())
            .and_then(|r| r.components.first())
            .map(|c| c.ws.dim());
    }
    let results: Vec<Result<ManuscriptRecord, EmbedError>> = records
        .into_par_iter()
        .map(|r| embed_manuscript(r, &config))
        .collect();
    let mut report = EmbedReport::default();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(m) => {
                match m.source_kind {
                    SourceKind::FullText => report.from_text += 1,
                    SourceKind::PrecomputedVectors => report.precomputed += 1,
                }
                out.push(m);
            }
            Err(e) => {
                log::warn!("embedding failed: {e}");
                report.failed += 1;
            }
        }
    }
    report.embedded = out.len();
    Ok((out, report))
}
