//! R2: documentation/code consistency.

use std::collections::BTreeSet;

use super::{FilterError, FilterOutcome, Rule};
use crate::corpus::CodeSample;
use crate::textmetrics::stem;

pub trait DocChecker: Send + Sync {
    /// `Err` only for transport-level failures of a remote checker.
    fn is_consistent(&self, doc: &str, code: &str) -> Result<bool, FilterError>;
}

/// Offline checker: share of docstring content-word stems that also occur
/// among the identifier/comment stems of the code.
#[derive(Debug, Clone, Copy)]
pub struct LexicalDocChecker {
    pub min_overlap: f64,
}

impl Default for LexicalDocChecker {
    fn default() -> Self {
        Self { min_overlap: 0.2 }
    }
}

impl DocChecker for LexicalDocChecker {
    fn is_consistent(&self, doc: &str, code: &str) -> Result<bool, FilterError> {
        Ok(doc_overlap(doc, code) >= self.min_overlap)
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "given", "has", "have", "if",
    "in", "into", "is", "it", "its", "of", "on", "or", "that", "the", "then", "this", "to", "was",
    "were", "which", "will", "with",
];

fn doc_stems(doc: &str) -> BTreeSet<String> {
    doc.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .map(|w| stem(&w))
        .collect()
}

/// Drops triple-quoted literals so a docstring embedded in the code cannot
/// vouch for itself.
fn strip_triple_quoted(code: &str) -> String {
    let mut out = String::with_capacity(code.len());
    let mut rest = code;
    loop {
        let next = ["\"\"\"", "'''"]
            .iter()
            .filter_map(|q| rest.find(q).map(|i| (i, *q)))
            .min_by_key(|(i, _)| *i);
        match next {
            None => {
                out.push_str(rest);
                return out;
            }
            Some((i, q)) => {
                out.push_str(&rest[..i]);
                let after = &rest[i + 3..];
                match after.find(q) {
                    Some(j) => rest = &after[j + 3..],
                    None => return out,
                }
            }
        }
    }
}

/// Splits `parseHTTPRequest_v2` into `parse`, `http`, `request`, `v2`.
fn identifier_words(ident: &str) -> Vec<String> {
    let mut words = Vec::new();
    for part in ident.split('_').filter(|p| !p.is_empty()) {
        let chars: Vec<char> = part.chars().collect();
        let mut cur = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let boundary = i > 0
                && c.is_uppercase()
                && (chars[i - 1].is_lowercase()
                    || chars[i - 1].is_ascii_digit()
                    || chars.get(i + 1).is_some_and(|n| n.is_lowercase()));
            if boundary && !cur.is_empty() {
                words.push(std::mem::take(&mut cur).to_lowercase());
            }
            cur.push(c);
        }
        if !cur.is_empty() {
            words.push(cur.to_lowercase());
        }
    }
    words
}

fn code_stems(code: &str) -> BTreeSet<String> {
    strip_triple_quoted(code)
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .flat_map(identifier_words)
        .map(|w| stem(&w))
        .collect()
}

/// Fraction of docstring content stems found in the code; 0 for a
/// docstring without content words.
pub fn doc_overlap(doc: &str, code: &str) -> f64 {
    let d = doc_stems(doc);
    if d.is_empty() {
        return 0.0;
    }
    let c = code_stems(code);
    d.intersection(&c).count() as f64 / d.len() as f64
}

pub fn filter_doc_consistency(
    sample: &CodeSample,
    checker: &dyn DocChecker,
) -> Result<FilterOutcome, FilterError> {
    let doc = match sample.docstring.as_deref().map(str::trim) {
        Some(d) if !d.is_empty() => d,
        _ => return Ok(FilterOutcome::drop(Rule::R2, "no doc")),
    };
    Ok(if checker.is_consistent(doc, &sample.code)? {
        FilterOutcome::keep(Rule::R2)
    } else {
        FilterOutcome::drop(Rule::R2, "documentation inconsistent with code")
    })
}
