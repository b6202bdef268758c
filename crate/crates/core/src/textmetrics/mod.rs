//! CoT quality metrics: BLEU-1..4, METEOR-lite, ROUGE-L and the
//! agent-judged consistency rate.

mod bleu;
mod meteor;
mod rouge;

use std::sync::OnceLock;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{check_consistency, AgentVerdict, AgentError, ChatClient, Decision};
use crate::pool::bounded_map;

pub use bleu::{bleu_n, bleu_n_with, BleuOptions};
pub use meteor::{meteor_alignment, meteor_lite, Alignment, METEOR_BETA, METEOR_GAMMA};
pub use rouge::{lcs_len, rouge_l, ROUGE_BETA};

/// English Snowball stem of a lowercase word.
pub fn stem(word: &str) -> String {
    static STEMMER: OnceLock<Stemmer> = OnceLock::new();
    STEMMER
        .get_or_init(|| Stemmer::create(Algorithm::English))
        .stem(word)
        .into_owned()
}

/// Tokens under the one rule used everywhere: lowercase, runs of
/// alphanumerics/underscore are words, every other non-space character
/// is a token by itself.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    tokens: Vec<String>,
}

impl TokenSeq {
    pub fn tokenize(text: &str) -> Self {
        let mut tokens = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() || ch == '_' {
                word.extend(ch.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
        Self { tokens }
    }

    /// Takes tokens as given, without re-tokenizing.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        Self {
            tokens: tokens.into_iter().map(Into::into).collect(),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("empty corpus")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsistencyCounts {
    pub yes: usize,
    pub no: usize,
    /// Records whose check failed after retries; excluded from the rate.
    pub errors: usize,
}

impl ConsistencyCounts {
    /// yes / (yes + no); `None` when no record got a verdict.
    pub fn rate(&self) -> Option<f64> {
        let judged = self.yes + self.no;
        (judged > 0).then(|| self.yes as f64 / judged as f64)
    }

    pub fn tally<'a>(verdicts: impl IntoIterator<Item = &'a Result<AgentVerdict, AgentError>>) -> Self {
        let mut c = Self::default();
        for v in verdicts {
            match v {
                Ok(AgentVerdict { decision: Decision::Yes, .. }) => c.yes += 1,
                Ok(_) => c.no += 1,
                Err(_) => c.errors += 1,
            }
        }
        c
    }
}

/// Runs A3 over `(cot, code)` pairs with at most `max_in_flight` calls
/// outstanding; verdicts come back in input order.
pub fn consistency_verdicts(
    records: &[(String, String)],
    client: &ChatClient,
    max_in_flight: usize,
) -> Vec<Result<AgentVerdict, AgentError>> {
    bounded_map(records, max_in_flight, |i, (cot, code)| {
        check_consistency(client, &format!("record-{i}"), code, cot)
    })
}

pub fn consistency_rate(records: &[(String, String)], client: &ChatClient, max_in_flight: usize) -> ConsistencyCounts {
    ConsistencyCounts::tally(&consistency_verdicts(records, client, max_in_flight))
}

/// A value in [0, 1] as a percentage rounded to two decimals, e.g. "0.61".
pub fn percent(x: f64) -> String {
    format!("{:.2}", round2(100.0 * x))
}

/// Rounds half away from zero at two decimals. The nudge absorbs binary
/// representation error so that e.g. 62.775 rounds up.
pub fn round2(x: f64) -> f64 {
    let scaled = x * 100.0;
    let nudge = scaled.abs() * 1e-12;
    (scaled + nudge.copysign(scaled)).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    #[serde(default)]
    pub consistency_errors: usize,
    pub n_samples: usize,
}

/// Metric values for one candidate/reference pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
}

pub fn score_pair(candidate: &TokenSeq, reference: &TokenSeq, bleu: &BleuOptions) -> PairScores {
    let mut b = [0.0; 4];
    for (n, slot) in (1..=4).zip(b.iter_mut()) {
        *slot = bleu_n_with(candidate, reference, n, bleu);
    }
    PairScores {
        bleu: b,
        meteor: meteor_lite(candidate, reference),
        rouge_l: rouge_l(candidate, reference),
    }
}

/// Macro-averages per-pair scores. Consistency is filled in only when
/// `consistency` is supplied (see [`consistency_rate`]).
pub fn evaluate_corpus(
    candidates: &[String],
    references: &[String],
    bleu: &BleuOptions,
    consistency: Option<ConsistencyCounts>,
) -> Result<MetricReport, MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sum = PairScores {
        bleu: [0.0; 4],
        meteor: 0.0,
        rouge_l: 0.0,
    };
    for (c, r) in candidates.iter().zip(references) {
        let s = score_pair(&TokenSeq::tokenize(c), &TokenSeq::tokenize(r), bleu);
        for k in 0..4 {
            sum.bleu[k] += s.bleu[k];
        }
        sum.meteor += s.meteor;
        sum.rouge_l += s.rouge_l;
    }
    let n = candidates.len() as f64;
    Ok(MetricReport {
        bleu1: sum.bleu[0] / n,
        bleu2: sum.bleu[1] / n,
        bleu3: sum.bleu[2] / n,
        bleu4: sum.bleu[3] / n,
        meteor: sum.meteor / n,
        rouge_l: sum.rouge_l / n,
        consistency: consistency.and_then(|c| c.rate()),
        consistency_errors: consistency.map_or(0, |c| c.errors),
        n_samples: candidates.len(),
    })
}

impl MetricReport {
    /// Column layout of the CoT-quality results table, values in percent.
    pub fn to_table(&self) -> String {
        let mut header = vec!["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "Meteor", "Rouge-L"];
        let mut row = vec![
            percent(self.bleu1),
            percent(self.bleu2),
            percent(self.bleu3),
            percent(self.bleu4),
            percent(self.meteor),
            percent(self.rouge_l),
        ];
        if let Some(c) = self.consistency {
            header.push("Consistency");
            row.push(percent(c));
        }
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, v)| h.len().max(v.len())).collect();
        let fmt = |cells: Vec<String>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = fmt(header.iter().map(|s| s.to_string()).collect());
        out.push('\n');
        out.push_str(&fmt(row));
        out.push('\n');
        out.push_str(&format!("n = {}", self.n_samples));
        if self.consistency_errors > 0 {
            out.push_str(&format!(", consistency errors excluded = {}", self.consistency_errors));
        }
        out.push('\n');
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu3", self.bleu3),
            ("bleu4", self.bleu4),
            ("meteor", self.meteor),
            ("rouge_l", self.rouge_l),
        ] {
            s.push_str(&format!("{k},{v}\n"));
        }
        if let Some(c) = self.consistency {
            s.push_str(&format!("consistency,{c}\n"));
        }
        s.push_str(&format!("n_samples,{}\n", self.n_samples));
        s
    }
}
