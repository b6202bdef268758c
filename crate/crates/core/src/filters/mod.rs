//! Rule-based corpus cleaning: syntax/method extraction (R1), doc/code
//! consistency (R2) and similarity filtering against protected sets (R3).

mod doc;
mod similarity;
mod syntax;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CodeSample;

pub use doc::{doc_overlap, filter_doc_consistency, DocChecker, LexicalDocChecker};
pub use similarity::{
    cosine, filter_similarity, Embedder, EmbeddingVector, HashedTfIdf, SimilarityRun,
    DEFAULT_EMBEDDING_DIM, DEFAULT_R3_THRESHOLD,
};
pub use syntax::{filter_syntax, CodeParser, FunctionUnit, ParseOutcome, PythonParser, SyntaxRun};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("similarity threshold {0} is outside (0, 1]")]
    ThresholdOutOfRange(f64),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("parser failure: {0}")]
    Parser(String),
    /// The consistency checker could not be reached; retrying may succeed.
    #[error("doc checker unavailable (retriable): {0}")]
    CheckerTransport(String),
}

impl FilterError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, FilterError::CheckerTransport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    R1,
    R2,
    R3,
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: bool,
    pub rule: Rule,
    pub reason: String,
}

impl FilterOutcome {
    pub fn keep(rule: Rule) -> Self {
        Self {
            kept: true,
            rule,
            reason: "ok".into(),
        }
    }

    pub fn drop(rule: Rule, reason: impl Into<String>) -> Self {
        let reason = reason.into();
        debug_assert!(!reason.is_empty());
        Self {
            kept: false,
            rule,
            reason,
        }
    }
}

/// One line of the cleaning audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub id: String,
    pub rule: Rule,
    pub kept: bool,
    pub reason: String,
}

impl AuditRecord {
    fn new(id: &str, outcome: &FilterOutcome) -> Self {
        Self {
            id: id.to_string(),
            rule: outcome.rule,
            kept: outcome.kept,
            reason: outcome.reason.clone(),
        }
    }
}

#[derive(Debug, Default)]
pub struct CleanReport {
    pub kept: Vec<CodeSample>,
    pub audit: Vec<AuditRecord>,
    pub warnings: Vec<String>,
    /// Corpus size after R1, R2 and R3.
    pub stage_sizes: [usize; 3],
}

/// Runs R1 → R2 → R3 in order.
///
/// R3 embeds with a [`HashedTfIdf`] fitted on the R2 survivors plus the
/// protected set.
pub fn clean(
    samples: &[CodeSample],
    protected: &[CodeSample],
    parser: &dyn CodeParser,
    checker: &dyn DocChecker,
    threshold: f64,
) -> Result<CleanReport, FilterError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(FilterError::ThresholdOutOfRange(threshold));
    }
    let mut report = CleanReport::default();

    let mut after_r1 = Vec::new();
    for s in samples {
        let run = filter_syntax(s, parser)?;
        report.audit.push(AuditRecord::new(&s.id, &run.outcome));
        after_r1.extend(run.units);
    }
    report.stage_sizes[0] = after_r1.len();

    let mut after_r2 = Vec::new();
    for s in after_r1 {
        let outcome = filter_doc_consistency(&s, checker)?;
        report.audit.push(AuditRecord::new(&s.id, &outcome));
        if outcome.kept {
            after_r2.push(s);
        }
    }
    report.stage_sizes[1] = after_r2.len();

    let embedder = HashedTfIdf::fit(
        after_r2.iter().chain(protected).map(|s| s.code.as_str()),
        DEFAULT_EMBEDDING_DIM,
    );
    let run = filter_similarity(&after_r2, protected, &embedder, threshold)?;
    report.warnings.extend(run.warnings);
    for (s, outcome) in after_r2.into_iter().zip(run.outcomes) {
        report.audit.push(AuditRecord::new(&s.id, &outcome));
        if outcome.kept {
            report.kept.push(s);
        }
    }
    report.stage_sizes[2] = report.kept.len();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Origin;

    fn sample(id: &str, code: &str) -> CodeSample {
        CodeSample {
            id: id.into(),
            prompt: String::new(),
            code: code.into(),
            docstring: None,
            origin: Origin::Other,
        }
    }

    #[test]
    fn pipeline_never_grows() {
        let samples = vec![
            sample(
                "add",
                "def add(a, b):\n    \"\"\"Return the sum of a and b.\"\"\"\n    return a + b\n",
            ),
            sample("broken", "def f(:\n    pass\n"),
            sample("nodoc", "def g(x):\n    return x\n"),
            sample(
                "two",
                "class K:\n    def area(self, w, h):\n        \"\"\"Compute area from width and height.\"\"\"\n        return w * h\n    def perimeter(self, w, h):\n        \"\"\"Compute perimeter from width and height.\"\"\"\n        return 2 * (w + h)\n",
            ),
        ];
        let protected = vec![sample(
            "he0",
            "def add(a, b):\n    \"\"\"Return the sum of a and b.\"\"\"\n    return a + b\n",
        )];
        let report =
            clean(&samples, &protected, &PythonParser, &LexicalDocChecker::default(), 0.9)
                .unwrap();
        let [r1, r2, r3] = report.stage_sizes;
        assert!(r2 <= r1 && r3 <= r2);
        let ids: Vec<_> = report.kept.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["two::K.area", "two::K.perimeter"]);
        assert!(report
            .audit
            .iter()
            .any(|a| a.id == "add" && a.rule == Rule::R3 && !a.kept));
    }

    #[test]
    fn rejects_bad_threshold() {
        let err = clean(&[], &[], &PythonParser, &LexicalDocChecker::default(), 0.0).unwrap_err();
        assert!(matches!(err, FilterError::ThresholdOutOfRange(_)));
    }
}
