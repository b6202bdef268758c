//! Dataset records, JSONL ingestion, train/valid splitting and corpus
//! token statistics.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Every CoT produced by the generator agent starts with this line.
pub const COT_PREFIX: &str = "How to solve:";

/// Token-count cutoff reported in the corpus statistics table.
pub const LENGTH_CUTOFF: usize = 256;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("n_valid = {n_valid} is out of range for {total} records")]
    SplitOutOfRange { n_valid: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Thevault,
    Mbpp,
    Leetcode,
    #[default]
    Other,
}

/// One (prompt, code, docstring) pair flowing through the cleaning passes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSample {
    pub id: String,
    #[serde(default)]
    pub prompt: String,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub docstring: Option<String>,
    #[serde(default)]
    pub origin: Origin,
}

/// One (prompt, chain-of-thought, code) triple; the dataset unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTRecord {
    pub id: String,
    pub prompt: String,
    pub cot: String,
    pub code: String,
}

/// A JSONL record kind: its required keys and per-record invariants.
pub trait Record: DeserializeOwned + Serialize {
    const REQUIRED: &'static [&'static str];

    fn id(&self) -> &str;

    fn validate(&self) -> std::result::Result<(), String>;
}

impl Record for CodeSample {
    const REQUIRED: &'static [&'static str] = &["id", "code"];

    fn id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.code.is_empty() {
            return Err(format!("record {}: empty code", self.id));
        }
        Ok(())
    }
}

impl Record for CoTRecord {
    const REQUIRED: &'static [&'static str] = &["id", "prompt", "cot", "code"];

    fn id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.cot.trim().is_empty() {
            return Err(format!("record {}: empty cot", self.id));
        }
        if !self.cot.trim_start().starts_with(COT_PREFIX) {
            return Err(format!("record {}: cot does not start with {COT_PREFIX:?}", self.id));
        }
        Ok(())
    }
}

/// Parses JSONL text. Blank lines are skipped; unknown keys are ignored.
pub fn parse_jsonl<T: Record>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.split('\n').enumerate() {
        let line = idx + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| CorpusError::Json {
            line,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| CorpusError::Json {
            line,
            message: "expected a JSON object".into(),
        })?;
        for field in T::REQUIRED {
            if !obj.contains_key(*field) {
                return Err(CorpusError::MissingField { line, field });
            }
        }
        let record: T = serde_json::from_value(value).map_err(|e| CorpusError::Invalid {
            line,
            reason: e.to_string(),
        })?;
        record
            .validate()
            .map_err(|reason| CorpusError::Invalid { line, reason })?;
        if !seen.insert(record.id().to_string()) {
            return Err(CorpusError::Invalid {
                line,
                reason: format!("duplicate id {:?}", record.id()),
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Loads records from a UTF-8 JSONL file in file order.
pub fn load_jsonl<T: Record>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(&text)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize to JSON"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("records serialize to JSON");
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Seeded random train/valid partition.
///
/// Both halves keep the input's relative order.
pub fn split<T: Clone>(records: &[T], n_valid: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if n_valid > records.len() {
        return Err(CorpusError::SplitOutOfRange {
            n_valid,
            total: records.len(),
        });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut is_valid = vec![false; records.len()];
    for &i in &order[..n_valid] {
        is_valid[i] = true;
    }
    let mut train = Vec::with_capacity(records.len() - n_valid);
    let mut valid = Vec::with_capacity(n_valid);
    for (r, v) in records.iter().zip(is_valid) {
        if v {
            valid.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, valid))
}

/// Maps text to a deterministic token count.
pub trait Tokenizer {
    fn count(&self, text: &str) -> usize;
}

/// Counts runs of non-whitespace characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Length statistics of one text field across a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub avg: f64,
    pub median: f64,
    pub frac_le_256: f64,
}

impl FieldStats {
    /// `None` for an empty list.
    pub fn from_counts(counts: &[usize]) -> Option<Self> {
        if counts.is_empty() {
            return None;
        }
        let n = counts.len();
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        let sum: usize = sorted.iter().sum();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let short = sorted.iter().filter(|&&c| c <= LENGTH_CUTOFF).count();
        Some(Self {
            avg: sum as f64 / n as f64,
            median,
            frac_le_256: short as f64 / n as f64,
        })
    }
}

/// Table-I style statistics; `prompt`/`cot` are absent for an empty corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub prompt: Option<FieldStats>,
    pub cot: Option<FieldStats>,
}

pub fn token_stats(records: &[CoTRecord], tokenizer: &dyn Tokenizer) -> CorpusStats {
    let prompts: Vec<usize> = records.iter().map(|r| tokenizer.count(&r.prompt)).collect();
    let cots: Vec<usize> = records.iter().map(|r| tokenizer.count(&r.cot)).collect();
    CorpusStats {
        count: records.len(),
        prompt: FieldStats::from_counts(&prompts),
        cot: FieldStats::from_counts(&cots),
    }
}

fn fmt_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}%", x * 100.0)).unwrap_or_else(|| "-".into())
}

impl CorpusStats {
    fn rows(&self) -> Vec<(String, String)> {
        let p = self.prompt;
        let c = self.cot;
        vec![
            ("Count".into(), self.count.to_string()),
            ("Avg in Prompt".into(), fmt_num(p.map(|s| s.avg))),
            ("Median in Prompt".into(), fmt_num(p.map(|s| s.median))),
            (format!("<= {LENGTH_CUTOFF} in Prompt"), fmt_pct(p.map(|s| s.frac_le_256))),
            ("Avg in CoT".into(), fmt_num(c.map(|s| s.avg))),
            ("Median in CoT".into(), fmt_num(c.map(|s| s.median))),
            (format!("<= {LENGTH_CUTOFF} in CoT"), fmt_pct(c.map(|s| s.frac_le_256))),
        ]
    }

    /// Two-column aligned table in the row order of the published layout.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>10}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let (p, c) = (self.prompt, self.cot);
        let mut out = String::from("metric,prompt,cot\n");
        let _ = writeln!(out, "count,{},{}", self.count, self.count);
        let _ = writeln!(out, "avg,{},{}", cell(p.map(|s| s.avg)), cell(c.map(|s| s.avg)));
        let _ = writeln!(
            out,
            "median,{},{}",
            cell(p.map(|s| s.median)),
            cell(c.map(|s| s.median))
        );
        let _ = writeln!(
            out,
            "frac_le_{LENGTH_CUTOFF},{},{}",
            cell(p.map(|s| s.frac_le_256)),
            cell(c.map(|s| s.frac_le_256))
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, prompt: &str, cot: &str) -> CoTRecord {
        CoTRecord {
            id: id.into(),
            prompt: prompt.into(),
            cot: format!("How to solve: {cot}"),
            code: "pass".into(),
        }
    }

    #[test]
    fn empty_file_is_empty_list() {
        let out: Vec<CoTRecord> = parse_jsonl("").unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn single_line_round_trips_bytes() {
        let line = r#"{"id":"a1","prompt":"def f(x):\n    \"\"\"double\"\"\"","cot":"How to solve:\nStep 1. Return 2*x.","code":"    return 2 * x"}"#;
        let recs: Vec<CoTRecord> = parse_jsonl(line).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(to_jsonl(&recs), format!("{line}\n"));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = format!(
            "{}\n{}\n{{not json\n",
            r#"{"id":"a","code":"x"}"#, r#"{"id":"b","code":"y"}"#
        );
        let err = parse_jsonl::<CodeSample>(&text).unwrap_err();
        assert!(matches!(err, CorpusError::Json { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn missing_field_is_reported() {
        let err = parse_jsonl::<CoTRecord>(r#"{"id":"a","prompt":"p","code":"c"}"#).unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { line: 1, field: "cot" }));
    }

    #[test]
    fn unknown_keys_ignored_and_origin_parsed() {
        let recs: Vec<CodeSample> =
            parse_jsonl(r#"{"id":"a","code":"x","origin":"mbpp","stars":5}"#).unwrap();
        assert_eq!(recs[0].origin, Origin::Mbpp);
        assert_eq!(recs[0].docstring, None);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = "{\"id\":\"a\",\"code\":\"x\"}\n{\"id\":\"a\",\"code\":\"y\"}\n";
        let err = parse_jsonl::<CodeSample>(text).unwrap_err();
        assert!(matches!(err, CorpusError::Invalid { line: 2, .. }));
    }

    #[test]
    fn cot_must_carry_prefix() {
        let err = parse_jsonl::<CoTRecord>(r#"{"id":"a","prompt":"p","cot":"Step 1.","code":"c"}"#)
            .unwrap_err();
        assert!(err.to_string().contains("How to solve:"));
    }

    #[test]
    fn missing_file() {
        let err = load_jsonl::<CodeSample>("/definitely/not/here.jsonl").unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn split_zero_valid() {
        let recs: Vec<u32> = (0..10).collect();
        let (train, valid) = split(&recs, 0, 42).unwrap();
        assert_eq!(train, recs);
        assert!(valid.is_empty());
    }

    #[test]
    fn split_out_of_range() {
        let recs: Vec<u32> = (0..10).collect();
        assert!(matches!(
            split(&recs, 11, 42),
            Err(CorpusError::SplitOutOfRange { n_valid: 11, total: 10 })
        ));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let recs: Vec<u32> = (0..10).collect();
        let a = split(&recs, 3, 42).unwrap();
        let b = split(&recs, 3, 42).unwrap();
        assert_eq!(a, b);
        let differs = (0..20u64).any(|s| split(&recs, 3, 1000 + s).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn stats_single_record() {
        let stats = token_stats(&[rec("a", "a b c d e f g", "x")], &WhitespaceTokenizer);
        let p = stats.prompt.unwrap();
        assert_eq!((p.avg, p.median, p.frac_le_256), (7.0, 7.0, 1.0));
    }

    #[test]
    fn stats_empty_corpus_reports_absent_fields() {
        let stats = token_stats(&[], &WhitespaceTokenizer);
        assert_eq!(stats.count, 0);
        assert!(stats.prompt.is_none() && stats.cot.is_none());
        assert!(stats.to_table().contains('-'));
    }

    #[test]
    fn even_median_is_mean_of_middle_pair() {
        let s = FieldStats::from_counts(&[4, 1, 3, 2]).unwrap();
        assert_eq!(s.median, 2.5);
    }

    #[test]
    fn csv_header() {
        let stats = token_stats(&[rec("a", "x y", "z")], &WhitespaceTokenizer);
        let csv = stats.to_csv();
        assert!(csv.starts_with("metric,prompt,cot\n"));
        // "How to solve: z" is four whitespace tokens
        assert!(csv.contains("avg,2,4\n"));
    }
}
