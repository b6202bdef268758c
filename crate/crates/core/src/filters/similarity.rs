//! R3: drop candidates too similar to any protected (evaluation) sample.

use log::warn;

use super::{FilterError, FilterOutcome, Rule};
use crate::corpus::CodeSample;

pub const DEFAULT_EMBEDDING_DIM: usize = 1024;
pub const DEFAULT_R3_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// ⟨u,v⟩ / (‖u‖·‖v‖), clamped to [-1, 1].
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, FilterError> {
    if u.dim() != v.dim() {
        return Err(FilterError::DimensionMismatch(u.dim(), v.dim()));
    }
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.values.iter().zip(&v.values) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(FilterError::ZeroVector);
    }
    // sqrt(x·x) == x exactly, so cosine(x, x) is exactly 1
    Ok((dot / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, FilterError>;
}

/// L2-normalized TF-IDF over character 3-grams, feature-hashed into a
/// fixed number of buckets.
#[derive(Debug, Clone)]
pub struct HashedTfIdf {
    idf: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashedTfIdf {
    /// Every bucket weighted 1 (plain term frequency).
    pub fn unfitted(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { idf: vec![1.0; dim] }
    }

    /// Smoothed idf: ln((1 + N) / (1 + df)) + 1.
    pub fn fit<'a>(docs: impl IntoIterator<Item = &'a str>, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        let mut df = vec![0usize; dim];
        let mut n = 0usize;
        for doc in docs {
            n += 1;
            let mut seen = vec![false; dim];
            for b in Self::buckets(doc, dim) {
                if !seen[b] {
                    seen[b] = true;
                    df[b] += 1;
                }
            }
        }
        let idf = df
            .iter()
            .map(|&d| ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        Self { idf }
    }

    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    fn buckets(text: &str, dim: usize) -> Vec<usize> {
        let chars: Vec<char> = text.chars().collect();
        let bucket = |gram: &[char]| {
            let s: String = gram.iter().collect();
            (fnv1a(s.as_bytes()) % dim as u64) as usize
        };
        if chars.len() < 3 {
            return if chars.is_empty() { vec![] } else { vec![bucket(&chars)] };
        }
        chars.windows(3).map(bucket).collect()
    }
}

impl Embedder for HashedTfIdf {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, FilterError> {
        if text.is_empty() {
            return Err(FilterError::EmptyText);
        }
        let mut v = vec![0.0; self.dim()];
        for b in Self::buckets(text, self.dim()) {
            v[b] += 1.0;
        }
        for (x, w) in v.iter_mut().zip(&self.idf) {
            *x *= w;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        Ok(EmbeddingVector::new(v))
    }
}

#[derive(Debug, Clone)]
pub struct SimilarityRun {
    /// One outcome per candidate, in input order.
    pub outcomes: Vec<FilterOutcome>,
    pub warnings: Vec<String>,
}

/// R3. A candidate is dropped when its best cosine against the protected
/// set reaches `threshold` (ties drop).
pub fn filter_similarity(
    candidates: &[CodeSample],
    protected: &[CodeSample],
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<SimilarityRun, FilterError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(FilterError::ThresholdOutOfRange(threshold));
    }
    let mut warnings = Vec::new();
    if protected.is_empty() {
        let msg = "R3: protected set is empty; every candidate is kept".to_string();
        warn!("{msg}");
        warnings.push(msg);
    }
    let protected_vecs = protected
        .iter()
        .map(|p| embedder.embed(&p.code))
        .collect::<Result<Vec<_>, _>>()?;

    let mut outcomes = Vec::with_capacity(candidates.len());
    for c in candidates {
        let v = embedder.embed(&c.code)?;
        let mut best: Option<(f64, usize)> = None;
        for (j, p) in protected_vecs.iter().enumerate() {
            let s = cosine(&v, p)?;
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, j));
            }
        }
        outcomes.push(match best {
            Some((s, j)) if s >= threshold => FilterOutcome::drop(
                Rule::R3,
                format!("cosine {s:.4} with protected {} >= {threshold}", protected[j].id),
            ),
            _ => FilterOutcome::keep(Rule::R3),
        });
    }
    Ok(SimilarityRun { outcomes, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Origin;
    use proptest::prelude::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec())
    }

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
    fn cosine_hand_values() {
        assert_eq!(cosine(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(), 0.0);
        let expect = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let got = cosine(&ev(&[1.0, 2.0, 3.0]), &ev(&[4.0, 5.0, 6.0])).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 0.974_631_846).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&ev(&[1.0]), &ev(&[1.0, 2.0])),
            Err(FilterError::DimensionMismatch(1, 2))
        ));
        assert!(matches!(cosine(&ev(&[0.0, 0.0]), &ev(&[1.0, 2.0])), Err(FilterError::ZeroVector)));
    }

    #[test]
    fn identical_code_dropped_even_at_threshold_one() {
        let code = "def f(x):\n    return x * 2\n";
        let e = HashedTfIdf::unfitted(DEFAULT_EMBEDDING_DIM);
        let run = filter_similarity(&[sample("c", code)], &[sample("p", code)], &e, 1.0).unwrap();
        assert!(!run.outcomes[0].kept);
    }

    #[test]
    fn empty_protected_keeps_all_with_warning() {
        let e = HashedTfIdf::unfitted(16);
        let run = filter_similarity(&[sample("a", "x = 1"), sample("b", "y")], &[], &e, 0.5).unwrap();
        assert!(run.outcomes.iter().all(|o| o.kept));
        assert_eq!(run.warnings.len(), 1);
    }

    #[test]
    fn embedding_nonzero_for_short_text() {
        let e = HashedTfIdf::fit(["ab", "abc"], 8);
        assert!(e.embed("a").unwrap().values().iter().any(|x| *x != 0.0));
        assert!(matches!(e.embed(""), Err(FilterError::EmptyText)));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in proptest::collection::vec(-10.0f64..10.0, 5),
            v in proptest::collection::vec(-10.0f64..10.0, 5),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let (a, b) = (ev(&u), ev(&v));
            let s = cosine(&a, &b).unwrap();
            prop_assert!((s - cosine(&b, &a).unwrap()).abs() < 1e-12);
            let scaled = ev(&u.iter().map(|x| x * c).collect::<Vec<_>>());
            prop_assert!((s - cosine(&scaled, &b).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn raising_threshold_never_drops_more(t1 in 0.05f64..1.0, dt in 0.0f64..0.5) {
            let t2 = (t1 + dt).min(1.0);
            let cands = [
                sample("a", "def f(x): return x + 1"),
                sample("b", "def g(y): return y + 1"),
                sample("c", "print('hello world')"),
            ];
            let prot = [sample("p", "def f(x): return x + 2")];
            let e = HashedTfIdf::fit(cands.iter().chain(&prot).map(|s| s.code.as_str()), 64);
            let lo = filter_similarity(&cands, &prot, &e, t1).unwrap();
            let hi = filter_similarity(&cands, &prot, &e, t2).unwrap();
            for (l, h) in lo.outcomes.iter().zip(&hi.outcomes) {
                prop_assert!(!l.kept || h.kept);
            }
        }
    }
}
