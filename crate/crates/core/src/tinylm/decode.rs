//! Decoding strategies over any next-token scorer: greedy, multinomial
//! sampling, beam search and contrastive search.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{log_softmax, softmax};
use super::{Adapters, Mat, Model, TinyLmError};

/// What decoding needs from a model.
pub trait NextToken {
    fn vocab(&self) -> usize;
    fn eos(&self) -> Option<usize>;
    /// Longest sequence the scorer accepts.
    fn max_len(&self) -> usize;
    /// Log-probabilities of the token following `tokens`.
    fn next_log_probs(&self, tokens: &[usize]) -> Result<Vec<f64>, TinyLmError>;
    /// One hidden vector per position of `tokens`.
    fn hidden_states(&self, tokens: &[usize]) -> Result<Mat, TinyLmError>;
}

/// A base model with optional adapters.
#[derive(Clone, Copy)]
pub struct Adapted<'a> {
    pub model: &'a Model,
    pub adapters: Option<&'a Adapters>,
}

impl NextToken for Adapted<'_> {
    fn vocab(&self) -> usize {
        self.model.config.vocab
    }

    fn eos(&self) -> Option<usize> {
        self.model.config.eos_id
    }

    fn max_len(&self) -> usize {
        self.model.config.max_seq_len
    }

    fn next_log_probs(&self, tokens: &[usize]) -> Result<Vec<f64>, TinyLmError> {
        let out = self.model.forward(tokens, self.adapters)?;
        Ok(log_softmax(out.logits.row(out.logits.rows - 1)))
    }

    fn hidden_states(&self, tokens: &[usize]) -> Result<Mat, TinyLmError> {
        Ok(self.model.forward(tokens, self.adapters)?.hidden)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Sample { temperature: f64, seed: u64 },
    Beam { width: usize },
    Contrastive { top_k: usize, penalty_alpha: f64 },
}

pub fn decode(m: &dyn NextToken, prompt: &[usize], max_new: usize, strategy: Strategy) -> Result<Vec<usize>, TinyLmError> {
    match strategy {
        Strategy::Greedy => decode_greedy(m, prompt, max_new),
        Strategy::Sample { temperature, seed } => decode_sample(m, prompt, max_new, temperature, seed),
        Strategy::Beam { width } => decode_beam(m, prompt, max_new, width),
        Strategy::Contrastive { top_k, penalty_alpha } => decode_contrastive(m, prompt, max_new, top_k, penalty_alpha),
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Steps left given the model's length budget.
fn budget(m: &dyn NextToken, prompt: &[usize], max_new: usize) -> Result<usize, TinyLmError> {
    if prompt.is_empty() {
        return Err(TinyLmError::EmptySequence);
    }
    if prompt.len() > m.max_len() {
        return Err(TinyLmError::SequenceTooLong {
            len: prompt.len(),
            max: m.max_len(),
        });
    }
    // the last generated token is never fed back, hence the +1
    Ok(max_new.min(m.max_len() + 1 - prompt.len()))
}

/// Highest-probability token at every step. Returns the continuation
/// only; an emitted end-of-sequence token is included and ends decoding.
pub fn decode_greedy(m: &dyn NextToken, prompt: &[usize], max_new: usize) -> Result<Vec<usize>, TinyLmError> {
    let steps = budget(m, prompt, max_new)?;
    let mut seq = prompt.to_vec();
    for _ in 0..steps {
        let t = argmax(&m.next_log_probs(&seq)?);
        seq.push(t);
        if Some(t) == m.eos() {
            break;
        }
    }
    Ok(seq.split_off(prompt.len()))
}

/// Seeded draws from softmax(log p / temperature).
pub fn decode_sample(
    m: &dyn NextToken,
    prompt: &[usize],
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<usize>, TinyLmError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(TinyLmError::InvalidParameter(format!("temperature must be > 0, got {temperature}")));
    }
    let steps = budget(m, prompt, max_new)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = prompt.to_vec();
    for _ in 0..steps {
        let lp = m.next_log_probs(&seq)?;
        let scaled: Vec<f64> = lp.iter().map(|x| x / temperature).collect();
        let t = draw(&softmax(&scaled), &mut rng);
        seq.push(t);
        if Some(t) == m.eos() {
            break;
        }
    }
    Ok(seq.split_off(prompt.len()))
}

/// Inverse-CDF draw from a probability vector.
pub fn draw(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the last cumulative sum
    p.iter().rposition(|x| *x > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    done: bool,
}

/// Higher score first; among equal scores the lexicographically smaller
/// continuation, which makes width 1 agree with greedy's tie rule.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search ranking complete sequences by summed log-probability
/// (no length normalization). Finished hypotheses stay in the beam.
pub fn decode_beam(m: &dyn NextToken, prompt: &[usize], max_new: usize, width: usize) -> Result<Vec<usize>, TinyLmError> {
    if width == 0 {
        return Err(TinyLmError::InvalidParameter("beam width must be >= 1".into()));
    }
    let steps = budget(m, prompt, max_new)?;
    let mut beam = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        done: false,
    }];
    for _ in 0..steps {
        if beam.iter().all(|h| h.done) {
            break;
        }
        let mut next = Vec::new();
        for h in &beam {
            if h.done {
                next.push(h.clone());
                continue;
            }
            let mut ctx = prompt.to_vec();
            ctx.extend(&h.tokens);
            for (t, lp) in m.next_log_probs(&ctx)?.into_iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                next.push(Hyp {
                    tokens,
                    score: h.score + lp,
                    done: Some(t) == m.eos(),
                });
            }
        }
        next.sort_by(rank);
        next.truncate(width);
        beam = next;
    }
    Ok(beam.into_iter().min_by(rank).map(|h| h.tokens).unwrap_or_default())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Among the top-k tokens, picks argmax of (1−α)·p(v) − α·max cosine
/// between v's hidden state and every earlier position's.
pub fn decode_contrastive(
    m: &dyn NextToken,
    prompt: &[usize],
    max_new: usize,
    top_k: usize,
    penalty_alpha: f64,
) -> Result<Vec<usize>, TinyLmError> {
    if top_k == 0 {
        return Err(TinyLmError::InvalidParameter("top_k must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&penalty_alpha) {
        return Err(TinyLmError::InvalidParameter(format!("penalty_alpha must lie in [0, 1], got {penalty_alpha}")));
    }
    let steps = budget(m, prompt, max_new)?;
    let mut seq = prompt.to_vec();
    for _ in 0..steps {
        let p: Vec<f64> = m.next_log_probs(&seq)?.into_iter().map(f64::exp).collect();
        let mut cands: Vec<usize> = (0..p.len()).collect();
        cands.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        cands.truncate(top_k);
        let t = if cands.len() == 1 || penalty_alpha == 0.0 {
            cands[0]
        } else {
            let mut best = (f64::NEG_INFINITY, cands[0]);
            for &v in &cands {
                let mut ext = seq.clone();
                ext.push(v);
                let h = m.hidden_states(&ext)?;
                let last = h.row(h.rows - 1);
                let sim = (0..h.rows - 1).map(|j| cosine(last, h.row(j))).fold(f64::NEG_INFINITY, f64::max);
                let score = (1.0 - penalty_alpha) * p[v] - penalty_alpha * sim;
                if score > best.0 {
                    best = (score, v);
                }
            }
            best.1
        };
        seq.push(t);
        if Some(t) == m.eos() {
            break;
        }
    }
    Ok(seq.split_off(prompt.len()))
}

/// Sum of log-probabilities of `continuation` after `prompt`.
pub fn sequence_log_prob(m: &dyn NextToken, prompt: &[usize], continuation: &[usize]) -> Result<f64, TinyLmError> {
    let mut seq = prompt.to_vec();
    let mut total = 0.0;
    for &t in continuation {
        total += m.next_log_probs(&seq)?[t];
        seq.push(t);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Next-token distribution depends only on the previous token.
    struct Bigram {
        table: Vec<Vec<f64>>,
        eos: Option<usize>,
    }

    impl NextToken for Bigram {
        fn vocab(&self) -> usize {
            self.table.len()
        }
        fn eos(&self) -> Option<usize> {
            self.eos
        }
        fn max_len(&self) -> usize {
            64
        }
        fn next_log_probs(&self, tokens: &[usize]) -> Result<Vec<f64>, TinyLmError> {
            Ok(self.table[*tokens.last().unwrap()].iter().map(|p| p.ln()).collect())
        }
        fn hidden_states(&self, tokens: &[usize]) -> Result<Mat, TinyLmError> {
            let n = self.table.len();
            let mut h = Mat::zeros(tokens.len(), n);
            for (i, &t) in tokens.iter().enumerate() {
                *h.at_mut(i, t) = 1.0;
            }
            Ok(h)
        }
    }

    #[test]
    fn greedy_hand_trace() {
        // 0 → 2 → 1 → 3 (eos)
        let m = Bigram {
            table: vec![
                vec![0.1, 0.2, 0.6, 0.1],
                vec![0.2, 0.1, 0.3, 0.4],
                vec![0.25, 0.5, 0.15, 0.1],
                vec![0.25; 4],
            ],
            eos: Some(3),
        };
        assert_eq!(decode_greedy(&m, &[0], 10).unwrap(), [2, 1, 3]);
        assert_eq!(decode_greedy(&m, &[0], 2).unwrap(), [2, 1]);
        assert!(decode_greedy(&m, &[0], 0).unwrap().is_empty());
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let m = Bigram {
            table: vec![vec![0.4, 0.4, 0.2]; 3],
            eos: None,
        };
        assert_eq!(decode_greedy(&m, &[2], 3).unwrap(), [0, 0, 0]);
        assert_eq!(decode_beam(&m, &[2], 3, 1).unwrap(), [0, 0, 0]);
    }

    #[test]
    fn contrastive_penalizes_repetition() {
        let m = Bigram {
            table: vec![vec![0.4, 0.2, 0.2, 0.2]; 4],
            eos: None,
        };
        let greedy = decode_greedy(&m, &[0], 8).unwrap();
        assert_eq!(greedy, [0; 8]);
        let c = decode_contrastive(&m, &[0], 8, 4, 0.6).unwrap();
        assert_ne!(c, greedy);
        assert_eq!(decode_contrastive(&m, &[0], 8, 1, 0.6).unwrap(), greedy);
        assert_eq!(decode_contrastive(&m, &[0], 8, 4, 0.0).unwrap(), greedy);
    }

    #[test]
    fn parameter_errors() {
        let m = Bigram {
            table: vec![vec![0.5, 0.5]; 2],
            eos: None,
        };
        assert!(decode_sample(&m, &[0], 3, 0.0, 1).is_err());
        assert!(decode_beam(&m, &[0], 3, 0).is_err());
        assert!(decode_contrastive(&m, &[0], 3, 0, 0.5).is_err());
        assert!(decode_contrastive(&m, &[0], 3, 2, 1.5).is_err());
        assert!(decode_greedy(&m, &[], 3).is_err());
    }
}
