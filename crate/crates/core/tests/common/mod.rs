//! Independent oracles and fixtures shared by the integration suites.
//! Nothing here calls the implementation it is meant to check.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cotkit::evalharness::{FnRunner, Problem, RunRequest, RunResponse, RunnerError, Status};
use cotkit::textmetrics::stem;
use cotkit::tinylm::{BlockWeights, Mat, ModelConfig, NextToken, TinyLmError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Random token list over a small vocabulary with inflected forms, so
/// exact and stem matches both occur.
pub fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<String> {
    const WORDS: &[&str] = &[
        "the", "cat", "cats", "sat", "run", "runs", "running", "dog", "a", "blue", "return", "returns",
    ];
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
}

// ---------------------------------------------------------------- BLEU

fn ngrams(t: &[String], k: usize) -> Vec<(Vec<String>, usize)> {
    let mut out: Vec<(Vec<String>, usize)> = Vec::new();
    if t.len() < k {
        return out;
    }
    for i in 0..=t.len() - k {
        let g = t[i..i + k].to_vec();
        match out.iter_mut().find(|(h, _)| *h == g) {
            Some((_, c)) => *c += 1,
            None => out.push((g, 1)),
        }
    }
    out
}

/// Sentence BLEU: geometric mean of clipped precisions for orders
/// 1..=min(n, |cand|), times the brevity penalty. No smoothing.
pub fn oracle_bleu(cand: &[String], reference: &[String], n: usize) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let order = n.min(cand.len());
    let mut product = 1.0;
    for k in 1..=order {
        let c = ngrams(cand, k);
        let r = ngrams(reference, k);
        let mut matched = 0;
        let mut total = 0;
        for (g, cnt) in &c {
            let rc = r.iter().find(|(h, _)| h == g).map_or(0, |(_, x)| *x);
            matched += (*cnt).min(rc);
            total += cnt;
        }
        if matched == 0 {
            return 0.0;
        }
        product *= matched as f64 / total as f64;
    }
    let bp = if cand.len() < reference.len() {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    bp * product.powf(1.0 / order as f64)
}

// ---------------------------------------------------------------- LCS

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|x| it.any(|y| y == *x))
}

/// Longest common subsequence by enumerating every subsequence of the
/// shorter side (fine for at most ~14 tokens).
pub fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 16, "exhaustive LCS is exponential");
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let ones = mask.count_ones() as usize;
        if ones <= best {
            continue;
        }
        let pick: Vec<&String> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
        if is_subsequence(&pick, long) {
            best = ones;
        }
    }
    best
}

pub fn oracle_rouge_l(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = oracle_lcs(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = 1.2f64 * 1.2;
    (1.0 + b2) * r * p / (r + b2 * p)
}

// ---------------------------------------------------------------- METEOR

/// Best alignment among all maximum matchings under stem equality:
/// most exact matches first, then fewest chunks. Returns (m, chunks).
pub fn oracle_meteor_alignment(cand: &[String], reference: &[String]) -> (usize, usize) {
    let cs: Vec<String> = cand.iter().map(|w| stem(w)).collect();
    let rs: Vec<String> = reference.iter().map(|w| stem(w)).collect();
    // the maximum matching size is a per-stem-class count
    let mut classes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for s in &cs {
        classes.entry(s).or_default().0 += 1;
    }
    for s in &rs {
        classes.entry(s).or_default().1 += 1;
    }
    let target: usize = classes.values().map(|(a, b)| a.min(b)).copied().sum();

    struct Search<'a> {
        cand: &'a [String],
        reference: &'a [String],
        cs: &'a [String],
        rs: &'a [String],
        target: usize,
        used: Vec<bool>,
        pairs: Vec<(usize, usize)>,
        best: Option<(usize, usize)>,
    }

    impl Search<'_> {
        fn reachable(&self, i: usize) -> usize {
            let mut left: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for s in &self.cs[i..] {
                left.entry(s).or_default().0 += 1;
            }
            for (j, s) in self.rs.iter().enumerate() {
                if !self.used[j] {
                    left.entry(s).or_default().1 += 1;
                }
            }
            left.values().map(|(a, b)| *a.min(b)).sum()
        }

        fn score(&self) -> (usize, usize) {
            let exact = self.pairs.iter().filter(|(i, j)| self.cand[*i] == self.reference[*j]).count();
            let mut chunks = 0;
            for (k, (i, j)) in self.pairs.iter().enumerate() {
                if k == 0 || !(self.pairs[k - 1].0 + 1 == *i && self.pairs[k - 1].1 + 1 == *j) {
                    chunks += 1;
                }
            }
            (exact, chunks)
        }

        fn go(&mut self, i: usize) {
            if self.pairs.len() + self.reachable(i) < self.target {
                return;
            }
            if i == self.cand.len() {
                let (exact, chunks) = self.score();
                let better = match self.best {
                    None => true,
                    Some((e, c)) => exact > e || (exact == e && chunks < c),
                };
                if better {
                    self.best = Some((exact, chunks));
                }
                return;
            }
            for j in 0..self.reference.len() {
                if !self.used[j] && self.cs[i] == self.rs[j] {
                    self.used[j] = true;
                    self.pairs.push((i, j));
                    self.go(i + 1);
                    self.pairs.pop();
                    self.used[j] = false;
                }
            }
            self.go(i + 1);
        }
    }

    let mut s = Search {
        cand,
        reference,
        cs: &cs,
        rs: &rs,
        target,
        used: vec![false; reference.len()],
        pairs: Vec::new(),
        best: None,
    };
    s.go(0);
    (target, s.best.map_or(0, |(_, c)| c))
}

pub fn oracle_meteor(cand: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = oracle_meteor_alignment(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let frag = chunks as f64 / m as f64;
    fmean * (1.0 - 0.5 * frag * frag * frag)
}

// ---------------------------------------------------------------- tinylm

pub fn tiny_config(d: usize, heads: usize, groups: usize, vocab: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: heads,
        n_kv_groups: groups,
        d_ff: 2 * d,
        vocab,
        n_layers: layers,
        eos_id: None,
        ..Default::default()
    }
}

pub fn random_mat(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) * std * 1.7).collect())
}

/// Rotates consecutive pairs of `v` as complex numbers by pos·base^(-2i/len).
fn rotate(v: &mut [f64], pos: usize, base: f64) {
    let n = v.len();
    for i in 0..n / 2 {
        let freq = 1.0 / base.powf((2 * i) as f64 / n as f64);
        let (re, im) = (v[2 * i], v[2 * i + 1]);
        let (wr, wi) = ((pos as f64 * freq).cos(), (pos as f64 * freq).sin());
        v[2 * i] = re * wr - im * wi;
        v[2 * i + 1] = re * wi + im * wr;
    }
}

/// Plain multi-head attention with one K/V head per query head; inputs
/// and weights as nested loops.
pub fn mha_oracle(x: &Mat, w: &BlockWeights, cfg: &ModelConfig, causal: bool) -> Mat {
    let (n, d, h, hd) = (x.rows, cfg.d_model, cfg.n_heads, cfg.d_model / cfg.n_heads);
    let project = |m: &Mat, row: &[f64]| -> Vec<f64> {
        (0..m.rows).map(|o| (0..m.cols).map(|i| m.data[o * m.cols + i] * row[i]).sum()).collect()
    };
    let xs: Vec<Vec<f64>> = (0..n).map(|t| x.data[t * d..(t + 1) * d].to_vec()).collect();
    let q: Vec<Vec<f64>> = xs.iter().map(|r| project(&w.f_q, r)).collect();
    let k: Vec<Vec<f64>> = xs.iter().map(|r| project(&w.f_k, r)).collect();
    let v: Vec<Vec<f64>> = xs.iter().map(|r| project(&w.f_v, r)).collect();
    let mut concat = vec![vec![0.0; d]; n];
    for head in 0..h {
        let slice = |m: &Vec<Vec<f64>>, t: usize| -> Vec<f64> {
            let mut s = m[t][head * hd..(head + 1) * hd].to_vec();
            rotate(&mut s, t, cfg.rope_base);
            s
        };
        for t in 0..n {
            let qt = slice(&q, t);
            let visible = if causal { t + 1 } else { n };
            let scores: Vec<f64> = (0..visible)
                .map(|u| {
                    let ku = slice(&k, u);
                    qt.iter().zip(&ku).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (u, eu) in e.iter().enumerate() {
                for i in 0..hd {
                    concat[t][head * hd + i] += eu / z * v[u][head * hd + i];
                }
            }
        }
    }
    let rows: Vec<Vec<f64>> = concat.iter().map(|r| project(&w.f_o, r)).collect();
    Mat::from_rows(&rows)
}

/// Copies each K/V group's rows once per query head it serves, turning a
/// grouped block into an equivalent one-group-per-head block.
pub fn expand_kv(w: &BlockWeights, cfg: &ModelConfig) -> BlockWeights {
    let hd = cfg.d_model / cfg.n_heads;
    let per = cfg.n_heads / cfg.n_kv_groups;
    let expand = |m: &Mat| {
        let mut rows = Vec::new();
        for h in 0..cfg.n_heads {
            let g = h / per;
            for r in g * hd..(g + 1) * hd {
                rows.push(m.data[r * m.cols..(r + 1) * m.cols].to_vec());
            }
        }
        Mat::from_rows(&rows)
    };
    let mut out = w.clone();
    out.f_k = expand(&w.f_k);
    out.f_v = expand(&w.f_v);
    out
}

/// Prefix-keyed random next-token distributions; no end token.
pub struct TableLm {
    pub vocab: usize,
    pub seed: u64,
}

impl NextToken for TableLm {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn eos(&self) -> Option<usize> {
        None
    }

    fn max_len(&self) -> usize {
        64
    }

    fn next_log_probs(&self, tokens: &[usize]) -> Result<Vec<f64>, TinyLmError> {
        let key = tokens.iter().fold(self.seed, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let w: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = w.iter().sum();
        Ok(w.iter().map(|x| (x / z).ln()).collect())
    }

    fn hidden_states(&self, tokens: &[usize]) -> Result<Mat, TinyLmError> {
        Ok(Mat::from_rows(&tokens.iter().map(|&t| vec![1.0, t as f64]).collect::<Vec<_>>()))
    }
}

/// A fixed next-token distribution regardless of context.
pub struct FixedLm(pub Vec<f64>);

impl NextToken for FixedLm {
    fn vocab(&self) -> usize {
        self.0.len()
    }

    fn eos(&self) -> Option<usize> {
        None
    }

    fn max_len(&self) -> usize {
        64
    }

    fn next_log_probs(&self, _: &[usize]) -> Result<Vec<f64>, TinyLmError> {
        Ok(self.0.iter().map(|p| p.ln()).collect())
    }

    fn hidden_states(&self, tokens: &[usize]) -> Result<Mat, TinyLmError> {
        Ok(Mat::zeros(tokens.len(), 2))
    }
}

/// Every continuation of length `depth` with its summed log-probability.
pub fn enumerate_sequences(m: &dyn NextToken, prompt: &[usize], depth: usize) -> Vec<(Vec<usize>, f64)> {
    let mut out = vec![(Vec::new(), 0.0)];
    for _ in 0..depth {
        let mut next = Vec::new();
        for (seq, lp) in &out {
            let ctx: Vec<usize> = prompt.iter().chain(seq.iter()).copied().collect();
            let dist = m.next_log_probs(&ctx).unwrap();
            for (t, l) in dist.iter().enumerate() {
                let mut s = seq.clone();
                s.push(t);
                next.push((s, lp + l));
            }
        }
        out = next;
    }
    out
}

// ---------------------------------------------------------------- eval

pub fn problem(id: &str) -> Problem {
    Problem {
        id: id.into(),
        prompt: format!("def {id}(x):\n"),
        entry_point: id.into(),
        tests: vec![format!("assert {id}(1) == 1")],
        canonical_solution: Some("    return x\n".into()),
    }
}

/// In-process runner: a source passes iff it contains the marker `PASS`.
pub fn marker_runner() -> FnRunner<impl Fn(&RunRequest) -> Result<RunResponse, RunnerError> + Send + Sync> {
    FnRunner(|req: &RunRequest| {
        let ok = req.source.contains("PASS");
        Ok(RunResponse {
            status: if ok { Status::Pass } else { Status::Fail },
            per_test: vec![ok; req.tests.len()],
            error_kind: None,
            message: None,
            elapsed_ms: 0.0,
        })
    })
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
