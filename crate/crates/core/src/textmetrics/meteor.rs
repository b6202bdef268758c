use std::collections::HashMap;

use super::{stem, TokenSeq};

/// Fragmentation penalty weight and exponent.
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;

/// Above this many positions on the shorter side, alignment falls back
/// from exact search to staged longest-block-first matching.
const EXACT_SEARCH_MAX_SHORT: usize = 14;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Alignment {
    /// `(candidate index, reference index, exact)`, sorted by candidate index.
    pub pairs: Vec<(usize, usize, bool)>,
    pub chunks: usize,
}

impl Alignment {
    pub fn matches(&self) -> usize {
        self.pairs.len()
    }

    fn from_pairs(mut pairs: Vec<(usize, usize, bool)>) -> Self {
        pairs.sort_unstable();
        let chunks = count_chunks(&pairs);
        Self { pairs, chunks }
    }
}

fn count_chunks(pairs: &[(usize, usize, bool)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// 0 = no match, 1 = stem match, 2 = exact match.
fn relation(a: &[String], sa: &[String], b: &[String], sb: &[String], i: usize, j: usize) -> u8 {
    if a[i] == b[j] {
        2
    } else if sa[i] == sb[j] {
        1
    } else {
        0
    }
}

/// Lexicographic objective: most matches, then most exact matches, then
/// fewest chunks. Exact search over (position, used mask, previous match).
fn exact_alignment(long: &[String], sl: &[String], short: &[String], ss: &[String]) -> Vec<(usize, usize, bool)> {
    type Score = (i32, i32, i32);
    struct Search<'a> {
        long: &'a [String],
        sl: &'a [String],
        short: &'a [String],
        ss: &'a [String],
        memo: HashMap<(usize, u32, usize), (Score, Option<usize>)>,
    }
    impl Search<'_> {
        // prev: short index + 1 that long[i-1] matched, or 0
        fn best(&mut self, i: usize, mask: u32, prev: usize) -> Score {
            if i == self.long.len() {
                return (0, 0, 0);
            }
            if let Some(&(s, _)) = self.memo.get(&(i, mask, prev)) {
                return s;
            }
            let mut best = self.best(i + 1, mask, 0);
            let mut choice = None;
            for j in 0..self.short.len() {
                if mask & (1 << j) != 0 {
                    continue;
                }
                let rel = relation(self.long, self.sl, self.short, self.ss, i, j);
                if rel == 0 {
                    continue;
                }
                let new_chunk = i32::from(!(prev != 0 && prev == j));
                let (m, e, c) = self.best(i + 1, mask | (1 << j), j + 1);
                let cand = (m + 1, e + i32::from(rel == 2), c - new_chunk);
                if cand > best {
                    best = cand;
                    choice = Some(j);
                }
            }
            self.memo.insert((i, mask, prev), (best, choice));
            best
        }
    }
    let mut s = Search {
        long,
        sl,
        short,
        ss,
        memo: HashMap::new(),
    };
    s.best(0, 0, 0);
    let (mut i, mut mask, mut prev) = (0, 0u32, 0);
    let mut pairs = Vec::new();
    while i < long.len() {
        let (_, choice) = s.memo[&(i, mask, prev)];
        match choice {
            Some(j) => {
                pairs.push((i, j, long[i] == short[j]));
                mask |= 1 << j;
                prev = j + 1;
            }
            None => prev = 0,
        }
        i += 1;
    }
    pairs
}

/// Exact stage then stem stage; each repeatedly takes the longest run of
/// consecutive unaligned matches (earliest first on ties).
fn staged_alignment(a: &[String], sa: &[String], b: &[String], sb: &[String]) -> Vec<(usize, usize, bool)> {
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for stage in [2u8, 1] {
        loop {
            let mut best: Option<(usize, usize, usize)> = None;
            for i in 0..a.len() {
                for j in 0..b.len() {
                    let mut len = 0;
                    while i + len < a.len()
                        && j + len < b.len()
                        && !used_a[i + len]
                        && !used_b[j + len]
                        && relation(a, sa, b, sb, i + len, j + len) >= stage
                    {
                        len += 1;
                    }
                    if len > 0 && best.is_none_or(|(_, _, l)| len > l) {
                        best = Some((i, j, len));
                    }
                }
            }
            let Some((i, j, len)) = best else { break };
            for k in 0..len {
                used_a[i + k] = true;
                used_b[j + k] = true;
                pairs.push((i + k, j + k, a[i + k] == b[j + k]));
            }
        }
    }
    pairs
}

pub fn meteor_alignment(candidate: &TokenSeq, reference: &TokenSeq) -> Alignment {
    let (c, r) = (candidate.tokens(), reference.tokens());
    let sc: Vec<String> = c.iter().map(|w| stem(w)).collect();
    let sr: Vec<String> = r.iter().map(|w| stem(w)).collect();
    if c.len().min(r.len()) > EXACT_SEARCH_MAX_SHORT {
        return Alignment::from_pairs(staged_alignment(c, &sc, r, &sr));
    }
    let pairs = if c.len() >= r.len() {
        exact_alignment(c, &sc, r, &sr)
    } else {
        exact_alignment(r, &sr, c, &sc)
            .into_iter()
            .map(|(i, j, e)| (j, i, e))
            .collect()
    };
    Alignment::from_pairs(pairs)
}

/// METEOR without the synonym stage: F_mean = 10PR/(R+9P) scaled by
/// 1 − 0.5·(chunks/m)³.
pub fn meteor_lite(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let al = meteor_alignment(candidate, reference);
    let m = al.matches();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = METEOR_GAMMA * (al.chunks as f64 / m as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}
