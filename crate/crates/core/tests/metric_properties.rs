mod common;

use common::{oracle_bleu, oracle_lcs, oracle_meteor, oracle_rouge_l};
use cotkit::textmetrics::{bleu_n, lcs_len, meteor_alignment, meteor_lite, rouge_l, TokenSeq};
use proptest::prelude::*;

const WORDS: &[&str] = &["a", "b", "c", "return", "returns", "list", "lists", "sum", "x", "if"];

fn words(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(WORDS).prop_map(String::from), 0..=max)
}

fn seq(w: &[String]) -> TokenSeq {
    TokenSeq::from_tokens(w.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn scores_stay_in_unit_interval(c in words(14), r in words(14)) {
        let (c, r) = (seq(&c), seq(&r));
        for n in 1..=4 {
            let b = bleu_n(&c, &r, n);
            prop_assert!((0.0..=1.0).contains(&b));
        }
        prop_assert!((0.0..=1.0).contains(&rouge_l(&c, &r)));
        prop_assert!((0.0..=1.0).contains(&meteor_lite(&c, &r)));
    }

    #[test]
    fn agrees_with_brute_force(c in words(9), r in words(9)) {
        let (tc, tr) = (seq(&c), seq(&r));
        prop_assert_eq!(lcs_len(tc.tokens(), tr.tokens()), oracle_lcs(&c, &r));
        prop_assert!((rouge_l(&tc, &tr) - oracle_rouge_l(&c, &r)).abs() <= 1e-9);
        for n in 1..=4 {
            prop_assert!((bleu_n(&tc, &tr, n) - oracle_bleu(&c, &r, n)).abs() <= 1e-9);
        }
        prop_assert!((meteor_lite(&tc, &tr) - oracle_meteor(&c, &r)).abs() <= 1e-9);
    }

    #[test]
    fn lcs_is_symmetric_and_bounded(a in words(14), b in words(14)) {
        let l = lcs_len(&a, &b);
        prop_assert_eq!(l, lcs_len(&b, &a));
        prop_assert!(l <= a.len().min(b.len()));
    }

    #[test]
    fn identical_nonempty_sequences_score_one(w in words(14).prop_filter("nonempty", |w| !w.is_empty())) {
        let t = seq(&w);
        for n in 1..=4 {
            prop_assert_eq!(bleu_n(&t, &t, n), 1.0);
        }
        prop_assert_eq!(rouge_l(&t, &t), 1.0);
        prop_assert_eq!(meteor_alignment(&t, &t).chunks, 1);
    }

    #[test]
    fn empty_side_scores_zero(w in words(8)) {
        let t = seq(&w);
        let e = seq(&[]);
        prop_assert_eq!(rouge_l(&e, &t), 0.0);
        prop_assert_eq!(rouge_l(&t, &e), 0.0);
        prop_assert_eq!(meteor_lite(&e, &t), 0.0);
        prop_assert_eq!(bleu_n(&e, &t, 4), 0.0);
    }

    #[test]
    fn alignment_is_one_to_one_and_chunks_bounded(c in words(12), r in words(12)) {
        let a = meteor_alignment(&seq(&c), &seq(&r));
        let m = a.matches();
        prop_assert!(m <= c.len().min(r.len()));
        prop_assert!(a.chunks <= m);
        prop_assert!(m == 0 || a.chunks >= 1);
    }
}

#[test]
fn stemmed_matches_count_for_meteor_but_not_bleu() {
    let c = TokenSeq::tokenize("returns lists");
    let r = TokenSeq::tokenize("return list");
    assert_eq!(bleu_n(&c, &r, 1), 0.0);
    let a = meteor_alignment(&c, &r);
    assert_eq!(a.matches(), 2);
    assert_eq!(a.chunks, 1);
    assert!(meteor_lite(&c, &r) > 0.9);
}

#[test]
fn rouge_hand_value() {
    // LCS 3 of lengths 4 and 5: P 0.75, R 0.6
    let c = TokenSeq::tokenize("a b c d");
    let r = TokenSeq::tokenize("a x b c y");
    let (p, rc, b2) = (0.75f64, 0.6f64, 1.2f64 * 1.2);
    let want = (1.0 + b2) * p * rc / (rc + b2 * p);
    assert!((rouge_l(&c, &r) - want).abs() < 1e-12);
}
