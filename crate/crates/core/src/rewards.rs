//! Sentence-level rewards on token ids.
//!
//! GLEU pools clipped n-gram matches over all orders `1..=max_n` and takes
//! the minimum of precision and recall. Sentence BLEU uses add-one smoothing
//! for orders two and up and the usual brevity penalty. Both are pure
//! functions and safe to call from any number of threads.

use std::collections::BTreeMap;

use crate::Token;

pub const DEFAULT_MAX_N: usize = 4;

/// A sequence-level reward `r(hyp; ref)` in `[0, 1]`.
pub trait Reward: Sync {
    fn score(&self, hyp: &[Token], reference: &[Token]) -> f64;
}

impl<F> Reward for F
where
    F: Fn(&[Token], &[Token]) -> f64 + Sync,
{
    fn score(&self, hyp: &[Token], reference: &[Token]) -> f64 {
        self(hyp, reference)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    Gleu,
    Bleu,
}

impl std::str::FromStr for RewardKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gleu" => Ok(RewardKind::Gleu),
            "bleu" => Ok(RewardKind::Bleu),
            other => Err(format!("unknown reward {other:?} (expected gleu or bleu)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewardFn {
    pub kind: RewardKind,
    pub max_n: usize,
}

impl RewardFn {
    pub fn gleu() -> Self {
        RewardFn {
            kind: RewardKind::Gleu,
            max_n: DEFAULT_MAX_N,
        }
    }

    pub fn bleu() -> Self {
        RewardFn {
            kind: RewardKind::Bleu,
            max_n: DEFAULT_MAX_N,
        }
    }
}

impl Reward for RewardFn {
    fn score(&self, hyp: &[Token], reference: &[Token]) -> f64 {
        match self.kind {
            RewardKind::Gleu => gleu_with_order(hyp, reference, self.max_n),
            RewardKind::Bleu => bleu_sentence_with_order(hyp, reference, self.max_n),
        }
    }
}

/// All contiguous n-grams of orders `1..=max_n` with their multiplicities.
pub fn ngram_counts(s: &[Token], max_n: usize) -> BTreeMap<Vec<Token>, usize> {
    let mut counts = BTreeMap::new();
    for n in 1..=max_n.min(s.len()) {
        for w in s.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

fn order_total(len: usize, n: usize) -> usize {
    (len + 1).saturating_sub(n)
}

/// Clipped matches of order `n`: Σ over distinct n-grams of min(hyp count, ref count).
fn clipped_matches(hyp: &[Token], reference: &[Token], n: usize) -> usize {
    if hyp.len() < n || reference.len() < n {
        return 0;
    }
    let mut h: Vec<&[Token]> = hyp.windows(n).collect();
    let mut r: Vec<&[Token]> = reference.windows(n).collect();
    h.sort_unstable();
    r.sort_unstable();
    // Merging two sorted multisets counts min(multiplicities) for every key.
    let (mut i, mut j, mut matched) = (0, 0, 0);
    while i < h.len() && j < r.len() {
        match h[i].cmp(r[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                matched += 1;
                i += 1;
                j += 1;
            }
        }
    }
    matched
}

pub fn gleu(hyp: &[Token], reference: &[Token]) -> f64 {
    gleu_with_order(hyp, reference, DEFAULT_MAX_N)
}

pub fn gleu_with_order(hyp: &[Token], reference: &[Token], max_n: usize) -> f64 {
    if hyp == reference {
        return 1.0;
    }
    let (mut matched, mut hyp_total, mut ref_total) = (0, 0, 0);
    for n in 1..=max_n {
        matched += clipped_matches(hyp, reference, n);
        hyp_total += order_total(hyp.len(), n);
        ref_total += order_total(reference.len(), n);
    }
    if hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let precision = matched as f64 / hyp_total as f64;
    let recall = matched as f64 / ref_total as f64;
    precision.min(recall)
}

pub fn bleu_sentence(hyp: &[Token], reference: &[Token]) -> f64 {
    bleu_sentence_with_order(hyp, reference, DEFAULT_MAX_N)
}

pub fn bleu_sentence_with_order(hyp: &[Token], reference: &[Token], max_n: usize) -> f64 {
    if hyp.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let m = clipped_matches(hyp, reference, n) as f64;
        let c = order_total(hyp.len(), n) as f64;
        let p = if n == 1 { m / c } else { (m + 1.0) / (c + 1.0) };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let bp = (1.0 - reference.len() as f64 / hyp.len() as f64).min(0.0);
    (log_sum / max_n as f64 + bp).exp().min(1.0)
}

/// Corpus BLEU-4: counts pooled over all pairs, no smoothing.
pub fn corpus_bleu<'a, I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (&'a [Token], &'a [Token])>,
{
    let mut matched = [0usize; DEFAULT_MAX_N];
    let mut total = [0usize; DEFAULT_MAX_N];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in pairs {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=DEFAULT_MAX_N {
            matched[n - 1] += clipped_matches(h, r, n);
            total[n - 1] += order_total(h.len(), n);
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (m, c) in matched.iter().zip(&total) {
        if *m == 0 || *c == 0 {
            return 0.0;
        }
        log_sum += (*m as f64 / *c as f64).ln();
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0);
    (log_sum / DEFAULT_MAX_N as f64 + bp).exp().min(1.0)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const A: Token = 4;
    const B: Token = 5;
    const C: Token = 6;
    const D: Token = 7;
    const E: Token = 8;

    #[test]
    fn ngram_count_examples() {
        let c = ngram_counts(&[A, B], 4);
        assert_eq!(c.len(), 3);
        assert_eq!(c[&vec![A]], 1);
        assert_eq!(c[&vec![B]], 1);
        assert_eq!(c[&vec![A, B]], 1);

        let c = ngram_counts(&[A, A, A], 2);
        assert_eq!(c.len(), 2);
        assert_eq!(c[&vec![A]], 3);
        assert_eq!(c[&vec![A, A]], 2);

        assert!(ngram_counts(&[], 4).is_empty());
    }

    #[test]
    fn gleu_examples() {
        assert_eq!(gleu(&[A, B, C, D, E], &[A, B, C, D, E]), 1.0);
        assert_eq!(gleu(&[A, B], &[A, C]), 1.0 / 3.0);
        assert_eq!(gleu(&[A, A], &[A]), 1.0 / 3.0);
        assert_eq!(gleu(&[], &[]), 1.0);
        assert_eq!(gleu(&[], &[A]), 0.0);
        assert_eq!(gleu(&[A], &[]), 0.0);
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu_sentence(&[A, B, C], &[A, B, C]), 1.0);
        assert_eq!(bleu_sentence(&[], &[A, B]), 0.0);
        // every smoothed precision is 1; only the brevity penalty e^(1-5/4) remains
        let expected = (-0.25f64).exp();
        assert!((bleu_sentence(&[A, B, C, D], &[A, B, C, D, E]) - expected).abs() < 1e-15);
    }

    #[test]
    fn corpus_bleu_of_echoed_references_is_one() {
        let refs = [vec![A, B, C, D, E], vec![B, C, D, E, A]];
        let score = corpus_bleu(refs.iter().map(|r| (r.as_slice(), r.as_slice())));
        assert_eq!(score, 1.0);
    }

    #[test]
    fn reward_kind_parses() {
        assert_eq!("GLEU".parse::<RewardKind>().unwrap(), RewardKind::Gleu);
        assert!("ter".parse::<RewardKind>().is_err());
    }

    fn seq() -> impl Strategy<Value = Vec<Token>> {
        prop::collection::vec(4u32..9, 0..10)
    }

    proptest! {
        #[test]
        fn rewards_in_unit_interval(h in seq(), r in seq()) {
            let g = gleu(&h, &r);
            let b = bleu_sentence(&h, &r);
            prop_assert!((0.0..=1.0).contains(&g));
            prop_assert!((0.0..=1.0).contains(&b));
        }

        #[test]
        fn gleu_is_symmetric(h in seq(), r in seq()) {
            prop_assert_eq!(gleu(&h, &r), gleu(&r, &h));
        }

        #[test]
        fn identity_scores_one(s in prop::collection::vec(4u32..9, 1..10)) {
            prop_assert_eq!(gleu(&s, &s), 1.0);
            prop_assert_eq!(bleu_sentence(&s, &s), 1.0);
        }

        #[test]
        fn appending_absent_token_never_helps(h in seq(), r in seq()) {
            let mut longer = h.clone();
            longer.push(99);
            prop_assert!(gleu(&longer, &r) <= gleu(&h, &r));
        }
    }
}
