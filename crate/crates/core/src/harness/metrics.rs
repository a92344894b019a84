use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Recall weight of ROUGE-L.
pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram total of order `n`.
fn clipped<T: Eq + Hash>(candidate: &[T], references: &[Vec<T>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, the shorter one on ties.
fn closest_ref_len<T>(c: usize, references: &[Vec<T>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus BLEU-`n` over `(candidate, references)` pairs.
///
/// Clipped n-gram counts and candidate totals are summed over the corpus.
/// The geometric mean runs over orders `1..=n` with equal weights. Orders
/// above 1 with no clipped match use add-one smoothing,
/// `(0 + 1) / (total + 1)`; a zero unigram match gives 0. The brevity
/// penalty is `exp(1 - r / c)` when the total candidate length `c` is below
/// the total closest-reference length `r`. An empty candidate corpus scores 0.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(&[T], &[Vec<T>])], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Invalid(format!("BLEU order {n} outside [1, 4]")));
    }
    if pairs.iter().any(|(_, refs)| refs.is_empty()) {
        return Err(Error::Invalid("every candidate needs at least one reference".into()));
    }
    let c: usize = pairs.iter().map(|(cand, _)| cand.len()).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let r: usize = pairs.iter().map(|(cand, refs)| closest_ref_len(cand.len(), refs)).sum();
    let mut log_p = 0.0;
    for k in 1..=n {
        let (mut m, mut total) = (0, 0);
        for (cand, refs) in pairs {
            let (a, b) = clipped(cand, refs, k);
            m += a;
            total += b;
        }
        let p = if m > 0 {
            m as f64 / total as f64
        } else if k == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_p += p.ln() / n as f64;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

/// Sentence BLEU-`n`: [`corpus_bleu`] of a single pair.
pub fn bleu_n<T: Eq + Hash>(candidate: &[T], references: &[Vec<T>], n: usize) -> Result<f64> {
    corpus_bleu(&[(candidate, references)], n)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure `(1 + b^2) P R / (R + b^2 P)` with `b = 1.2`.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("ROUGE-L needs a non-empty reference".into()));
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

fn cosine_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let (ua, ub): (Vec<_>, Vec<_>) = (a.iter().map(unit).collect(), b.iter().map(unit).collect());
    ua.iter()
        .map(|x| ub.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect())
        .collect()
}

/// Fraction of rows `i` of `queries` whose match `keys[i]` is among the `k`
/// most cosine-similar keys. Ties count against the match.
pub fn recall_at_k(queries: &[Vec<f64>], keys: &[Vec<f64>], k: usize) -> Result<f64> {
    if queries.is_empty() || queries.len() != keys.len() {
        return Err(Error::Invalid(format!("{} queries for {} keys", queries.len(), keys.len())));
    }
    let s = cosine_matrix(queries, keys);
    let hits = s
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| j != *i && v >= row[*i])
                .count();
            rank < k
        })
        .count();
    Ok(hits as f64 / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_is_one_and_disjoint_is_zero() {
        let c = w("a b c d e");
        for n in 1..=4 {
            assert!((bleu_n(&c, &[c.clone()], n).unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(bleu_n(&c, &[w("v w x y z")], 4).unwrap(), 0.0);
        assert_eq!(bleu_n::<&str>(&[], &[c.clone()], 1).unwrap(), 0.0);
        assert!(bleu_n(&c, &[c.clone()], 5).is_err());
        assert!(bleu_n(&c, &[], 1).is_err());
    }

    #[test]
    fn clipping_and_brevity() {
        // "a a a" vs "a": one clipped match out of three, c > r so no penalty
        assert!((bleu_n(&w("a a a"), &[w("a")], 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // 2 tokens vs 4: all unigrams match, BP = exp(1 - 4/2)
        let b = bleu_n(&w("a b"), &[w("a b c d")], 1).unwrap();
        assert!((b - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_lcs_example() {
        assert_eq!(lcs_len(&w("a b c d"), &w("a c d")), 3);
        let (p, r) = (3.0 / 4.0, 1.0);
        let b2 = 1.44;
        let want = (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l(&w("a b c d"), &w("a c d")).unwrap() - want).abs() < 1e-12);
        assert_eq!(rouge_l(&w("x y"), &w("x y")).unwrap(), 1.0);
        assert_eq!(rouge_l(&w("x y"), &w("p q")).unwrap(), 0.0);
        assert!(rouge_l(&w("x"), &[]).is_err());
    }

    #[test]
    fn recall_on_identity_rows() {
        let eye: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        assert_eq!(recall_at_k(&eye, &eye, 1).unwrap(), 1.0);
        let rev: Vec<Vec<f64>> = eye.iter().rev().cloned().collect();
        assert_eq!(recall_at_k(&eye, &rev, 1).unwrap(), 0.2);
        assert_eq!(recall_at_k(&eye, &rev, 5).unwrap(), 1.0);
        assert!(recall_at_k(&eye, &eye[..2], 1).is_err());
    }
}
