use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Next-token log-probabilities for a set of equally long prefixes, each
/// starting with the start token.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// A generated sequence, start token excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Ended with the end token rather than at `max_len`.
    pub finished: bool,
}

/// Higher score first; equal scores go to the lexicographically smaller
/// token sequence, so the lower token id wins a tie.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn with_start(bos: usize, h: &Hypothesis) -> Vec<usize> {
    let mut p = Vec::with_capacity(h.tokens.len() + 1);
    p.push(bos);
    p.extend_from_slice(&h.tokens);
    p
}

fn check_row(row: &[f64], v: usize) -> Result<()> {
    if row.len() != v || row.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric(format!("scorer returned {} log-probs for {v} tokens", row.len())));
    }
    Ok(())
}

/// Takes the most likely token at every step.
pub fn greedy(scorer: &dyn NextTokenScorer, bos: usize, eos: usize, max_len: usize) -> Result<Hypothesis> {
    let v = scorer.vocab_size();
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_len {
        let row = scorer.log_probs(&[with_start(bos, &h)])?.remove(0);
        check_row(&row, v)?;
        // first maximum, i.e. lowest id among ties
        let (best, lp) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
        h.tokens.push(best);
        h.log_prob += lp;
        if best == eos {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Length-unnormalized beam search.
///
/// Every step expands all live beams by every token and keeps the
/// `num_beams` best candidates; those ending in `eos` are finalized. The
/// result is the best of the finalized sequences, the beams still live at
/// `max_len`, and the greedy sequence, so it never scores below greedy.
pub fn beam_search(
    scorer: &dyn NextTokenScorer,
    bos: usize,
    eos: usize,
    num_beams: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if num_beams == 0 {
        return Err(Error::Invalid("num_beams must be at least 1".into()));
    }
    let v = scorer.vocab_size();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| with_start(bos, h)).collect();
        let rows = scorer.log_probs(&prefixes)?;
        let mut cands = Vec::with_capacity(live.len() * v);
        for (h, row) in live.iter().zip(&rows) {
            check_row(row, v)?;
            for (t, &lp) in row.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                cands.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + lp,
                    finished: t == eos,
                });
            }
        }
        cands.sort_by(rank);
        cands.truncate(num_beams);
        let (fin, open): (Vec<_>, Vec<_>) = cands.into_iter().partition(|h| h.finished);
        done.extend(fin);
        live = open;
        let best_done = done.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        // log-probabilities only fall as sequences grow
        if live.is_empty() || live.iter().all(|h| h.log_prob < best_done) {
            break;
        }
    }
    let mut pool = done;
    pool.extend(live);
    pool.push(greedy(scorer, bos, eos, max_len)?);
    pool.sort_by(rank);
    Ok(pool.swap_remove(0))
}
