use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    None,
    /// The k-th n-gram order with no match gets precision `1 / (2^k · total_n)`.
    #[default]
    Exp,
}

/// Clipped n-gram matches and hypothesis n-gram totals for orders 1..=max_n.
pub fn ngram_stats<W: Eq + Hash>(hyp: &[W], reference: &[W], max_n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    for n in 1..=max_n {
        if hyp.len() < n {
            continue;
        }
        let mut ref_counts: HashMap<&[W], usize> = HashMap::new();
        if reference.len() >= n {
            for g in reference.windows(n) {
                *ref_counts.entry(g).or_default() += 1;
            }
        }
        let mut hyp_counts: HashMap<&[W], usize> = HashMap::new();
        for g in hyp.windows(n) {
            *hyp_counts.entry(g).or_default() += 1;
        }
        totals[n - 1] = hyp.len() + 1 - n;
        matches[n - 1] = hyp_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
    }
    (matches, totals)
}

/// Corpus BLEU in [0, 100] with a single reference per hypothesis.
pub fn corpus_bleu<W: Eq + Hash>(
    hypotheses: &[Vec<W>],
    references: &[Vec<W>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(invalid("hypothesis and reference counts differ"));
    }
    if hypotheses.is_empty() || max_n == 0 {
        return Err(invalid("BLEU needs a non-empty corpus and max_n ≥ 1"));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(invalid("empty reference"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (m, t) = ngram_stats(h, r, max_n);
        for n in 0..max_n {
            matches[n] += m[n];
            totals[n] += t[n];
        }
        hyp_len += h.len();
        ref_len += r.len();
    }
    Ok(bleu_from_stats(&matches, &totals, hyp_len, ref_len, smoothing))
}

pub fn bleu_from_stats(matches: &[usize], totals: &[usize], hyp_len: usize, ref_len: usize, smoothing: Smoothing) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut zero_orders = 0;
    for (&m, &t) in matches.iter().zip(totals) {
        if t == 0 {
            return 0.0;
        }
        let p = if m > 0 {
            m as f64 / t as f64
        } else {
            match smoothing {
                Smoothing::None => return 0.0,
                Smoothing::Exp => {
                    zero_orders += 1;
                    1.0 / (2f64.powi(zero_orders) * t as f64)
                }
            }
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (log_sum / matches.len() as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let h = vec![toks("a b c d e"), toks("x y z w")];
        assert_eq!(corpus_bleu(&h, &h, 4, Smoothing::Exp).unwrap(), 100.0);
    }

    #[test]
    fn hand_example_with_exp_smoothing() {
        // p1 = 3/4, p2 = 2/3, p3 = 1/2 (two trigrams, one match), p4 smoothed to 1/2
        let s = corpus_bleu(&[toks("a b c e")], &[toks("a b c d")], 4, Smoothing::Exp).unwrap();
        let expected = 100.0 * (0.75f64 * (2.0 / 3.0) * 0.5 * 0.5).powf(0.25);
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_sacrebleu_values() {
        // Frozen outputs of sacrebleu 2.6.0 (tokenize='none', smooth_method='exp').
        let cases: [(&[&str], &[&str], f64); 4] = [
            (&["a b c e"], &["a b c d"], 59.460355750136046),
            (&["a b c e", "x y"], &["a b c d", "x y z"], 53.21972092465657),
            (&["a b c d"], &["a b c d e f g h"], 36.78794411714425),
            (&["a b", "q w e r t"], &["a b c d", "q w e r t"], 75.14772930752862),
        ];
        for (h, r, want) in cases {
            let h: Vec<Vec<&str>> = h.iter().map(|s| toks(s)).collect();
            let r: Vec<Vec<&str>> = r.iter().map(|s| toks(s)).collect();
            let got = corpus_bleu(&h, &r, 4, Smoothing::Exp).unwrap();
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn brevity_penalty_for_half_length() {
        let r = toks("a b c d e f g h");
        let h = toks("a b c d");
        let s = corpus_bleu(std::slice::from_ref(&h), &[r], 4, Smoothing::Exp).unwrap();
        assert!((s - 100.0 * (-1f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn errors_and_degenerate_cases() {
        let empty: Vec<Vec<&str>> = vec![];
        assert!(corpus_bleu(&empty, &empty, 4, Smoothing::Exp).is_err());
        assert!(corpus_bleu(&[toks("a")], &[vec![]], 4, Smoothing::Exp).is_err());
        assert_eq!(corpus_bleu(&[vec![]], &[toks("a b")], 4, Smoothing::Exp).unwrap(), 0.0);
    }
}
