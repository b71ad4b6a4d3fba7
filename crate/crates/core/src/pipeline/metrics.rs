//! Error rates and BLEU.
//!
//! WER and CER divide the Levenshtein distance (unit costs) by the reference
//! length, or by 1 when the reference is empty, so an empty reference scores
//! the hypothesis length and both rates can exceed 1.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

pub fn error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> f64 {
    edit_distance(reference, hypothesis) as f64 / reference.len().max(1) as f64
}

/// Word error rate over pre-split word sequences.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> f64 {
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    error_rate(&r, &h)
}

/// Character error rate over Unicode scalar values.
pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    error_rate(&r, &h)
}

pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuOptions {
    /// Add one to matches and totals of 2- to 4-gram precisions.
    pub smoothing: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions { smoothing: true }
    }
}

/// Sufficient statistics of BLEU-4; sentence stats add up to corpus stats.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..4 {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU-4 in `[0, 100]`.
    pub fn score(&self, options: BleuOptions) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..4 {
            let (m, t) = if options.smoothing && n > 0 {
                (self.matches[n] + 1, self.totals[n] + 1)
            } else {
                (self.matches[n], self.totals[n])
            };
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln() / 4.0;
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let brevity = if c > r { 0.0 } else { 1.0 - r / c };
        100.0 * (brevity + log_sum).exp()
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches against multiple references; the effective
/// reference length is the one closest to the hypothesis (shorter on ties).
pub fn bleu_stats<S: AsRef<str>>(references: &[Vec<S>], hypothesis: &[S]) -> BleuStats {
    let mut stats = BleuStats {
        hyp_len: hypothesis.len(),
        ..BleuStats::default()
    };
    stats.ref_len = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(hypothesis.len()), len))
        .unwrap_or(0);
    for n in 1..=4 {
        let hyp = ngram_counts(hypothesis, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in references {
            for (gram, c) in ngram_counts(r, n) {
                let e = max_ref.entry(gram).or_insert(0);
                *e = (*e).max(c);
            }
        }
        stats.totals[n - 1] = hypothesis.len().saturating_sub(n - 1);
        stats.matches[n - 1] = hyp
            .iter()
            .map(|(gram, &c)| c.min(max_ref.get(gram).copied().unwrap_or(0)))
            .sum();
    }
    stats
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub value: f64,
    pub empty_hypothesis: bool,
}

/// Sentence BLEU-4 against one or more references.
pub fn bleu4<S: AsRef<str>>(references: &[Vec<S>], hypothesis: &[S], options: BleuOptions) -> BleuScore {
    BleuScore {
        value: bleu_stats(references, hypothesis).score(options),
        empty_hypothesis: hypothesis.is_empty(),
    }
}
