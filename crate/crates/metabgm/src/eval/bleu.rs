//! BLEU-n with clipped modified n-gram precision, no smoothing, and the
//! brevity penalty computed against the closest-length reference.

use std::collections::HashMap;

/// Sufficient statistics for BLEU, combinable across a corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    /// Clipped n-gram matches, index 0 = unigrams.
    pub matches: [u64; 4],
    /// Total hypothesis n-grams per order.
    pub totals: [u64; 4],
    pub hyp_len: u64,
    /// Closest-length reference length.
    pub ref_len: u64,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        for i in 0..4 {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_default() += 1;
        }
    }
    counts
}

/// Reference length closest to the hypothesis length; ties prefer shorter.
fn closest_ref_len(hyp_len: usize, references: &[Vec<String>]) -> u64 {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(hyp_len), len))
        .unwrap_or(0) as u64
}

pub fn bleu_stats(hypothesis: &[String], references: &[Vec<String>], max_n: usize) -> BleuStats {
    assert!((1..=4).contains(&max_n), "max_n must be in 1..=4");
    let mut stats = BleuStats {
        hyp_len: hypothesis.len() as u64,
        ref_len: closest_ref_len(hypothesis.len(), references),
        ..BleuStats::default()
    };
    for n in 1..=max_n {
        let hyp_counts = ngram_counts(hypothesis, n);
        let mut max_ref_counts: HashMap<&[String], u64> = HashMap::new();
        for reference in references {
            for (gram, count) in ngram_counts(reference, n) {
                let entry = max_ref_counts.entry(gram).or_default();
                *entry = (*entry).max(count);
            }
        }
        for (gram, &count) in &hyp_counts {
            stats.totals[n - 1] += count;
            stats.matches[n - 1] += count.min(max_ref_counts.get(gram).copied().unwrap_or(0));
        }
    }
    stats
}

/// B-1..B-max_n on the 0-100 scale from pooled or per-sentence statistics.
/// Zero clipped precision at any order k forces B-n = 0 for n >= k.
pub fn bleu_from_stats(stats: &BleuStats, max_n: usize) -> Vec<f64> {
    let bp = if stats.hyp_len == 0 {
        0.0
    } else if stats.hyp_len >= stats.ref_len {
        1.0
    } else {
        (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
    };

    (1..=max_n)
        .map(|n| {
            let mut log_sum = 0.0;
            for k in 1..=n {
                if stats.totals[k - 1] == 0 || stats.matches[k - 1] == 0 {
                    return 0.0;
                }
                log_sum += (stats.matches[k - 1] as f64 / stats.totals[k - 1] as f64).ln();
            }
            bp * (log_sum / n as f64).exp() * 100.0
        })
        .collect()
}

/// Sentence-level BLEU-1..max_n on the 0-100 scale.
pub fn bleu(hypothesis: &[String], references: &[Vec<String>], max_n: usize) -> Vec<f64> {
    bleu_from_stats(&bleu_stats(hypothesis, references, max_n), max_n)
}
