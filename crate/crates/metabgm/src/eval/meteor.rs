//! Exact-match unigram METEOR: recall-weighted harmonic mean with a
//! fragmentation penalty over the chunk-minimizing one-to-one alignment.
//!
//! No stemming or synonymy resources ship with this implementation, so
//! absolute scores can differ from toolchains that use them.

use std::collections::HashMap;

/// Matched pairs are fixed by token multiset intersection; among alignments
/// realizing that maximum this finds the one with the fewest chunks.
struct ChunkSearch<'a> {
    hypothesis: &'a [String],
    /// Candidate reference positions per hypothesis position.
    candidates: Vec<Vec<usize>>,
    /// Remaining must-match quota per token.
    quota: HashMap<&'a str, usize>,
    /// Remaining hypothesis occurrences of each token from a position on.
    suffix_counts: Vec<HashMap<&'a str, usize>>,
    used: Vec<bool>,
    best: usize,
    nodes: u64,
}

const NODE_BUDGET: u64 = 2_000_000;

impl<'a> ChunkSearch<'a> {
    fn run(hypothesis: &'a [String], reference: &'a [String]) -> (usize, usize) {
        let mut ref_counts: HashMap<&str, usize> = HashMap::new();
        for token in reference {
            *ref_counts.entry(token).or_default() += 1;
        }
        let mut hyp_counts: HashMap<&str, usize> = HashMap::new();
        for token in hypothesis {
            *hyp_counts.entry(token).or_default() += 1;
        }
        let mut quota: HashMap<&str, usize> = HashMap::new();
        let mut matches = 0usize;
        for (token, &hyp_count) in &hyp_counts {
            let m = hyp_count.min(ref_counts.get(token).copied().unwrap_or(0));
            if m > 0 {
                quota.insert(token, m);
                matches += m;
            }
        }
        if matches == 0 {
            return (0, 0);
        }

        let candidates: Vec<Vec<usize>> = hypothesis
            .iter()
            .map(|token| {
                if quota.contains_key(token.as_str()) {
                    reference
                        .iter()
                        .enumerate()
                        .filter(|(_, t)| *t == token)
                        .map(|(i, _)| i)
                        .collect()
                } else {
                    Vec::new()
                }
            })
            .collect();

        // suffix_counts[i][t] = occurrences of t in hypothesis[i..].
        let mut suffix_counts = vec![HashMap::new(); hypothesis.len() + 1];
        for i in (0..hypothesis.len()).rev() {
            let mut counts = suffix_counts[i + 1].clone();
            *counts.entry(hypothesis[i].as_str()).or_default() += 1;
            suffix_counts[i] = counts;
        }

        let mut search = ChunkSearch {
            hypothesis,
            candidates,
            quota,
            suffix_counts,
            used: vec![false; reference.len()],
            best: usize::MAX,
            nodes: 0,
        };
        search.descend(0, None, 0);
        let chunks = if search.best == usize::MAX {
            // Budget exhausted without closing the search; fall back to the
            // greedy left-to-right alignment (upper bound on chunks).
            search.greedy()
        } else {
            search.best
        };
        (matches, chunks)
    }

    fn descend(&mut self, pos: usize, last_ref: Option<usize>, chunks: usize) {
        if chunks >= self.best || self.nodes > NODE_BUDGET {
            return;
        }
        self.nodes += 1;
        if pos == self.hypothesis.len() {
            self.best = chunks;
            return;
        }
        let token = self.hypothesis[pos].as_str();
        let remaining_quota = self.quota.get(token).copied().unwrap_or(0);

        if remaining_quota > 0 {
            let candidate_positions: Vec<usize> = self.candidates[pos]
                .iter()
                .copied()
                .filter(|&r| !self.used[r])
                .collect();
            for r in candidate_positions {
                let continues = last_ref.is_some_and(|prev| r == prev + 1);
                let next_chunks = if continues { chunks } else { chunks + 1 };
                self.used[r] = true;
                *self.quota.get_mut(token).unwrap() -= 1;
                self.descend(pos + 1, Some(r), next_chunks);
                *self.quota.get_mut(token).unwrap() += 1;
                self.used[r] = false;
            }
        }

        // Skipping is only legal if enough later occurrences remain to fill
        // the quota (the match count is fixed at the maximum).
        let later = self
            .suffix_counts[pos + 1]
            .get(token)
            .copied()
            .unwrap_or(0);
        if later >= remaining_quota {
            // A skipped position breaks hypothesis adjacency for chunking.
            self.descend(pos + 1, None, chunks);
        }
    }

    fn greedy(&mut self) -> usize {
        self.used.iter_mut().for_each(|u| *u = false);
        let mut quota = self.quota.clone();
        let mut chunks = 0usize;
        let mut last_ref: Option<usize> = None;
        for pos in 0..self.hypothesis.len() {
            let token = self.hypothesis[pos].as_str();
            if quota.get(token).copied().unwrap_or(0) == 0 {
                last_ref = None;
                continue;
            }
            // Prefer the reference position that continues the current chunk.
            let pick = self.candidates[pos]
                .iter()
                .copied()
                .filter(|&r| !self.used[r])
                .min_by_key(|&r| match last_ref {
                    Some(prev) if r == prev + 1 => 0,
                    _ => r + 1,
                });
            if let Some(r) = pick {
                if last_ref.is_none_or(|prev| r != prev + 1) {
                    chunks += 1;
                }
                self.used[r] = true;
                *quota.get_mut(token).unwrap() -= 1;
                last_ref = Some(r);
            } else {
                last_ref = None;
            }
        }
        chunks
    }
}

/// METEOR on the 0-100 scale: F_mean = 10PR/(R+9P), penalty
/// 0.5*(chunks/matches)^3, score = 100 * F_mean * (1 - penalty).
pub fn meteor(hypothesis: &[String], reference: &[String]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (matches, chunks) = ChunkSearch::run(hypothesis, reference);
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let precision = m / hypothesis.len() as f64;
    let recall = m / reference.len() as f64;
    let f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    100.0 * f_mean * (1.0 - penalty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identity_closed_form() {
        for text in ["a", "the cat", "the cat sat", "one two three four five"] {
            let t = toks(text);
            let n = t.len() as f64;
            let expected = 100.0 * (1.0 - 0.5 / (n * n * n));
            assert!((meteor(&t, &t) - expected).abs() < 1e-9, "{text}");
        }
    }

    #[test]
    fn disjoint_vocabulary_is_zero() {
        assert_eq!(meteor(&toks("alpha beta"), &toks("gamma delta")), 0.0);
    }

    #[test]
    fn hand_case_single_chunk() {
        // P=1, R=3/4, F=10*0.75/(0.75+9)=0.76923, chunks=1, penalty=0.5/27.
        let score = meteor(&toks("the cat sat"), &toks("the cat sat down"));
        let f = 10.0 * 1.0 * 0.75 / (0.75 + 9.0);
        let expected = 100.0 * f * (1.0 - 0.5 / 27.0);
        assert!((score - expected).abs() < 1e-9);
        assert!((score - 75.50).abs() < 0.01);
    }

    #[test]
    fn hand_case_two_chunks() {
        // "sat the cat" vs "the cat sat": m=3, P=R=1, F=1, chunks=2.
        let score = meteor(&toks("sat the cat"), &toks("the cat sat"));
        let expected = 100.0 * (1.0 - 0.5 * (2.0f64 / 3.0).powi(3));
        assert!((score - expected).abs() < 1e-9);
    }

    #[test]
    fn chunk_minimization_with_duplicates() {
        // hyp "a b a", ref "a b a": naive greedy could split, the minimum
        // is a single chunk.
        let t = toks("a b a");
        let (matches, chunks) = ChunkSearch::run(&t, &t);
        assert_eq!(matches, 3);
        assert_eq!(chunks, 1);
        // "b a b a" vs "a b a b": best alignment is 2 chunks.
        let (matches, chunks) = ChunkSearch::run(&toks("b a b a"), &toks("a b a b"));
        assert_eq!(matches, 4);
        assert_eq!(chunks, 2);
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(meteor(&[], &toks("a")), 0.0);
        assert_eq!(meteor(&toks("a"), &[]), 0.0);
    }
}
