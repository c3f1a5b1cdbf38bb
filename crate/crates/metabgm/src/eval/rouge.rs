//! ROUGE-L: LCS-based F-measure with a recall-favoring beta.

/// Longest common subsequence length, O(|a|*|b|) dynamic programming.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut previous = vec![0usize; b.len() + 1];
    let mut current = vec![0usize; b.len() + 1];
    for token_a in a {
        for (j, token_b) in b.iter().enumerate() {
            current[j + 1] = if token_a == token_b {
                previous[j] + 1
            } else {
                current[j].max(previous[j + 1])
            };
        }
        std::mem::swap(&mut previous, &mut current);
    }
    previous[b.len()]
}

pub const DEFAULT_BETA: f64 = 1.2;

/// ROUGE-L on the 0-100 scale: P = LCS/|hyp|, R = LCS/|ref|,
/// F = (1+beta^2)PR / (R + beta^2 P).
pub fn rouge_l(hypothesis: &[String], reference: &[String], beta: f64) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hypothesis, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / hypothesis.len() as f64;
    let recall = lcs / reference.len() as f64;
    let beta_sq = beta * beta;
    100.0 * ((1.0 + beta_sq) * precision * recall) / (recall + beta_sq * precision)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identity_is_100() {
        let t = toks("the quick brown fox");
        assert!((rouge_l(&t, &t, DEFAULT_BETA) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn hand_case() {
        // LCS=2, P=1, R=2/3, beta=1.2: F = 2.44*(2/3) / (2/3 + 1.44).
        let score = rouge_l(&toks("the cat"), &toks("the cat sat"), DEFAULT_BETA);
        let expected = 100.0 * (2.44 * (2.0 / 3.0)) / (2.0 / 3.0 + 1.44);
        assert!((score - expected).abs() < 1e-9);
        assert!((score - 77.2152).abs() < 1e-3);
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(rouge_l(&toks("a b"), &toks("c d"), DEFAULT_BETA), 0.0);
        assert_eq!(rouge_l(&[], &toks("c d"), DEFAULT_BETA), 0.0);
    }

    #[test]
    fn non_contiguous_subsequence() {
        // LCS "the cat sat" across a gap; P=R=3/4 so F collapses to 0.75.
        let score = rouge_l(
            &toks("the big cat sat"),
            &toks("the cat sat down"),
            DEFAULT_BETA,
        );
        assert!((score - 75.0).abs() < 1e-9);
    }

    #[test]
    fn lcs_matches_brute_force_small() {
        fn brute(a: &[String], b: &[String]) -> usize {
            match (a.split_last(), b.split_last()) {
                (Some((la, ra)), Some((lb, rb))) => {
                    if la == lb {
                        1 + brute(ra, rb)
                    } else {
                        brute(ra, b).max(brute(a, rb))
                    }
                }
                _ => 0,
            }
        }
        let symbols = ["x", "y", "z"];
        let mut sequences = vec![vec![]];
        for _ in 0..4 {
            let mut next = Vec::new();
            for seq in &sequences {
                for s in symbols {
                    let mut extended: Vec<String> = seq.clone();
                    extended.push(s.to_string());
                    next.push(extended);
                }
            }
            sequences.extend(next);
        }
        for a in sequences.iter().take(40) {
            for b in sequences.iter().rev().take(40) {
                assert_eq!(lcs_len(a, b), brute(a, b));
            }
        }
    }
}
