//! Text evaluation: BLEU-1..4, METEOR and ROUGE-L over hypothesis/reference
//! corpora, with the six-column report format (B-1, B-2, B-3, B-4, METEOR,
//! R-L) as aligned text, CSV or JSON.

pub mod bleu;
pub mod meteor;
pub mod rouge;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{bleu, bleu_from_stats, bleu_stats, BleuStats};
pub use meteor::meteor;
pub use rouge::{lcs_len, rouge_l, DEFAULT_BETA};

/// Lowercases, splits on whitespace and strips surrounding (not internal)
/// punctuation from each token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|word| {
            let trimmed = word.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub hypothesis: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Unweighted mean of per-pair scores.
    SentenceMean,
    /// Pooled n-gram statistics for BLEU; METEOR and ROUGE-L stay per-pair
    /// means.
    Corpus,
}

/// Six scores on the 0-100 scale, in the table's column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricScores {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

impl MetricScores {
    pub fn as_array(&self) -> [f64; 6] {
        [self.b1, self.b2, self.b3, self.b4, self.meteor, self.rouge_l]
    }
}

pub const METRIC_COLUMNS: [&str; 6] = ["B-1", "B-2", "B-3", "B-4", "METEOR", "R-L"];

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub systems: IndexMap<String, MetricScores>,
    pub n_pairs: usize,
    pub aggregation: Aggregation,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluation pairs given")]
    NoPairs,
    #[error("pair {id}: references must be non-empty")]
    EmptyReferences { id: String },
}

/// Best score over the references (METEOR and ROUGE-L are defined against a
/// single reference).
fn best_over_refs<F: Fn(&[String]) -> f64>(references: &[Vec<String>], score: F) -> f64 {
    references
        .iter()
        .map(|r| score(r))
        .fold(0.0f64, f64::max)
}

/// Scores one system's pairs under the chosen aggregation.
pub fn evaluate_corpus(
    pairs: &[EvalPair],
    aggregation: Aggregation,
    beta: f64,
) -> Result<MetricScores, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let mut pooled = BleuStats::default();
    let mut bleu_sums = [0.0f64; 4];
    let mut meteor_sum = 0.0;
    let mut rouge_sum = 0.0;

    for pair in pairs {
        if pair.references.is_empty() {
            return Err(EvalError::EmptyReferences { id: pair.id.clone() });
        }
        let hypothesis = tokenize(&pair.hypothesis);
        let references: Vec<Vec<String>> = pair.references.iter().map(|r| tokenize(r)).collect();

        let stats = bleu_stats(&hypothesis, &references, 4);
        let sentence = bleu_from_stats(&stats, 4);
        for (sum, score) in bleu_sums.iter_mut().zip(&sentence) {
            *sum += score;
        }
        pooled.add(&stats);

        meteor_sum += best_over_refs(&references, |r| meteor(&hypothesis, r));
        rouge_sum += best_over_refs(&references, |r| rouge_l(&hypothesis, r, beta));
    }

    let n = pairs.len() as f64;
    let bleu_scores = match aggregation {
        Aggregation::SentenceMean => [
            bleu_sums[0] / n,
            bleu_sums[1] / n,
            bleu_sums[2] / n,
            bleu_sums[3] / n,
        ],
        Aggregation::Corpus => {
            let pooled_scores = bleu_from_stats(&pooled, 4);
            [pooled_scores[0], pooled_scores[1], pooled_scores[2], pooled_scores[3]]
        }
    };

    Ok(MetricScores {
        b1: bleu_scores[0],
        b2: bleu_scores[1],
        b3: bleu_scores[2],
        b4: bleu_scores[3],
        meteor: meteor_sum / n,
        rouge_l: rouge_sum / n,
    })
}

/// Evaluates several systems over their pair sets into one report.
pub fn evaluate_systems(
    systems: &[(String, Vec<EvalPair>)],
    aggregation: Aggregation,
    beta: f64,
) -> Result<EvalReport, EvalError> {
    if systems.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let mut report = EvalReport {
        systems: IndexMap::new(),
        n_pairs: systems.first().map_or(0, |(_, pairs)| pairs.len()),
        aggregation,
    };
    for (name, pairs) in systems {
        report
            .systems
            .insert(name.clone(), evaluate_corpus(pairs, aggregation, beta)?);
    }
    Ok(report)
}

fn best_per_column(report: &EvalReport) -> [f64; 6] {
    let mut best = [f64::NEG_INFINITY; 6];
    for scores in report.systems.values() {
        for (slot, value) in best.iter_mut().zip(scores.as_array()) {
            *slot = slot.max(value);
        }
    }
    best
}

/// Aligned text table in the six-column order; with `mark_best`, the best
/// value in each column is flagged with `*`.
pub fn render_table(report: &EvalReport, mark_best: bool) -> String {
    let name_width = report
        .systems
        .keys()
        .map(String::len)
        .chain(std::iter::once("Model".len()))
        .max()
        .unwrap_or(5);
    let best = best_per_column(report);

    let mut out = String::new();
    out.push_str(&format!("{:<name_width$}", "Model"));
    for column in METRIC_COLUMNS {
        out.push_str(&format!("  {column:>8}"));
    }
    out.push('\n');
    for (name, scores) in &report.systems {
        out.push_str(&format!("{name:<name_width$}"));
        for (value, top) in scores.as_array().into_iter().zip(best) {
            let marker = if mark_best && report.systems.len() > 1 && (value - top).abs() < 1e-9 {
                "*"
            } else {
                ""
            };
            out.push_str(&format!("  {:>8}", format!("{value:.2}{marker}")));
        }
        out.push('\n');
    }
    out
}

/// CSV with the same column order as the tables.
pub fn render_csv(report: &EvalReport) -> String {
    let mut out = String::from("Model,B-1,B-2,B-3,B-4,METEOR,R-L\n");
    for (name, scores) in &report.systems {
        let row: Vec<String> = scores.as_array().iter().map(|v| format!("{v:.4}")).collect();
        out.push_str(&format!("{name},{}\n", row.join(",")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("The Cat sat."), vec!["the", "cat", "sat"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("don't  stop"), vec!["don't", "stop"]);
        assert_eq!(tokenize("...  ---"), Vec::<String>::new());
        assert_eq!(tokenize("\"quoted!\" (text)"), vec!["quoted", "text"]);
    }

    fn pair(id: &str, hyp: &str, refs: &[&str]) -> EvalPair {
        EvalPair {
            id: id.into(),
            hypothesis: hyp.into(),
            references: refs.iter().map(|r| r.to_string()).collect(),
        }
    }

    #[test]
    fn identity_pair_rows_max_scores() {
        let text = "the music is gentle and soothing";
        let scores = evaluate_corpus(
            &[pair("p0", text, &[text])],
            Aggregation::SentenceMean,
            DEFAULT_BETA,
        )
        .unwrap();
        assert!((scores.b1 - 100.0).abs() < 1e-9);
        assert!((scores.b4 - 100.0).abs() < 1e-9);
        assert!((scores.rouge_l - 100.0).abs() < 1e-9);
        let n = 6.0f64;
        assert!((scores.meteor - 100.0 * (1.0 - 0.5 / n.powi(3))).abs() < 1e-9);
    }

    #[test]
    fn sentence_mean_is_mean_of_per_pair_bleu() {
        let pairs = vec![
            pair("a", "the cat", &["the cat sat"]),
            pair("b", "a a a", &["a b"]),
            pair("c", "sun over hills", &["sun over the hills"]),
        ];
        let scores =
            evaluate_corpus(&pairs, Aggregation::SentenceMean, DEFAULT_BETA).unwrap();
        let mean_b1: f64 = pairs
            .iter()
            .map(|p| {
                let hyp = tokenize(&p.hypothesis);
                let refs: Vec<Vec<String>> = p.references.iter().map(|r| tokenize(r)).collect();
                bleu(&hyp, &refs, 1)[0]
            })
            .sum::<f64>()
            / pairs.len() as f64;
        assert!((scores.b1 - mean_b1).abs() < 1e-9);
    }

    #[test]
    fn no_pairs_is_error() {
        assert!(matches!(
            evaluate_corpus(&[], Aggregation::SentenceMean, DEFAULT_BETA),
            Err(EvalError::NoPairs)
        ));
    }

    #[test]
    fn table_has_six_columns_and_best_markers() {
        let pairs = vec![pair("p", "the cat", &["the cat sat"])];
        let better = vec![pair("p", "the cat sat", &["the cat sat"])];
        let report = evaluate_systems(
            &[("base".into(), pairs), ("better".into(), better)],
            Aggregation::SentenceMean,
            DEFAULT_BETA,
        )
        .unwrap();
        let table = render_table(&report, true);
        let header = table.lines().next().unwrap();
        for column in METRIC_COLUMNS {
            assert!(header.contains(column), "{header}");
        }
        let better_row = table.lines().nth(2).unwrap();
        assert!(better_row.contains("100.00*"), "{table}");

        let csv = render_csv(&report);
        assert!(csv.starts_with("Model,B-1,B-2,B-3,B-4,METEOR,R-L\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn appended_noise_never_raises_b1_when_bp_is_one() {
        // Monotonicity spot check from randomized texts.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let vocab = ["sun", "forest", "calm", "river", "stone"];
        for _ in 0..200 {
            let len = rng.gen_range(3..8);
            let reference: Vec<String> = (0..len)
                .map(|_| vocab[rng.gen_range(0..vocab.len())].to_string())
                .collect();
            let mut hypothesis = reference.clone();
            hypothesis.push("zzz".into());
            let base = bleu(&reference, &[reference.clone()], 1)[0];
            let noisy = bleu(&hypothesis, &[reference.clone()], 1)[0];
            assert!(noisy <= base + 1e-9, "{reference:?}");
        }
    }
}
