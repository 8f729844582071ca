//! Caption quality metrics: corpus BLEU-4 (clipped n-gram precision,
//! brevity penalty, no smoothing), LCS-based ROUGE-L, object-level
//! change statistics, and change-detection accuracy against planted
//! ground truth.

use crate::error::{Error, Result};
use crate::scenegen::{ChangeKind, ObjectClass, PairRecord};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Verb families a change caption can use for an object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerbFamily {
    Appear,
    Disappear,
}

/// Default lexicons matching the generator's caption templates.
pub fn object_lexicon() -> HashMap<String, ObjectClass> {
    ObjectClass::NON_EMPTY
        .iter()
        .map(|&c| (c.token().to_string(), c))
        .collect()
}

pub fn verb_lexicon() -> HashMap<String, VerbFamily> {
    [
        ("appears".to_string(), VerbFamily::Appear),
        ("disappears".to_string(), VerbFamily::Disappear),
    ]
    .into_iter()
    .collect()
}

// ---------------------------------------------------------------------------
// BLEU-4

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4: geometric mean of clipped 1..4-gram precisions times
/// the brevity penalty. Zero counts at any order give zero (no
/// smoothing). Empty hypotheses score zero and are reported through the
/// flagged count.
pub fn bleu4(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(hypotheses, references)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, refs) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        // Closest reference length, ties toward the shorter.
        let closest = refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap();
        ref_len += closest;
        for n in 1..=4 {
            let hyp_counts = ngram_counts(hyp, n);
            let mut clipped = 0usize;
            for (gram, &count) in &hyp_counts {
                let best_ref = refs
                    .iter()
                    .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                clipped += count.min(best_ref);
            }
            matched[n - 1] += clipped;
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if matched.iter().any(|&m| m == 0) || total.iter().any(|&t| t == 0) {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..4)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_precision.exp())
}

// ---------------------------------------------------------------------------
// ROUGE-L

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y {
                prev + 1
            } else {
                dp[j + 1].max(dp[j])
            };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// Mean over items of the best-reference LCS F-score (balanced F, beta=1).
pub fn rouge_l(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(hypotheses, references)?;
    let mut sum = 0.0;
    for (hyp, refs) in hypotheses.iter().zip(references) {
        let mut best: f64 = 0.0;
        for reference in refs {
            if hyp.is_empty() || reference.is_empty() {
                continue;
            }
            let lcs = lcs_len(hyp, reference) as f64;
            if lcs == 0.0 {
                continue;
            }
            let p = lcs / hyp.len() as f64;
            let r = lcs / reference.len() as f64;
            best = best.max(2.0 * p * r / (p + r));
        }
        sum += best;
    }
    Ok(sum / hypotheses.len() as f64)
}

fn check_corpus(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<()> {
    if hypotheses.is_empty() {
        return Err(Error::Dimension("empty evaluation corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Dimension(format!(
            "{} hypotheses vs {} reference lists",
            hypotheses.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Dimension("hypothesis without references".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Object-level change statistics

/// Per-object counts following the appearance/disappearance protocol:
/// accuracy = (corr_a + corr_d + co_mentioned) / (pred_a + pred_d + pred_desc).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectStats {
    pub pred_a: usize,
    pub pred_d: usize,
    pub pred_desc: usize,
    pub corr_a: usize,
    pub corr_d: usize,
    pub co_mentioned: usize,
    /// None when the object was never predicted (zero denominator).
    pub accuracy: Option<f64>,
}

/// How one transcript talks about one object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mention {
    None,
    Plain,
    Appear,
    Disappear,
}

/// Scan a caption for the object, classifying the clause verb. Clauses
/// are the "and"-separated segments of the generator's templates; the
/// first change-verb clause mentioning the object decides the label.
fn classify_mention(
    tokens: &[String],
    object_token: &str,
    verbs: &HashMap<String, VerbFamily>,
) -> Mention {
    let mut found = Mention::None;
    for clause in tokens.split(|t| t == "and") {
        if !clause.iter().any(|t| t == object_token) {
            continue;
        }
        let verb = clause.iter().find_map(|t| verbs.get(t));
        found = match verb {
            Some(VerbFamily::Appear) => return Mention::Appear,
            Some(VerbFamily::Disappear) => return Mention::Disappear,
            None if found == Mention::None => Mention::Plain,
            None => found,
        };
    }
    found
}

/// Whether any clause mentions the object together with a verb of the
/// given family (a caption may both remove and add the same class).
fn mentions_with(
    tokens: &[String],
    object_token: &str,
    family: VerbFamily,
    verbs: &HashMap<String, VerbFamily>,
) -> bool {
    tokens.split(|t| t == "and").any(|clause| {
        clause.iter().any(|t| t == object_token)
            && clause.iter().any(|t| verbs.get(t) == Some(&family))
    })
}

/// Object-level agreement between hypothesis and reference transcripts.
pub fn object_change_stats(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    objects: &HashMap<String, ObjectClass>,
    verbs: &HashMap<String, VerbFamily>,
) -> Result<Vec<(String, ObjectStats)>> {
    if objects.is_empty() || verbs.is_empty() {
        return Err(Error::Config("empty lexicon".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Dimension(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut names: Vec<&String> = objects.keys().collect();
    names.sort();
    let mut table = Vec::new();
    for name in names {
        let mut stats = ObjectStats::default();
        for (hyp, reference) in hypotheses.iter().zip(references) {
            let h = classify_mention(hyp, name, verbs);
            let r = classify_mention(reference, name, verbs);
            let mut credited = false;
            match h {
                Mention::Appear => {
                    stats.pred_a += 1;
                    if r == Mention::Appear {
                        stats.corr_a += 1;
                        credited = true;
                    }
                }
                Mention::Disappear => {
                    stats.pred_d += 1;
                    if r == Mention::Disappear {
                        stats.corr_d += 1;
                        credited = true;
                    }
                }
                Mention::Plain => stats.pred_desc += 1,
                Mention::None => {}
            }
            // Joint mentions already credited as correct change
            // predictions are not counted again, keeping the accuracy
            // ratio inside [0, 1].
            if !credited && h != Mention::None && r != Mention::None {
                stats.co_mentioned += 1;
            }
        }
        let denom = stats.pred_a + stats.pred_d + stats.pred_desc;
        stats.accuracy = (denom > 0)
            .then(|| (stats.corr_a + stats.corr_d + stats.co_mentioned) as f64 / denom as f64);
        table.push((name.clone(), stats));
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Change-detection accuracy

/// Fraction of pairs whose hypothesis mentions every planted change with
/// the right verb family: adds need the new class with an appear verb,
/// removals the old class with a disappear verb, replacements both.
pub fn change_detection_acc(
    hypotheses: &[Vec<String>],
    records: &[PairRecord],
) -> Result<f64> {
    if hypotheses.len() != records.len() {
        return Err(Error::Dimension(format!(
            "{} hypotheses vs {} pair records",
            hypotheses.len(),
            records.len()
        )));
    }
    if records.is_empty() {
        return Err(Error::Dimension("empty evaluation corpus".into()));
    }
    let verbs = verb_lexicon();
    let mut correct = 0usize;
    for (hyp, record) in hypotheses.iter().zip(records) {
        let covered = record.changes.iter().all(|change| {
            let need: Vec<(ObjectClass, VerbFamily)> = match change.kind {
                ChangeKind::Add => vec![(change.after_class, VerbFamily::Appear)],
                ChangeKind::Remove => vec![(change.before_class, VerbFamily::Disappear)],
                ChangeKind::Replace => vec![
                    (change.before_class, VerbFamily::Disappear),
                    (change.after_class, VerbFamily::Appear),
                ],
            };
            need.into_iter()
                .all(|(class, family)| mentions_with(hyp, class.token(), family, &verbs))
        });
        correct += usize::from(covered);
    }
    Ok(correct as f64 / records.len() as f64)
}

// ---------------------------------------------------------------------------
// Report

/// Bundle of evaluation metrics, serialized by the eval command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub change_detection_acc: f64,
    pub object_stats: Vec<(String, ObjectStats)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{self, GenConfig};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_hypothesis_scores_one() {
        let hyp = vec![toks("a b c d e")];
        let refs = vec![vec![toks("a b c d e")]];
        assert!((bleu4(&hyp, &refs).unwrap() - 1.0).abs() < 1e-12);
        assert!((rouge_l(&hyp, &refs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_tokens_score_zero() {
        let hyp = vec![toks("x y z w v")];
        let refs = vec![vec![toks("a b c d e")]];
        assert_eq!(bleu4(&hyp, &refs).unwrap(), 0.0);
        assert_eq!(rouge_l(&hyp, &refs).unwrap(), 0.0);
    }

    #[test]
    fn bleu_matches_hand_counted_fixture() {
        // 4/5, 3/4, 2/3, 1/2 precisions with BP 1: (0.2)^(1/4).
        let hyp = vec![toks("a b c d e")];
        let refs = vec![vec![toks("a b c d f")]];
        let expect = 0.2f64.powf(0.25);
        let got = bleu4(&hyp, &refs).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((expect - 0.6687).abs() < 1e-4);
    }

    #[test]
    fn rouge_matches_hand_counted_fixture() {
        let hyp = vec![toks("a b c")];
        let refs = vec![vec![toks("a c b")]];
        let got = rouge_l(&hyp, &refs).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn brevity_penalty_punishes_short_hypotheses() {
        let hyp = vec![toks("a b c d")];
        let refs = vec![vec![toks("a b c d e f g h")]];
        let got = bleu4(&hyp, &refs).unwrap();
        let expect = (1.0 - 8.0 / 4.0f64).exp(); // precisions are all 1
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn corpus_scores_are_order_invariant() {
        let hyp = vec![toks("a b c d e"), toks("p q r s")];
        let refs = vec![vec![toks("a b c d f")], vec![toks("p q r s")]];
        let b1 = bleu4(&hyp, &refs).unwrap();
        let r1 = rouge_l(&hyp, &refs).unwrap();
        let hyp2 = vec![hyp[1].clone(), hyp[0].clone()];
        let refs2 = vec![refs[1].clone(), refs[0].clone()];
        assert!((bleu4(&hyp2, &refs2).unwrap() - b1).abs() < 1e-12);
        assert!((rouge_l(&hyp2, &refs2).unwrap() - r1).abs() < 1e-12);
    }

    #[test]
    fn deleting_a_matching_fourgram_never_raises_bleu() {
        let refs = vec![vec![toks("a b c d e f g h")]];
        let full = bleu4(&vec![toks("a b c d e f g h")], &refs).unwrap();
        let dropped = bleu4(&vec![toks("a b c d")], &refs).unwrap();
        assert!(dropped <= full + 1e-12);
    }

    #[test]
    fn empty_hypothesis_scores_zero_without_error() {
        let hyp = vec![toks(""), toks("a b c d e")];
        let refs = vec![vec![toks("a b")], vec![toks("a b c d e")]];
        let got = bleu4(&hyp, &refs).unwrap();
        assert!(got >= 0.0 && got <= 1.0);
    }

    #[test]
    fn object_stats_reproduce_the_published_car_row() {
        // 6 appear predictions (2 correct), 4 disappear predictions
        // (0 correct), 14 plain mentions of which 6 are co-mentioned in
        // the references: accuracy = (2 + 0 + 6) / 24 = 33.3%.
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for i in 0..6 {
            hyps.push(toks("a red car appears"));
            refs.push(if i < 2 {
                toks("a red car appears")
            } else {
                toks("a red tree appears")
            });
        }
        for _ in 0..4 {
            hyps.push(toks("the red car disappears"));
            refs.push(toks("nothing here"));
        }
        for i in 0..14 {
            hyps.push(toks("the red car near the road"));
            refs.push(if i < 6 {
                toks("the car stands still")
            } else {
                toks("an empty field")
            });
        }
        let table =
            object_change_stats(&hyps, &refs, &object_lexicon(), &verb_lexicon()).unwrap();
        let (_, car) = table.iter().find(|(name, _)| name == "car").unwrap();
        assert_eq!(car.pred_a, 6);
        assert_eq!(car.pred_d, 4);
        assert_eq!(car.pred_desc, 14);
        assert_eq!(car.corr_a, 2);
        assert_eq!(car.corr_d, 0);
        assert_eq!(car.co_mentioned, 6);
        let acc = car.accuracy.unwrap();
        assert!((acc - 8.0 / 24.0).abs() < 1e-12);
        assert!((acc * 100.0 - 33.3).abs() < 0.05);
    }

    #[test]
    fn self_agreement_is_perfect() {
        let hyps = vec![toks("a red car appears")];
        let refs = hyps.clone();
        let table =
            object_change_stats(&hyps, &refs, &object_lexicon(), &verb_lexicon()).unwrap();
        let (_, car) = table.iter().find(|(name, _)| name == "car").unwrap();
        assert_eq!(car.pred_a, 1);
        assert_eq!(car.corr_a, 1);
        assert_eq!(car.accuracy, Some(1.0));
    }

    #[test]
    fn unpredicted_object_has_undefined_accuracy() {
        let hyps = vec![toks("a red car appears")];
        let refs = vec![toks("a red tree appears")];
        let table =
            object_change_stats(&hyps, &refs, &object_lexicon(), &verb_lexicon()).unwrap();
        let (_, tree) = table.iter().find(|(name, _)| name == "tree").unwrap();
        assert_eq!(tree.pred_a + tree.pred_d + tree.pred_desc, 0);
        assert_eq!(tree.accuracy, None);
    }

    #[test]
    fn accuracy_identity_holds_for_generated_tables() {
        let hyps = vec![
            toks("a red car appears and the blue tree disappears"),
            toks("the view moves left and a gray building appears"),
            toks("the road remains"),
        ];
        let refs = vec![
            toks("a red car appears"),
            toks("the gray building disappears"),
            toks("the road remains the same"),
        ];
        let table =
            object_change_stats(&hyps, &refs, &object_lexicon(), &verb_lexicon()).unwrap();
        for (name, stats) in table {
            let denom = stats.pred_a + stats.pred_d + stats.pred_desc;
            match stats.accuracy {
                Some(acc) => {
                    let expect =
                        (stats.corr_a + stats.corr_d + stats.co_mentioned) as f64 / denom as f64;
                    assert!((acc - expect).abs() < 1e-12, "{name}");
                }
                None => assert_eq!(denom, 0, "{name}"),
            }
        }
    }

    #[test]
    fn ground_truth_captions_detect_every_change() {
        let config = GenConfig::default();
        let records: Vec<PairRecord> = (0..30)
            .map(|s| scenegen::generate_pair(s, &config).unwrap())
            .collect();
        let hyps: Vec<Vec<String>> = records
            .iter()
            .map(|r| r.captions_forward[0].clone())
            .collect();
        assert_eq!(change_detection_acc(&hyps, &records).unwrap(), 1.0);
    }

    #[test]
    fn empty_hypotheses_detect_nothing() {
        let config = GenConfig {
            num_changes: 1,
            ..GenConfig::default()
        };
        let records: Vec<PairRecord> = (0..10)
            .map(|s| scenegen::generate_pair(s, &config).unwrap())
            .collect();
        let hyps = vec![Vec::new(); records.len()];
        assert_eq!(change_detection_acc(&hyps, &records).unwrap(), 0.0);
    }

    #[test]
    fn misaligned_corpora_are_rejected() {
        let hyps = vec![toks("a")];
        assert!(matches!(
            change_detection_acc(&hyps, &[]),
            Err(Error::Dimension(_))
        ));
    }
}
