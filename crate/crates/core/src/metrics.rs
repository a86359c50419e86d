//! Corpus-level text-overlap metrics and label-based clinical efficacy
//! scoring for generated reports.

use crate::abnormal::{rule_based_labeler, DiseaseLabels, KeywordMap};
use crate::error::{Error, Result};
use crate::vocab::tokenize;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Smoothing floor used for n-gram orders with zero matches.
pub const BLEU_EPS: f64 = 1e-9;

/// Recall weighting in the ROUGE-L F-measure (beta squared).
pub const ROUGE_BETA_SQ: f64 = 1.2 * 1.2;

/// One evaluation run over a prediction/reference corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
    /// Mean candidate length in words (punctuation tokens excluded).
    pub avg_report_length: f64,
}

impl MetricReport {
    /// Two-row aligned table in the usual reporting column order.
    pub fn table(&self) -> String {
        let headers = ["BL-1", "BL-2", "BL-3", "BL-4", "RG-L", "P", "R", "F1"];
        let values = [
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
            self.bleu_4,
            self.rouge_l,
            self.ce_precision,
            self.ce_recall,
            self.ce_f1,
        ];
        let mut head = String::new();
        let mut row = String::new();
        for (h, v) in headers.iter().zip(values) {
            head.push_str(&format!("{h:>8}"));
            row.push_str(&format!("{v:>8.4}"));
        }
        format!("{head}\n{row}\n")
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-n: clipped modified precision per order, geometric mean over
/// orders 1..=n, brevity penalty. Orders with zero matches are floored at
/// `BLEU_EPS` matches rather than zeroing the whole score.
pub fn bleu<T: AsRef<str>>(candidates: &[T], references: &[T], n: usize) -> Result<f64> {
    assert!((1..=4).contains(&n));
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch {
            context: "bleu",
            left: candidates.len(),
            right: references.len(),
        });
    }
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let cand_toks: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c.as_ref())).collect();
    let ref_toks: Vec<Vec<String>> = references.iter().map(|r| tokenize(r.as_ref())).collect();

    let cand_len: usize = cand_toks.iter().map(Vec::len).sum();
    let ref_len: usize = ref_toks.iter().map(Vec::len).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for order in 1..=n {
        let mut matches = 0usize;
        let mut total = 0usize;
        for (c, r) in cand_toks.iter().zip(&ref_toks) {
            let cc = ngram_counts(c, order);
            let rc = ngram_counts(r, order);
            for (gram, &count) in &cc {
                total += count;
                matches += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
        let p = if matches > 0 {
            matches as f64 / total as f64
        } else if total > 0 {
            BLEU_EPS / total as f64
        } else {
            BLEU_EPS
        };
        log_sum += p.ln();
    }
    let brevity = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(brevity * (log_sum / n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean per-pair ROUGE-L: LCS-based F-measure with recall-dominant
/// weighting. Pairs where either side has no tokens score zero.
pub fn rouge_l<T: AsRef<str>>(candidates: &[T], references: &[T]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch {
            context: "rouge_l",
            left: candidates.len(),
            right: references.len(),
        });
    }
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        let ct = tokenize(c.as_ref());
        let rt = tokenize(r.as_ref());
        if ct.is_empty() || rt.is_empty() {
            continue;
        }
        let l = lcs_len(&ct, &rt) as f64;
        let p = l / ct.len() as f64;
        let rec = l / rt.len() as f64;
        let denom = rec + ROUGE_BETA_SQ * p;
        if denom > 0.0 {
            sum += (1.0 + ROUGE_BETA_SQ) * rec * p / denom;
        }
    }
    Ok(sum / candidates.len() as f64)
}

/// Macro precision/recall/F1 of labeler output on generated vs reference
/// reports. Empty denominators score zero, and the macro mean always runs
/// over the full label set, absent diseases included.
pub fn clinical_efficacy<T: AsRef<str>>(
    predictions: &[T],
    references: &[T],
    labeler: impl Fn(&str) -> DiseaseLabels,
) -> (f64, f64, f64) {
    assert_eq!(predictions.len(), references.len());
    let pred: Vec<DiseaseLabels> = predictions.iter().map(|s| labeler(s.as_ref())).collect();
    let truth: Vec<DiseaseLabels> = references.iter().map(|s| labeler(s.as_ref())).collect();
    let n_diseases = pred.first().map_or(0, |l| l.y.len());
    if n_diseases == 0 {
        return (0.0, 0.0, 0.0);
    }
    let (mut psum, mut rsum, mut fsum) = (0.0, 0.0, 0.0);
    for d in 0..n_diseases {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (p, t) in pred.iter().zip(&truth) {
            match (p.y[d], t.y[d]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fneg += 1,
                _ => {}
            }
        }
        let p = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let r = if tp + fneg > 0 {
            tp as f64 / (tp + fneg) as f64
        } else {
            0.0
        };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        psum += p;
        rsum += r;
        fsum += f;
    }
    let k = n_diseases as f64;
    (psum / k, rsum / k, fsum / k)
}

/// Mean word count of the reports; punctuation-only tokens are not words.
pub fn avg_report_length<T: AsRef<str>>(reports: &[T]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    let total: usize = reports
        .iter()
        .map(|r| {
            tokenize(r.as_ref())
                .iter()
                .filter(|t| t.chars().any(|c| c.is_alphanumeric()))
                .count()
        })
        .sum();
    total as f64 / reports.len() as f64
}

/// Full evaluation of a candidate corpus against references.
pub fn evaluate_reports<T: AsRef<str>>(
    predictions: &[T],
    references: &[T],
    map: &KeywordMap,
) -> Result<MetricReport> {
    let (p, r, f1) = clinical_efficacy(predictions, references, |s| rule_based_labeler(s, map));
    Ok(MetricReport {
        bleu_1: bleu(predictions, references, 1)?,
        bleu_2: bleu(predictions, references, 2)?,
        bleu_3: bleu(predictions, references, 3)?,
        bleu_4: bleu(predictions, references, 4)?,
        rouge_l: rouge_l(predictions, references)?,
        ce_precision: p,
        ce_recall: r,
        ce_f1: f1,
        avg_report_length: avg_report_length(predictions),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abnormal::DEFAULT_DISEASES;

    #[test]
    fn identical_corpus_scores_one_everywhere() {
        let texts = vec![
            "the right lung is sharp and small .",
            "the carina is central with pneumonia .",
        ];
        for n in 1..=4 {
            assert!((bleu(&texts, &texts, n).unwrap() - 1.0).abs() <= 1e-12);
        }
        assert!((rouge_l(&texts, &texts).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn disjoint_token_sets_score_zero_rouge_and_tiny_bleu() {
        let cands = vec!["alpha beta gamma delta"];
        let refs = vec!["epsilon zeta eta theta"];
        assert_eq!(rouge_l(&cands, &refs).unwrap(), 0.0);
        assert!(bleu(&cands, &refs, 4).unwrap() <= 1e-6);
    }

    #[test]
    fn clipping_counts_each_reference_gram_once() {
        let cands = vec!["the the the"];
        let refs = vec!["the cat"];
        // One clipped match over three candidate unigrams; candidate is
        // longer than the reference so no brevity penalty applies.
        assert!((bleu(&cands, &refs, 1).unwrap() - 1.0 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn short_candidate_pays_the_brevity_penalty() {
        let cands = vec!["the cat sat"];
        let refs = vec!["the cat sat on the mat"];
        // Every order matches perfectly; only the brevity penalty remains.
        let expected = (1.0 - 6.0 / 3.0f64).exp();
        for n in 1..=3 {
            assert!((bleu(&cands, &refs, n).unwrap() - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn bleu_never_increases_with_order() {
        let cands = vec![
            "the right lung is sharp with pneumonia .",
            "the carina is central and rounded .",
        ];
        let refs = vec![
            "the right lung is coarse with pneumonia .",
            "the carina is rounded and central .",
        ];
        let scores: Vec<f64> = (1..=4).map(|n| bleu(&cands, &refs, n).unwrap()).collect();
        for w in scores.windows(2) {
            assert!(w[0] >= w[1] - 1e-15, "{scores:?}");
        }
    }

    #[test]
    fn metrics_ignore_sample_order() {
        let cands = vec!["a b c d", "e f g h", "a c e g"];
        let refs = vec!["a b c e", "e f h g", "a b e g"];
        let perm = [2usize, 0, 1];
        let pc: Vec<&str> = perm.iter().map(|&i| cands[i]).collect();
        let pr: Vec<&str> = perm.iter().map(|&i| refs[i]).collect();
        for n in 1..=4 {
            assert!(
                (bleu(&cands, &refs, n).unwrap() - bleu(&pc, &pr, n).unwrap()).abs() <= 1e-15
            );
        }
        assert!((rouge_l(&cands, &refs).unwrap() - rouge_l(&pc, &pr).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn rouge_hand_pair_matches_the_scalar_formula() {
        let cands = vec!["a b c d"];
        let refs = vec!["a c d"];
        // LCS = 3, precision 3/4, recall 1.
        let p: f64 = 0.75;
        let r: f64 = 1.0;
        let expected = (1.0 + ROUGE_BETA_SQ) * r * p / (r + ROUGE_BETA_SQ * p);
        assert!((rouge_l(&cands, &refs).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn mismatched_corpus_lengths_are_an_error() {
        let two = vec!["a", "b"];
        let one = vec!["a"];
        assert!(matches!(
            bleu(&two, &one, 2),
            Err(Error::LengthMismatch { context: "bleu", .. })
        ));
        assert!(matches!(
            rouge_l(&two, &one),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn perfect_predictions_score_unit_efficiency_when_all_diseases_occur() {
        let map = KeywordMap::default_chest();
        let reports: Vec<String> = DEFAULT_DISEASES
            .iter()
            .map(|d| format!("the right lung is sharp with {d} ."))
            .collect();
        let (p, r, f) =
            clinical_efficacy(&reports, &reports, |s| rule_based_labeler(s, &map));
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_negative_predictions_have_zero_recall() {
        let map = KeywordMap::default_chest();
        let refs = vec!["the right lung is sharp with pneumonia ."];
        let preds = vec!["the right lung is sharp ."];
        let (p, r, f) = clinical_efficacy(&preds, &refs, |s| rule_based_labeler(s, &map));
        assert_eq!((p, r, f), (0.0, 0.0, 0.0));
    }

    #[test]
    fn efficacy_matches_a_confusion_matrix_oracle() {
        let map = KeywordMap::default_chest();
        let refs = vec![
            "the left lung is coarse with pneumonia .",
            "the spine is intact with edema .",
            "the carina is central with pneumonia .",
            "the right apex is smooth .",
        ];
        let preds = vec![
            "the left lung is coarse with pneumonia .",
            "the spine is intact .",
            "the carina is central with edema .",
            "the right apex is smooth with pneumonia .",
        ];
        let (p, r, f) = clinical_efficacy(&preds, &refs, |s| rule_based_labeler(s, &map));

        // Independent scalar accounting. Pneumonia: tp 1, fp 1, fn 1.
        // Edema: tp 0, fp 1, fn 1. Every other disease never fires.
        let p_pneu: f64 = 0.5;
        let r_pneu: f64 = 0.5;
        let f_pneu = 2.0 * p_pneu * r_pneu / (p_pneu + r_pneu);
        let k = DEFAULT_DISEASES.len() as f64;
        assert!((p - p_pneu / k).abs() <= 1e-9);
        assert!((r - r_pneu / k).abs() <= 1e-9);
        assert!((f - f_pneu / k).abs() <= 1e-9);
    }

    #[test]
    fn word_count_skips_punctuation() {
        let reports = vec!["the cat sat .", "a b , c ."];
        assert!((avg_report_length(&reports) - 3.0).abs() <= 1e-12);
    }

    #[test]
    fn report_serializes_and_tabulates() {
        let map = KeywordMap::default_chest();
        let texts = vec!["the right lung is sharp with pneumonia ."];
        let rep = evaluate_reports(&texts, &texts, &map).unwrap();
        assert_eq!(rep.bleu_4, 1.0);
        assert_eq!(rep.avg_report_length, 7.0);
        let json = serde_json::to_string(&rep).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(rep, back);
        let table = rep.table();
        assert!(table.contains("BL-1") && table.contains("RG-L"));
        assert_eq!(table.lines().count(), 2);
    }
}
