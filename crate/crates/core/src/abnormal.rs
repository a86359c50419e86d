//! Abnormality-aware heads: the 14-way disease-recognition loss on the
//! pooled visual feature, the normal-abnormal cosine-margin contrastive loss
//! over subgraph summaries, and the rule-based report labeler that stands in
//! for an external labeling tool.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::attn::{ParamVisitor, ParamVisitorMut};
use crate::tape::{Tape, Var};
use crate::vocab::tokenize;

pub const NUM_DISEASES: usize = 14;

/// Per-image binary disease labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseLabels {
    pub y: Vec<u8>,
}

impl DiseaseLabels {
    pub fn zeros() -> Self {
        Self {
            y: vec![0; NUM_DISEASES],
        }
    }
}

/// Linear classification head over the pooled visual feature.
#[derive(Debug, Clone)]
pub struct DiseaseHead<S> {
    pub w: Mat<S>,
    pub b: Mat<S>,
}

impl<S: Scalar> DiseaseHead<S> {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Mat::glorot(channels, NUM_DISEASES, rng),
            b: Mat::zeros(1, NUM_DISEASES),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<S>) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<S>) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Mean binary cross-entropy of the head's 14 sigmoids against the labels.
pub fn disease_recognition_loss_tape<S: Scalar>(
    t: &mut Tape<S>,
    v_g: Var,
    head_w: Var,
    head_b: Var,
    labels: &DiseaseLabels,
) -> Var {
    let z = t.matmul(v_g, head_w);
    let logits = t.add_row(z, head_b);
    let targets = Mat::from_vec(
        1,
        NUM_DISEASES,
        labels.y.iter().map(|&v| S::of(v as f64)).collect(),
    );
    t.bce_with_logits(logits, targets, S::one())
}

/// Inference-mode disease loss.
pub fn disease_recognition_loss<S: Scalar>(
    v_g: &Mat<S>,
    head: &DiseaseHead<S>,
    labels: &DiseaseLabels,
) -> S {
    let mut t = Tape::new();
    let w = t.param("dr.w", &head.w);
    let b = t.param("dr.b", &head.b);
    let v = t.constant(v_g.clone());
    let loss = disease_recognition_loss_tape(&mut t, v, w, b, labels);
    t.value(loss).item()
}

/// Margin and normalizer convention for the contrastive loss.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveConfig {
    pub margin: f64,
    /// Both terms under 1/(N^k_b)^2 when true; only the same-label term when
    /// false (the literal typeset reading).
    pub normalize_both: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            margin: 0.4,
            normalize_both: true,
        }
    }
}

/// Normal-abnormal segregation loss. For each anatomical category with at
/// least two summaries in the batch: same-label pairs (i = j included) pay
/// 1 - cosine, different-label pairs pay max(0, cosine - margin); the result
/// is averaged over qualifying categories. Differentiable through the
/// summary vectors.
pub fn nas_contrastive_loss_tape<S: Scalar>(
    t: &mut Tape<S>,
    groups: &[(Var, Vec<u8>)],
    cfg: &ContrastiveConfig,
) -> Var {
    let mut per_category: Vec<Var> = Vec::new();
    for (summaries, labels) in groups {
        let n = labels.len();
        if n < 2 {
            continue;
        }
        debug_assert_eq!(t.value(*summaries).rows(), n);
        let unit = t.l2_normalize_rows(*summaries);
        let cos = t.matmul_tb(unit, unit);

        let mut same = Mat::zeros(n, n);
        let mut diff = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == labels[j] {
                    *same.at_mut(i, j) = S::one();
                } else {
                    *diff.at_mut(i, j) = S::one();
                }
            }
        }

        let neg_cos = t.scale(cos, S::of(-1.0));
        let one_minus = t.add_const(neg_cos, S::one());
        let pull = t.mul_const(one_minus, same);

        let shifted = t.add_const(cos, S::of(-cfg.margin));
        let hinge = t.relu(shifted);
        let push = t.mul_const(hinge, diff);

        let pull_sum = t.sum_all(pull);
        let push_sum = t.sum_all(push);
        let inv_sq = S::of(1.0 / (n * n) as f64);
        let term = if cfg.normalize_both {
            let s = t.add(pull_sum, push_sum);
            t.scale(s, inv_sq)
        } else {
            let p = t.scale(pull_sum, inv_sq);
            t.add(p, push_sum)
        };
        per_category.push(term);
    }
    if per_category.is_empty() {
        return t.constant(Mat::scalar(S::zero()));
    }
    let stacked = t.concat_cols(&per_category);
    t.mean_all(stacked)
}

/// Inference-mode contrastive loss over per-category (summaries, labels)
/// groups.
pub fn nas_contrastive_loss<S: Scalar>(
    groups: &[(Mat<S>, Vec<u8>)],
    cfg: &ContrastiveConfig,
) -> S {
    let mut t = Tape::new();
    let bound: Vec<(Var, Vec<u8>)> = groups
        .iter()
        .map(|(m, l)| (t.constant(m.clone()), l.clone()))
        .collect();
    let loss = nas_contrastive_loss_tape(&mut t, &bound, cfg);
    t.value(loss).item()
}

/// Positive keywords and negators for one disease.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeywordEntry {
    pub positive: Vec<String>,
    pub negators: Vec<String>,
}

/// Disease-name-keyed keyword map; iteration order is the stable map order,
/// and the label vector follows it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeywordMap {
    pub diseases: BTreeMap<String, KeywordEntry>,
}

pub const DEFAULT_DISEASES: [&str; NUM_DISEASES] = [
    "atelectasis",
    "cardiomegaly",
    "consolidation",
    "edema",
    "enlarged cardiomediastinum",
    "fracture",
    "lung lesion",
    "lung opacity",
    "no finding",
    "pleural effusion",
    "pleural other",
    "pneumonia",
    "pneumothorax",
    "support devices",
];

impl KeywordMap {
    /// The standard 14-category chest-radiograph label set with simple
    /// negation words.
    pub fn default_chest() -> Self {
        let negators = ["no", "without", "negative", "free"];
        let mut diseases = BTreeMap::new();
        for name in DEFAULT_DISEASES {
            diseases.insert(
                name.to_string(),
                KeywordEntry {
                    positive: vec![name.to_string()],
                    negators: negators.iter().map(|s| s.to_string()).collect(),
                },
            );
        }
        Self { diseases }
    }

    pub fn disease_names(&self) -> Vec<&str> {
        self.diseases.keys().map(|s| s.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.diseases.keys().position(|k| k == name)
    }
}

/// Labels a report: a disease is positive when one of its keyword phrases
/// occurs outside a negation window of three preceding tokens.
pub fn rule_based_labeler(report: &str, map: &KeywordMap) -> DiseaseLabels {
    let tokens = tokenize(report);
    let mut y = Vec::with_capacity(map.diseases.len());
    for entry in map.diseases.values() {
        let mut label = 0u8;
        for phrase in &entry.positive {
            let phrase_toks = tokenize(phrase);
            if phrase_toks.is_empty() {
                continue;
            }
            for start in 0..tokens.len() {
                if start + phrase_toks.len() > tokens.len() {
                    break;
                }
                if tokens[start..start + phrase_toks.len()] != phrase_toks[..] {
                    continue;
                }
                let window_start = start.saturating_sub(3);
                let negated = tokens[window_start..start]
                    .iter()
                    .any(|t| entry.negators.iter().any(|n| n == t));
                if !negated {
                    label = 1;
                    break;
                }
            }
            if label == 1 {
                break;
            }
        }
        y.push(label);
    }
    DiseaseLabels { y }
}
