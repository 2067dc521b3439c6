//! Confusion matrices and classification metrics.
//!
//! Review outcomes are kept out of the matrix proper and tallied per truth
//! class in `review_by_truth`; every accuracy-bearing metric is computed over
//! auto-labeled cases only. A metric whose denominator is zero is `None`
//! (undefined), never silently zero.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::label::{FinalLabel, LabelId, TaskSchema};
use crate::vote::{DecisionTable, EnsembleDecision};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("no truth label for decided case(s): {0:?}")]
    MissingTruth(Vec<String>),
    #[error("truth label index {0} is outside the class list")]
    TruthOutOfRange(usize),
}

/// Counts indexed `(truth, predicted)` over the classes of `V`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub review_by_truth: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        ConfusionMatrix {
            classes,
            counts: alloc::vec![alloc::vec![0; n]; n],
            review_by_truth: alloc::vec![0; n],
        }
    }

    /// Builds a matrix from raw counts; `counts` must be square and match
    /// `classes`.
    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>, review_by_truth: Vec<u64>) -> Self {
        let n = classes.len();
        assert!(counts.len() == n && counts.iter().all(|r| r.len() == n));
        assert_eq!(review_by_truth.len(), n);
        ConfusionMatrix {
            classes,
            counts,
            review_by_truth,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn record(&mut self, truth: LabelId, outcome: FinalLabel) {
        match outcome {
            FinalLabel::Valid(p) => self.counts[truth.index()][p.index()] += 1,
            FinalLabel::Review => self.review_by_truth[truth.index()] += 1,
        }
    }

    pub fn n_auto(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn n_review(&self) -> u64 {
        self.review_by_truth.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// True positives, false positives, false negatives and true negatives
    /// for `class` against the rest.
    pub fn one_vs_rest(&self, class: usize) -> BinaryCounts {
        let tp = self.counts[class][class];
        let support: u64 = self.counts[class].iter().sum();
        let predicted: u64 = self.counts.iter().map(|row| row[class]).sum();
        let fn_ = support - tp;
        let fp = predicted - tp;
        let tn = self.n_auto() - tp - fn_ - fp;
        BinaryCounts { tp, fp, fn_, tn }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl BinaryCounts {
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn jaccard(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }
}

/// Tabulates decisions against truth. Every decided case must have a truth
/// label; truth entries without a decision are ignored.
pub fn build_confusion(
    schema: &TaskSchema,
    truth: &BTreeMap<String, LabelId>,
    decisions: &[EnsembleDecision],
) -> Result<ConfusionMatrix, EvalError> {
    let missing: Vec<String> = decisions
        .iter()
        .filter(|d| !truth.contains_key(&d.case_id))
        .map(|d| d.case_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingTruth(missing));
    }
    let mut cm = ConfusionMatrix::new(schema.valid_set().to_vec());
    for d in decisions {
        let t = truth[&d.case_id];
        if t.index() >= cm.n_classes() {
            return Err(EvalError::TruthOutOfRange(t.index()));
        }
        cm.record(t, d.outcome);
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub support: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub jaccard: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub f1_weighted: Option<f64>,
    pub f1_macro: Option<f64>,
    pub recall_positive: Option<f64>,
    pub specificity_positive: Option<f64>,
    pub jaccard: BTreeMap<String, Option<f64>>,
    pub review_rate: f64,
    pub n_auto: u64,
    pub n_review: u64,
    pub positive_class: String,
    pub per_class: Vec<ClassMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Computes the metric set for `cm`, binarizing recall and specificity on
/// `positive`.
pub fn metrics(cm: &ConfusionMatrix, positive: LabelId) -> MetricsReport {
    let n_auto = cm.n_auto();
    let n_review = cm.n_review();
    let total = n_auto + n_review;
    let review_rate = if total == 0 {
        1.0
    } else {
        n_review as f64 / total as f64
    };
    let mut warnings = Vec::new();

    let per_class: Vec<ClassMetrics> = (0..cm.n_classes())
        .map(|c| {
            let b = cm.one_vs_rest(c);
            ClassMetrics {
                label: cm.classes[c].clone(),
                support: b.tp + b.fn_,
                precision: b.precision(),
                recall: b.recall(),
                f1: b.f1(),
                jaccard: b.jaccard(),
            }
        })
        .collect();

    let mut weighted = 0.0;
    let mut weight = 0u64;
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    for m in &per_class {
        match m.f1 {
            Some(f1) => {
                weighted += m.support as f64 * f1;
                weight += m.support;
                macro_sum += f1;
                macro_n += 1;
            }
            None if n_auto > 0 => {
                warnings.push(format!("f1 undefined for class {:?}; excluded from averages", m.label))
            }
            None => {}
        }
    }
    let f1_weighted = (weight > 0).then(|| weighted / weight as f64);
    let f1_macro = (macro_n > 0).then(|| macro_sum / macro_n as f64);

    let pos = cm.one_vs_rest(positive.index());
    MetricsReport {
        accuracy: ratio(cm.trace(), n_auto),
        f1_weighted,
        f1_macro,
        recall_positive: pos.recall(),
        specificity_positive: pos.specificity(),
        jaccard: per_class
            .iter()
            .map(|m| (m.label.clone(), m.jaccard))
            .collect(),
        review_rate,
        n_auto,
        n_review,
        positive_class: cm.classes[positive.index()].clone(),
        per_class,
        warnings,
    }
}

/// One row of a threshold curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub min_votes: u32,
    pub accuracy: Option<f64>,
    pub f1_weighted: Option<f64>,
    pub recall_positive: Option<f64>,
    pub specificity_positive: Option<f64>,
    pub n_review: u64,
    pub n_auto: u64,
    pub review_rate: f64,
}

/// Metrics at each threshold of a sweep.
pub fn threshold_curve(
    schema: &TaskSchema,
    tables: &[DecisionTable],
    truth: &BTreeMap<String, LabelId>,
) -> Result<Vec<CurveRow>, EvalError> {
    tables
        .iter()
        .map(|t| {
            let cm = build_confusion(schema, truth, &t.decisions)?;
            let m = metrics(&cm, schema.positive_class());
            Ok(CurveRow {
                min_votes: t.min_votes,
                accuracy: m.accuracy,
                f1_weighted: m.f1_weighted,
                recall_positive: m.recall_positive,
                specificity_positive: m.specificity_positive,
                n_review: m.n_review,
                n_auto: m.n_auto,
                review_rate: m.review_rate,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn classes(n: usize) -> Vec<String> {
        ["A", "B", "C"][..n].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn jaccard_arithmetic() {
        let b = BinaryCounts { tp: 3, fp: 1, fn_: 1, tn: 0 };
        assert_eq!(b.jaccard(), Some(0.6));
    }

    #[test]
    fn binary_recall_and_specificity() {
        let cm = ConfusionMatrix::from_counts(classes(2), vec![vec![8, 2], vec![1, 9]], vec![0, 0]);
        let m = metrics(&cm, LabelId::from_index(0));
        assert_eq!(m.recall_positive, Some(0.8));
        assert_eq!(m.specificity_positive, Some(0.9));
        assert_eq!(m.accuracy, Some(17.0 / 20.0));
    }

    #[test]
    fn perfect_matrix() {
        let cm = ConfusionMatrix::from_counts(
            classes(3),
            vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 2]],
            vec![0; 3],
        );
        let m = metrics(&cm, LabelId::from_index(0));
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.f1_weighted, Some(1.0));
        assert!(m.jaccard.values().all(|j| *j == Some(1.0)));
        assert_eq!(m.review_rate, 0.0);
    }

    #[test]
    fn all_review_is_undefined() {
        let cm = ConfusionMatrix::from_counts(classes(3), vec![vec![0; 3]; 3], vec![4, 1, 0]);
        let m = metrics(&cm, LabelId::from_index(0));
        assert_eq!(m.accuracy, None);
        assert_eq!(m.f1_weighted, None);
        assert_eq!(m.recall_positive, None);
        assert_eq!(m.review_rate, 1.0);
        assert_eq!(m.n_review, 5);
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn empty_class_warns_and_is_excluded() {
        let cm = ConfusionMatrix::from_counts(
            classes(3),
            vec![vec![4, 1, 0], vec![0, 5, 0], vec![0, 0, 0]],
            vec![0; 3],
        );
        let m = metrics(&cm, LabelId::from_index(0));
        assert_eq!(m.per_class[2].f1, None);
        assert_eq!(m.per_class[2].jaccard, None);
        assert_eq!(m.warnings.len(), 1);
        // support-weighted over A (5) and B (5)
        let f1_a = 8.0 / 9.0;
        let f1_b = 10.0 / 11.0;
        assert!((m.f1_weighted.unwrap() - (f1_a + f1_b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn missing_truth_lists_ids() {
        let s = TaskSchema::ecg_af();
        let t = crate::vote::VoteTally::from_counts(vec![1, 0, 0], 0);
        let d = crate::vote::decide("x9", &t, 0, crate::vote::Denominator::Committee).unwrap();
        let err = build_confusion(&s, &BTreeMap::new(), &[d]).unwrap_err();
        assert_eq!(err, EvalError::MissingTruth(vec!["x9".into()]));
    }
}
