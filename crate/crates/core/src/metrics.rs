//! Evaluation metrics: RMSE, per-class precision/recall/F-beta, macro and
//! micro F-beta, and the JSON evaluation report.
//!
//! Recall is `TP / (TP + FN)`. Any ratio with a zero denominator is 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The beta used throughout evaluation; precision weighs more than recall.
pub const BETA: f64 = 0.5;

/// Root mean squared error between two equal-length sequences.
pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            expected: actual.len(),
            got: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::InsufficientData("rmse of an empty sequence".into()));
    }
    let sse: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sse / predicted.len() as f64).sqrt())
}

/// Counts indexed by `(true class, predicted class)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_pairs(n_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                got: predicted.len(),
            });
        }
        let mut cm = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.n || predicted >= self.n {
            return Err(Error::Validation(format!(
                "class index out of range for {} classes",
                self.n
            )));
        }
        self.counts[truth * self.n + predicted] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Instances whose true class is `class`.
    pub fn support(&self, class: usize) -> u64 {
        (0..self.n).map(|p| self.get(class, p)).sum()
    }

    /// Instances predicted as `class`.
    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.n).map(|t| self.get(t, class)).sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        self.predicted(class) - self.get(class, class)
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        self.support(class) - self.get(class, class)
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|c| self.get(c, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F-beta from precision and recall; 0 when both are 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    if precision == recall {
        // weighted harmonic mean of two equal values
        return precision;
    }
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter("beta must be positive".into()));
    }
    Ok(())
}

pub fn precision_recall_f(cm: &ConfusionMatrix, class: usize, beta: f64) -> Result<Prf> {
    check_beta(beta)?;
    if class >= cm.n_classes() {
        return Err(Error::Validation(format!("no class {class}")));
    }
    let tp = cm.true_positives(class);
    let precision = ratio(tp, tp + cm.false_positives(class));
    let recall = ratio(tp, tp + cm.false_negatives(class));
    Ok(Prf {
        precision,
        recall,
        f_beta: f_beta(precision, recall, beta),
    })
}

/// Unweighted mean of per-class F-beta over every class.
pub fn macro_f(cm: &ConfusionMatrix, beta: f64) -> Result<f64> {
    macro_f_over(cm, &(0..cm.n_classes()).collect::<Vec<_>>(), beta)
}

/// Unweighted mean of per-class F-beta over `classes`; 0 for an empty set.
pub fn macro_f_over(cm: &ConfusionMatrix, classes: &[usize], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &c in classes {
        sum += precision_recall_f(cm, c, beta)?.f_beta;
    }
    Ok(sum / classes.len() as f64)
}

/// F-beta of precision and recall pooled over all classes.
pub fn micro_f(cm: &ConfusionMatrix, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for c in 0..cm.n_classes() {
        tp += cm.true_positives(c);
        fp += cm.false_positives(c);
        fn_ += cm.false_negatives(c);
    }
    Ok(f_beta(ratio(tp, tp + fp), ratio(tp, tp + fn_), beta))
}

/// Scores for one class. Precision, recall and F-beta are absent when the
/// class has no true instances in the evaluated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub support: u64,
    pub predicted: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_beta: Option<f64>,
}

fn class_score(cm: &ConfusionMatrix, class: usize, name: &str, beta: f64) -> Result<ClassScore> {
    let support = cm.support(class);
    let prf = precision_recall_f(cm, class, beta)?;
    let present = support > 0;
    Ok(ClassScore {
        class: name.to_string(),
        support,
        predicted: cm.predicted(class),
        precision: present.then_some(prf.precision),
        recall: present.then_some(prf.recall),
        f_beta: present.then_some(prf.f_beta),
    })
}

/// Forecast RMSE of one target for the model and each baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRmse {
    pub target: String,
    pub model: f64,
    pub baselines: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityScores {
    /// normal, low, medium, high
    pub classes: Vec<ClassScore>,
    /// Mean F-beta over classes present in the data.
    pub macro_f: f64,
    pub micro_f: f64,
    /// Classes left out of the macro mean because they have no instances.
    pub absent: Vec<String>,
}

/// Evaluation summary. Field order is the JSON order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub beta: f64,
    pub instances: u64,
    /// Normal instances per anomalous instance; absent without anomalies.
    pub imbalance_ratio: Option<f64>,
    pub forecast_rmse: Vec<TargetRmse>,
    /// Scores of the anomaly class in the binary existence task.
    pub anomaly: ClassScore,
    pub severity: SeverityScores,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))
    }
}

pub const SEVERITY_CLASS_NAMES: [&str; 4] = ["normal", "low", "medium", "high"];

/// Builds the report from forecast errors, the 2-class existence matrix and
/// the 4-class severity matrix, scoring at `beta`.
pub fn assemble_report(
    forecast_rmse: Vec<TargetRmse>,
    binary: &ConfusionMatrix,
    severity: &ConfusionMatrix,
    beta: f64,
) -> Result<EvaluationReport> {
    check_beta(beta)?;
    if binary.n_classes() != 2 || severity.n_classes() != 4 {
        return Err(Error::Validation(format!(
            "expected 2-class and 4-class matrices, got {} and {}",
            binary.n_classes(),
            severity.n_classes()
        )));
    }
    if binary.total() != severity.total() {
        return Err(Error::Validation(
            "binary and severity matrices cover different instances".into(),
        ));
    }
    let classes = (0..4)
        .map(|c| class_score(severity, c, SEVERITY_CLASS_NAMES[c], beta))
        .collect::<Result<Vec<_>>>()?;
    let present: Vec<usize> = (0..4).filter(|&c| severity.support(c) > 0).collect();
    let absent = (0..4)
        .filter(|c| !present.contains(c))
        .map(|c| SEVERITY_CLASS_NAMES[c].to_string())
        .collect();
    let anomalies = binary.support(1);
    Ok(EvaluationReport {
        beta,
        instances: binary.total(),
        imbalance_ratio: (anomalies > 0).then(|| binary.support(0) as f64 / anomalies as f64),
        forecast_rmse,
        anomaly: class_score(binary, 1, "anomaly", beta)?,
        severity: SeverityScores {
            classes,
            macro_f: macro_f_over(severity, &present, beta)?,
            micro_f: micro_f(severity, beta)?,
            absent,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&[1.0], &[4.0]).unwrap(), 3.0);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn f_beta_example() {
        let f = f_beta(0.8, 0.5, 0.5);
        assert!((f - 0.5 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_tp_scores_zero() {
        let cm = ConfusionMatrix::from_pairs(2, &[1, 0], &[0, 1]).unwrap();
        let prf = precision_recall_f(&cm, 1, 0.5).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f_beta), (0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_and_all_wrong() {
        let cm = ConfusionMatrix::from_pairs(3, &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(micro_f(&cm, 0.5).unwrap(), 1.0);
        assert_eq!(macro_f(&cm, 0.5).unwrap(), 1.0);
        let cm = ConfusionMatrix::from_pairs(3, &[0, 1, 2], &[1, 2, 0]).unwrap();
        assert_eq!(micro_f(&cm, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn single_class_macro_is_that_class() {
        let cm = ConfusionMatrix::from_pairs(1, &[0, 0], &[0, 0]).unwrap();
        assert_eq!(macro_f(&cm, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn all_normal_report_marks_anomaly_classes_absent() {
        let sev = ConfusionMatrix::from_pairs(4, &[0; 5], &[0; 5]).unwrap();
        let bin = ConfusionMatrix::from_pairs(2, &[0; 5], &[0; 5]).unwrap();
        let r = assemble_report(Vec::new(), &bin, &sev, BETA).unwrap();
        assert_eq!(r.severity.classes[0].f_beta, Some(1.0));
        assert_eq!(r.severity.absent, vec!["low", "medium", "high"]);
        assert_eq!(r.severity.macro_f, 1.0);
        assert_eq!(r.imbalance_ratio, None);
        let json = r.to_json().unwrap();
        assert!(json.find("\"beta\"").unwrap() < json.find("\"severity\"").unwrap());
        assert!(json.contains("\"f_beta\": null"));
    }

    #[test]
    fn mismatched_matrices_are_rejected() {
        let sev = ConfusionMatrix::new(3);
        let bin = ConfusionMatrix::new(2);
        assert!(assemble_report(Vec::new(), &bin, &sev, BETA).is_err());
    }

    fn pairs() -> impl Strategy<Value = Vec<(usize, usize)>> {
        prop::collection::vec((0usize..4, 0usize..4), 1..200)
    }

    proptest! {
        #[test]
        fn row_and_column_totals(p in pairs()) {
            let (t, q): (Vec<_>, Vec<_>) = p.into_iter().unzip();
            let cm = ConfusionMatrix::from_pairs(4, &t, &q).unwrap();
            for c in 0..4 {
                prop_assert_eq!(cm.true_positives(c) + cm.false_negatives(c), t.iter().filter(|&&v| v == c).count() as u64);
                prop_assert_eq!(cm.true_positives(c) + cm.false_positives(c), q.iter().filter(|&&v| v == c).count() as u64);
            }
        }

        #[test]
        fn micro_is_accuracy(p in pairs(), beta in 0.1f64..4.0) {
            let (t, q): (Vec<_>, Vec<_>) = p.into_iter().unzip();
            let cm = ConfusionMatrix::from_pairs(4, &t, &q).unwrap();
            let acc = t.iter().zip(&q).filter(|(a, b)| a == b).count() as f64 / t.len() as f64;
            prop_assert_eq!(micro_f(&cm, beta).unwrap(), acc);
        }

        #[test]
        fn f_between_precision_and_recall(p in pairs(), c in 0usize..4) {
            let (t, q): (Vec<_>, Vec<_>) = p.into_iter().unzip();
            let cm = ConfusionMatrix::from_pairs(4, &t, &q).unwrap();
            let s = precision_recall_f(&cm, c, BETA).unwrap();
            if s.precision > 0.0 && s.recall > 0.0 {
                let (lo, hi) = (s.precision.min(s.recall), s.precision.max(s.recall));
                prop_assert!(s.f_beta >= lo - 1e-15 && s.f_beta <= hi + 1e-15);
            }
        }
    }
}
