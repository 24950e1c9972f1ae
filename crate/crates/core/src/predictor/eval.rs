//! Recall/AUC evaluation with student-level fold splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{predict, train, Example, FeatureSettings, HelpNeedModel, TrainParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Protocol {
    KFold { k: usize },
    Holdout { test_fraction: f64 },
}

impl Protocol {
    pub fn cv3() -> Self {
        Protocol::KFold { k: 3 }
    }

    pub fn holdout() -> Self {
        Protocol::Holdout { test_fraction: 0.3 }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::KFold { k } => write!(f, "cv{k}"),
            Protocol::Holdout { .. } => f.write_str("holdout"),
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cv3" => Ok(Protocol::cv3()),
            "holdout" => Ok(Protocol::holdout()),
            other => match other.strip_prefix("cv").and_then(|k| k.parse().ok()) {
                Some(k) if k >= 2 => Ok(Protocol::KFold { k }),
                _ => Err(format!("unknown protocol `{other}` (expected cv3|holdout)")),
            },
        }
    }
}

/// Which classifier a row describes; `Dispatch` routes each example the
/// way live prediction does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowClassifier {
    StateBased,
    StateFree,
    Dispatch,
}

impl fmt::Display for RowClassifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RowClassifier::StateBased => "state_based",
            RowClassifier::StateFree => "state_free",
            RowClassifier::Dispatch => "dispatch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub protocol: String,
    /// Fold number, or `None` for the mean row.
    pub fold: Option<usize>,
    pub classifier: RowClassifier,
    pub n: usize,
    pub positives: usize,
    pub recall: f64,
    pub auc: f64,
    pub fn_rate: f64,
    pub fp_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<String>,
}

impl EvalReport {
    pub fn mean(&self, classifier: RowClassifier) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.fold.is_none() && r.classifier == classifier)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>5} {:<12} {:>6} {:>5} {:>7} {:>7} {:>8} {:>8}\n",
            "protocol", "fold", "classifier", "n", "pos", "recall", "auc", "fn_rate", "fp_rate"
        );
        for r in &self.rows {
            let fold = r.fold.map_or("mean".to_string(), |f| f.to_string());
            out.push_str(&format!(
                "{:<10} {:>5} {:<12} {:>6} {:>5} {:>7.3} {:>7.3} {:>8.3} {:>8.3}\n",
                r.protocol,
                fold,
                r.classifier.to_string(),
                r.n,
                r.positives,
                r.recall,
                r.auc,
                r.fn_rate,
                r.fp_rate
            ));
        }
        for s in &self.skipped {
            out.push_str(&format!("skipped: {s}\n"));
        }
        out
    }
}

/// TP / (TP + FN) at `threshold`; `None` without positives.
pub fn recall(scores: &[f64], labels: &[bool], threshold: f64) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= threshold).count();
    Some(tp as f64 / positives as f64)
}

/// Area under the ROC curve by the rank statistic, ties sharing the mean
/// rank. `None` unless both classes occur.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    Some((rank_sum - (n1 * (n1 + 1)) as f64 / 2.0) / (n1 * n0) as f64)
}

/// Mean over students of the fraction of their steps that are false
/// negatives, and likewise false positives.
pub fn per_student_rates(students: &[&str], predicted: &[bool], labels: &[bool]) -> (f64, f64) {
    let mut per: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for ((s, p), l) in students.iter().zip(predicted).zip(labels) {
        let e = per.entry(s).or_default();
        e.0 += 1;
        e.1 += usize::from(!p && *l);
        e.2 += usize::from(*p && !l);
    }
    if per.is_empty() {
        return (0.0, 0.0);
    }
    let n = per.len() as f64;
    let fn_rate = per.values().map(|(t, f, _)| *f as f64 / *t as f64).sum::<f64>() / n;
    let fp_rate = per.values().map(|(t, _, f)| *f as f64 / *t as f64).sum::<f64>() / n;
    (fn_rate, fp_rate)
}

/// Scores `examples` with a trained model, one row per classifier.
pub fn evaluate_model(model: &HelpNeedModel, examples: &[Example], protocol: &str, fold: Option<usize>) -> (Vec<EvalRow>, Vec<String>) {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for classifier in [RowClassifier::StateBased, RowClassifier::StateFree, RowClassifier::Dispatch] {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut students = Vec::new();
        for e in examples {
            let score = match classifier {
                RowClassifier::StateBased => match e.features.state_based_row() {
                    Some(row) => model.state_based.score(&row),
                    None => continue,
                },
                RowClassifier::StateFree => model.state_free.score(&e.features.state_free_row()),
                RowClassifier::Dispatch => predict(model, &e.features).expect("schema checked at load").score,
            };
            scores.push(score);
            labels.push(e.label);
            students.push(e.student.as_str());
        }
        let fold_name = fold.map_or("all".to_string(), |f| format!("fold {f}"));
        let (Some(r), Some(a)) = (recall(&scores, &labels, model.threshold), auc(&scores, &labels)) else {
            skipped.push(format!("{protocol} {fold_name} {classifier}: test split has a single class"));
            continue;
        };
        let predicted: Vec<bool> = scores.iter().map(|&s| s >= model.threshold).collect();
        let (fn_rate, fp_rate) = per_student_rates(&students, &predicted, &labels);
        rows.push(EvalRow {
            protocol: protocol.to_string(),
            fold,
            classifier,
            n: scores.len(),
            positives: labels.iter().filter(|&&l| l).count(),
            recall: r,
            auc: a,
            fn_rate,
            fp_rate,
        });
    }
    (rows, skipped)
}

/// Splits students (never steps) into folds, trains on the rest, and
/// reports per-fold rows plus a mean row per classifier.
pub fn evaluate(examples: &[Example], params: &TrainParams, settings: &FeatureSettings, protocol: Protocol, seed: u64) -> EvalReport {
    let mut students: Vec<&str> = examples
        .iter()
        .map(|e| e.student.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    students.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds: Vec<BTreeSet<&str>> = match protocol {
        Protocol::KFold { k } => (0..k)
            .map(|f| students.iter().enumerate().filter(|(i, _)| i % k == f).map(|(_, s)| *s).collect())
            .collect(),
        Protocol::Holdout { test_fraction } => {
            let n_test = ((students.len() as f64 * test_fraction).round() as usize).clamp(1, students.len().saturating_sub(1).max(1));
            vec![students[..n_test].iter().copied().collect()]
        }
    };
    let name = protocol.to_string();
    let mut report = EvalReport::default();
    for (f, test_students) in folds.iter().enumerate() {
        let (test, train_set): (Vec<Example>, Vec<Example>) =
            examples.iter().cloned().partition(|e| test_students.contains(e.student.as_str()));
        let model = match train(&train_set, params, settings.clone()) {
            Ok(m) => m,
            Err(e) => {
                report.skipped.push(format!("{name} fold {f}: {e}"));
                continue;
            }
        };
        let (rows, skipped) = evaluate_model(&model, &test, &name, Some(f));
        report.rows.extend(rows);
        report.skipped.extend(skipped);
    }
    for classifier in [RowClassifier::StateBased, RowClassifier::StateFree, RowClassifier::Dispatch] {
        let rows: Vec<&EvalRow> = report.rows.iter().filter(|r| r.classifier == classifier).collect();
        if rows.is_empty() {
            continue;
        }
        let m = rows.len() as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / m;
        report.rows.push(EvalRow {
            protocol: name.clone(),
            fold: None,
            classifier,
            n: rows.iter().map(|r| r.n).sum(),
            positives: rows.iter().map(|r| r.positives).sum(),
            recall: mean(|r| r.recall),
            auc: mean(|r| r.auc),
            fn_rate: mean(|r| r.fn_rate),
            fp_rate: mean(|r| r.fp_rate),
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{planted_cohort, ForestParams};
    use proptest::prelude::*;

    #[test]
    fn perfect_and_tied_scores() {
        let labels = [true, true, false, false];
        assert_eq!(auc(&[0.9, 0.8, 0.4, 0.3], &labels), Some(1.0));
        assert_eq!(recall(&[0.9, 0.8, 0.4, 0.3], &labels, 0.5), Some(1.0));
        assert_eq!(auc(&[0.5; 4], &labels), Some(0.5));
        assert_eq!(auc(&[0.5; 2], &[true, true]), None);
    }

    /// Pairwise definition of AUC.
    fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    proptest! {
        #[test]
        fn metrics_match_oracles(data in proptest::collection::vec((0u8..10, any::<bool>()), 2..60), t in 0u8..10) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 10.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            let thr = t as f64 / 10.0;
            if let Some(a) = auc(&scores, &labels) {
                prop_assert!((a - auc_oracle(&scores, &labels)).abs() < 1e-12);
            }
            let tp = scores.iter().zip(&labels).filter(|(s, l)| **l && **s >= thr).count();
            let fnn = scores.iter().zip(&labels).filter(|(s, l)| **l && **s < thr).count();
            if tp + fnn > 0 {
                prop_assert_eq!(recall(&scores, &labels, thr), Some(tp as f64 / (tp + fnn) as f64));
                let lower = recall(&scores, &labels, thr - 0.1).unwrap();
                prop_assert!(lower >= recall(&scores, &labels, thr).unwrap());
            }
        }
    }

    #[test]
    fn folds_split_by_student() {
        let data = planted_cohort(4, 12, 10);
        let settings = FeatureSettings {
            key_mode: crate::logic::KeyMode::Unordered,
            penalty: true,
            combo: Default::default(),
            thresholds: Default::default(),
        };
        let params = TrainParams {
            forest: ForestParams {
                n_trees: 15,
                ..Default::default()
            },
            threshold: 0.5,
        };
        let report = evaluate(&data, &params, &settings, Protocol::cv3(), 1);
        let fold_rows = report.rows.iter().filter(|r| r.fold.is_some() && r.classifier == RowClassifier::StateFree).count();
        assert_eq!(fold_rows, 3);
        assert!(report.mean(RowClassifier::StateFree).is_some());
        // every fold's test students total the whole cohort
        let total: usize = report
            .rows
            .iter()
            .filter(|r| r.fold.is_some() && r.classifier == RowClassifier::StateFree)
            .map(|r| r.n)
            .sum();
        assert_eq!(total, data.len());
        let holdout = evaluate(&data, &params, &settings, Protocol::holdout(), 1);
        assert!(holdout.mean(RowClassifier::Dispatch).is_some());
    }

    #[test]
    fn per_student_fn_rate() {
        let students = ["a", "a", "b", "b"];
        let (fnr, fpr) = per_student_rates(&students, &[false, true, false, false], &[true, true, false, true]);
        assert!((fnr - 0.5).abs() < 1e-12);
        assert_eq!(fpr, 0.0);
    }
}
