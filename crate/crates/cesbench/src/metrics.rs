//! Classification metrics: confusion matrix, macro precision/recall,
//! accuracy, and per-class accuracy, with report rendering to JSON,
//! markdown, and CSV.
//!
//! Macro (unweighted) averaging is used throughout: on a class-balanced
//! test set it makes macro recall equal overall accuracy exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CesClass;

/// A model's verdict for one item. `Unresolved` marks output that could not
/// be mapped to any class; it scores as a misclassification, never a hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Class(CesClass),
    Unresolved,
}

impl From<CesClass> for Prediction {
    fn from(c: CesClass) -> Self {
        Prediction::Class(c)
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction and truth item sets differ: {0}")]
    ItemMismatch(String),
    #[error("class {0} absent from truth")]
    EmptyClass(CesClass),
    #[error("no reports given")]
    EmptyInput,
}

/// Row = truth, column = prediction, both in taxonomy order. The extra
/// `unresolved` column appears only when some prediction was unresolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<CesClass>,
    pub counts: Vec<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unresolved: Option<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        let grid: u64 = self.counts.iter().flatten().sum();
        let extra: u64 = self.unresolved.iter().flatten().sum();
        grid + extra
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn serialize_pct<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round2(*v))
}

/// Metrics over one evaluation, percentages in [0, 100].
///
/// Values are stored at full precision; JSON serialization rounds to two
/// decimals to match report formatting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "serialize_pct")]
    pub macro_precision: f64,
    #[serde(serialize_with = "serialize_pct")]
    pub macro_recall: f64,
    #[serde(serialize_with = "serialize_pct")]
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub item_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Metric core over class indices; `None` marks an unresolved prediction.
/// Supports any class count, not just the six-value taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedMetrics {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub accuracy: f64,
    pub counts: Vec<Vec<u64>>,
    pub unresolved: Vec<u64>,
    pub any_zero_precision: bool,
    pub any_unresolved: bool,
}

/// Position-aligned metric computation: `preds[i]` answers `truth[i]`.
pub fn compute_indexed(
    preds: &[Option<usize>],
    truth: &[usize],
    n_classes: usize,
) -> Result<IndexedMetrics, MetricsError> {
    if preds.len() != truth.len() {
        return Err(MetricsError::ItemMismatch(format!(
            "{} predictions vs {} truth items",
            preds.len(),
            truth.len()
        )));
    }
    if n_classes == 0 {
        return Err(MetricsError::ItemMismatch("no classes".to_string()));
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    let mut unresolved = vec![0u64; n_classes];
    let mut any_unresolved = false;
    for (pred, label) in preds.iter().zip(truth) {
        if *label >= n_classes {
            return Err(MetricsError::ItemMismatch(format!(
                "truth label {label} out of range"
            )));
        }
        match pred {
            Some(c) if *c < n_classes => counts[*label][*c] += 1,
            Some(c) => {
                return Err(MetricsError::ItemMismatch(format!(
                    "prediction {c} out of range"
                )))
            }
            None => {
                unresolved[*label] += 1;
                any_unresolved = true;
            }
        }
    }

    let total: u64 = preds.len() as u64;
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut any_zero_precision = false;
    for j in 0..n_classes {
        let tp = counts[j][j];
        let predicted: u64 = (0..n_classes).map(|i| counts[i][j]).sum();
        let actual: u64 = counts[j].iter().sum::<u64>() + unresolved[j];
        if predicted == 0 {
            // Never-predicted class contributes zero precision, flagged.
            any_zero_precision = true;
        } else {
            precision_sum += tp as f64 / predicted as f64;
        }
        if actual > 0 {
            recall_sum += tp as f64 / actual as f64;
        }
    }
    let trace: u64 = (0..n_classes).map(|i| counts[i][i]).sum();
    Ok(IndexedMetrics {
        macro_precision: 100.0 * precision_sum / n_classes as f64,
        macro_recall: 100.0 * recall_sum / n_classes as f64,
        accuracy: if total == 0 {
            0.0
        } else {
            100.0 * trace as f64 / total as f64
        },
        counts,
        unresolved,
        any_zero_precision,
        any_unresolved,
    })
}

/// Build a [`MetricsReport`] from predictions and ground truth keyed by
/// item id. Item order is irrelevant; the id sets must match exactly.
pub fn compute(
    preds: &[(String, Prediction)],
    truth: &[(String, CesClass)],
    classes: &[CesClass],
) -> Result<MetricsReport, MetricsError> {
    if preds.len() != truth.len() {
        return Err(MetricsError::ItemMismatch(format!(
            "{} predictions vs {} truth items",
            preds.len(),
            truth.len()
        )));
    }
    let mut truth_map: BTreeMap<&str, CesClass> = BTreeMap::new();
    for (id, label) in truth {
        if truth_map.insert(id.as_str(), *label).is_some() {
            return Err(MetricsError::ItemMismatch(format!("duplicate truth id `{id}`")));
        }
    }
    let class_index: BTreeMap<CesClass, usize> =
        classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut indexed_preds = Vec::with_capacity(preds.len());
    let mut indexed_truth = Vec::with_capacity(preds.len());
    let mut seen = 0usize;
    for (id, pred) in preds {
        let label = truth_map.get(id.as_str()).ok_or_else(|| {
            MetricsError::ItemMismatch(format!("prediction for unknown id `{id}`"))
        })?;
        indexed_truth.push(
            *class_index
                .get(label)
                .ok_or(MetricsError::EmptyClass(*label))?,
        );
        indexed_preds.push(match pred {
            Prediction::Class(c) => {
                Some(*class_index.get(c).ok_or(MetricsError::EmptyClass(*c))?)
            }
            Prediction::Unresolved => None,
        });
        seen += 1;
    }
    if seen != truth_map.len() {
        return Err(MetricsError::ItemMismatch(
            "duplicate prediction ids".to_string(),
        ));
    }

    let core = compute_indexed(&indexed_preds, &indexed_truth, classes.len())?;
    let mut flags = Vec::new();
    if core.any_zero_precision {
        flags.push("zero_precision_for_unpredicted_class".to_string());
    }
    if core.any_unresolved {
        flags.push("unresolved_predictions_scored_as_errors".to_string());
    }
    Ok(MetricsReport {
        macro_precision: core.macro_precision,
        macro_recall: core.macro_recall,
        accuracy: core.accuracy,
        confusion: ConfusionMatrix {
            classes: classes.to_vec(),
            counts: core.counts,
            unresolved: core.any_unresolved.then_some(core.unresolved),
        },
        item_count: preds.len(),
        flags,
    })
}

/// Per-class accuracy (the row-normalized diagonal, i.e. per-class recall),
/// in percent. Errors if any class has no truth rows.
pub fn per_class_accuracy(report: &MetricsReport) -> Result<BTreeMap<CesClass, f64>, MetricsError> {
    let matrix = &report.confusion;
    let mut out = BTreeMap::new();
    for (i, class) in matrix.classes.iter().enumerate() {
        let mut row_total: u64 = matrix.counts[i].iter().sum();
        if let Some(unresolved) = &matrix.unresolved {
            row_total += unresolved[i];
        }
        if row_total == 0 {
            return Err(MetricsError::EmptyClass(*class));
        }
        out.insert(*class, 100.0 * matrix.counts[i][i] as f64 / row_total as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    MarkdownTable,
    Csv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabeledReport {
    label: String,
    report: MetricsReport,
}

/// Render one or more labeled reports. Markdown and CSV print fixed
/// two-decimal percentages in input order.
pub fn render_report(
    reports: &[(String, MetricsReport)],
    format: ReportFormat,
) -> Result<String, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    match format {
        ReportFormat::Json => {
            let rows: Vec<LabeledReport> = reports
                .iter()
                .map(|(label, report)| LabeledReport {
                    label: label.clone(),
                    report: report.clone(),
                })
                .collect();
            Ok(serde_json::to_string_pretty(&rows).expect("reports serialize"))
        }
        ReportFormat::MarkdownTable => {
            let mut out = String::new();
            out.push_str("| Method | Precision | Recall | Accuracy |\n");
            out.push_str("| --- | ---: | ---: | ---: |\n");
            for (label, report) in reports {
                out.push_str(&format!(
                    "| {} | {:.2} | {:.2} | {:.2} |\n",
                    label, report.macro_precision, report.macro_recall, report.accuracy
                ));
            }
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut out = String::from("method,precision,recall,accuracy,items\n");
            for (label, report) in reports {
                out.push_str(&format!(
                    "{},{:.2},{:.2},{:.2},{}\n",
                    label,
                    report.macro_precision,
                    report.macro_recall,
                    report.accuracy,
                    report.item_count
                ));
            }
            Ok(out)
        }
    }
}

/// Parse the JSON produced by [`render_report`] back into labeled reports.
pub fn ingest_report_json(text: &str) -> Result<Vec<(String, MetricsReport)>, MetricsError> {
    let rows: Vec<LabeledReport> =
        serde_json::from_str(text).map_err(|e| MetricsError::ItemMismatch(e.to_string()))?;
    Ok(rows.into_iter().map(|r| (r.label, r.report)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn items(labels: &[(u32, CesClass)]) -> Vec<(String, CesClass)> {
        labels
            .iter()
            .map(|(i, c)| (format!("item{i}"), *c))
            .collect()
    }

    #[test]
    fn perfect_predictions_score_100() {
        let truth = items(&[
            (0, CesClass::Sports),
            (1, CesClass::Gastronomy),
            (2, CesClass::FaunaFlora),
        ]);
        let preds: Vec<(String, Prediction)> = truth
            .iter()
            .map(|(id, c)| (id.clone(), Prediction::Class(*c)))
            .collect();
        let classes = [CesClass::FaunaFlora, CesClass::Gastronomy, CesClass::Sports];
        let report = compute(&preds, &truth, &classes).unwrap();
        assert_eq!(report.accuracy, 100.0);
        assert_eq!(report.macro_recall, 100.0);
        assert_eq!(report.macro_precision, 100.0);
        assert_eq!(report.confusion.trace(), 3);
    }

    #[test]
    fn constant_predictor_on_balanced_six_class_data() {
        let mut truth = Vec::new();
        for class in CesClass::ALL {
            for i in 0..10 {
                truth.push((format!("{}{}", class.canonical_name(), i), class));
            }
        }
        let preds: Vec<(String, Prediction)> = truth
            .iter()
            .map(|(id, _)| (id.clone(), Prediction::Class(CesClass::Sports)))
            .collect();
        let report = compute(&preds, &truth, &CesClass::ALL).unwrap();
        // Hand-computed: one class fully right, five at zero.
        assert!((report.accuracy - 100.0 / 6.0).abs() < 1e-9);
        assert!((report.macro_recall - 100.0 / 6.0).abs() < 1e-9);
        // Precision: Sports = 10/60, others never predicted (contribute 0).
        assert!((report.macro_precision - 100.0 / 36.0).abs() < 1e-9);
        assert_eq!(format!("{:.2}", report.macro_precision), "2.78");
        assert!(report
            .flags
            .contains(&"zero_precision_for_unpredicted_class".to_string()));
    }

    #[test]
    fn zero_recall_class_depresses_macro_metrics() {
        // A predictor that never gets CulturalReligious right can still have
        // high accuracy; its macro precision drops below accuracy, the
        // pattern of a hybrid pipeline with one dead class.
        let mut truth = Vec::new();
        let mut preds = Vec::new();
        for class in CesClass::ALL {
            for i in 0..10 {
                let id = format!("{}{}", class.canonical_name(), i);
                truth.push((id.clone(), class));
                let predicted = if class == CesClass::CulturalReligious {
                    CesClass::UrbanRural
                } else {
                    class
                };
                preds.push((id, Prediction::Class(predicted)));
            }
        }
        let report = compute(&preds, &truth, &CesClass::ALL).unwrap();
        assert!(report.macro_precision < report.accuracy);
        let per_class = per_class_accuracy(&report).unwrap();
        assert_eq!(per_class[&CesClass::CulturalReligious], 0.0);
    }

    #[test]
    fn unresolved_counts_against_accuracy_not_precision() {
        let truth = items(&[(0, CesClass::Sports), (1, CesClass::Sports)]);
        let preds = vec![
            ("item0".to_string(), Prediction::Class(CesClass::Sports)),
            ("item1".to_string(), Prediction::Unresolved),
        ];
        let classes = [CesClass::Sports, CesClass::Gastronomy];
        let report = compute(&preds, &truth, &classes).unwrap();
        assert_eq!(report.accuracy, 50.0);
        // Sports precision is 1/1: the unresolved item was not predicted Sports.
        assert!((report.macro_recall - 25.0).abs() < 1e-9);
        assert_eq!(report.confusion.unresolved, Some(vec![1, 0]));
        assert_eq!(report.confusion.total(), 2);
    }

    #[test]
    fn per_class_accuracy_from_synthetic_matrix() {
        let truth = items(&[
            (0, CesClass::Sports),
            (1, CesClass::Sports),
            (2, CesClass::Sports),
            (3, CesClass::Sports),
            (4, CesClass::Gastronomy),
            (5, CesClass::Gastronomy),
            (6, CesClass::Gastronomy),
            (7, CesClass::Gastronomy),
        ]);
        // Confusion [[3,1],[0,4]] over (Sports, Gastronomy).
        let preds = vec![
            ("item0".to_string(), Prediction::Class(CesClass::Sports)),
            ("item1".to_string(), Prediction::Class(CesClass::Sports)),
            ("item2".to_string(), Prediction::Class(CesClass::Sports)),
            ("item3".to_string(), Prediction::Class(CesClass::Gastronomy)),
            ("item4".to_string(), Prediction::Class(CesClass::Gastronomy)),
            ("item5".to_string(), Prediction::Class(CesClass::Gastronomy)),
            ("item6".to_string(), Prediction::Class(CesClass::Gastronomy)),
            ("item7".to_string(), Prediction::Class(CesClass::Gastronomy)),
        ];
        let classes = [CesClass::Sports, CesClass::Gastronomy];
        let report = compute(&preds, &truth, &classes).unwrap();
        let per_class = per_class_accuracy(&report).unwrap();
        assert_eq!(per_class[&CesClass::Sports], 75.0);
        assert_eq!(per_class[&CesClass::Gastronomy], 100.0);
    }

    #[test]
    fn per_class_accuracy_rejects_absent_class() {
        let truth = items(&[(0, CesClass::Sports)]);
        let preds = vec![("item0".to_string(), Prediction::Class(CesClass::Sports))];
        let classes = [CesClass::Sports, CesClass::Gastronomy];
        let report = compute(&preds, &truth, &classes).unwrap();
        assert!(matches!(
            per_class_accuracy(&report),
            Err(MetricsError::EmptyClass(CesClass::Gastronomy))
        ));
    }

    #[test]
    fn item_mismatch_detected() {
        let truth = items(&[(0, CesClass::Sports)]);
        let preds = vec![("other".to_string(), Prediction::Class(CesClass::Sports))];
        assert!(matches!(
            compute(&preds, &truth, &CesClass::ALL),
            Err(MetricsError::ItemMismatch(_))
        ));
    }

    #[test]
    fn markdown_renders_fixed_decimals_in_order() {
        let truth = items(&[(0, CesClass::Sports)]);
        let preds = vec![("item0".to_string(), Prediction::Class(CesClass::Sports))];
        let classes = [CesClass::Sports];
        let report = compute(&preds, &truth, &classes).unwrap();
        let text = render_report(
            &[
                ("first".to_string(), report.clone()),
                ("second".to_string(), report),
            ],
            ReportFormat::MarkdownTable,
        )
        .unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("| first | 100.00 | 100.00 | 100.00 |"));
        assert!(lines[3].starts_with("| second |"));
    }

    #[test]
    fn json_report_round_trips_through_its_own_schema() {
        let truth = items(&[(0, CesClass::Sports), (1, CesClass::Gastronomy)]);
        let preds = vec![
            ("item0".to_string(), Prediction::Class(CesClass::Sports)),
            ("item1".to_string(), Prediction::Unresolved),
        ];
        let classes = [CesClass::Sports, CesClass::Gastronomy];
        let report = compute(&preds, &truth, &classes).unwrap();
        let text = render_report(&[("run".to_string(), report)], ReportFormat::Json).unwrap();
        let parsed = ingest_report_json(&text).unwrap();
        let again = render_report(&parsed, ReportFormat::Json).unwrap();
        assert_eq!(text, again);
    }

    /// Independent per-class counting oracle used by unit and acceptance tests.
    pub(crate) fn brute_force_metrics(
        preds: &[(String, Prediction)],
        truth: &[(String, CesClass)],
        classes: &[CesClass],
    ) -> (f64, f64, f64) {
        let truth_map: BTreeMap<&str, CesClass> =
            truth.iter().map(|(id, c)| (id.as_str(), *c)).collect();
        let mut precision_sum = 0.0;
        let mut recall_sum = 0.0;
        let mut correct = 0u64;
        for class in classes {
            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut actual = 0u64;
            for (id, pred) in preds {
                let label = truth_map[id.as_str()];
                if label == *class {
                    actual += 1;
                }
                if let Prediction::Class(c) = pred {
                    if c == class {
                        if label == *class {
                            tp += 1;
                        } else {
                            fp += 1;
                        }
                    }
                }
            }
            if tp + fp > 0 {
                precision_sum += tp as f64 / (tp + fp) as f64;
            }
            if actual > 0 {
                recall_sum += tp as f64 / actual as f64;
            }
        }
        for (id, pred) in preds {
            if let Prediction::Class(c) = pred {
                if truth_map[id.as_str()] == *c {
                    correct += 1;
                }
            }
        }
        (
            100.0 * precision_sum / classes.len() as f64,
            100.0 * recall_sum / classes.len() as f64,
            100.0 * correct as f64 / preds.len() as f64,
        )
    }

    #[test]
    fn compute_matches_brute_force_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..50 {
            let n_classes = rng.gen_range(2..=10);
            let classes: Vec<CesClass> = CesClass::ALL
                .iter()
                .cycle()
                .take(n_classes.min(6))
                .cloned()
                .collect();
            let n_items = rng.gen_range(1..=1000);
            let mut truth = Vec::new();
            let mut preds = Vec::new();
            for i in 0..n_items {
                let label = classes[rng.gen_range(0..classes.len())];
                let id = format!("t{trial}_i{i}");
                truth.push((id.clone(), label));
                let pred = if rng.gen_bool(0.1) {
                    Prediction::Unresolved
                } else {
                    Prediction::Class(classes[rng.gen_range(0..classes.len())])
                };
                preds.push((id, pred));
            }
            let report = compute(&preds, &truth, &classes).unwrap();
            let (precision, recall, accuracy) = brute_force_metrics(&preds, &truth, &classes);
            assert_eq!(report.macro_recall, recall);
            assert_eq!(report.accuracy, accuracy);
            // Never-predicted classes: compute flags them and adds zero, the
            // oracle skips them; both end at the same sum.
            assert_eq!(report.macro_precision, precision);
        }
    }

    proptest! {
        #[test]
        fn balanced_truth_makes_recall_equal_accuracy(
            seed in 0u64..5000,
            per_class in 1usize..40,
            n_classes in 2usize..=6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let classes: Vec<CesClass> = CesClass::ALL[..n_classes].to_vec();
            let mut truth = Vec::new();
            let mut preds = Vec::new();
            for class in &classes {
                for i in 0..per_class {
                    let id = format!("{}-{}", class.canonical_name(), i);
                    truth.push((id.clone(), *class));
                    let pred = classes[rng.gen_range(0..classes.len())];
                    preds.push((id, Prediction::Class(pred)));
                }
            }
            let report = compute(&preds, &truth, &classes).unwrap();
            prop_assert!((report.macro_recall - report.accuracy).abs() < 1e-9);
        }

        #[test]
        fn metrics_invariant_under_item_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let classes = CesClass::ALL;
            let mut truth = Vec::new();
            let mut preds = Vec::new();
            for i in 0..60 {
                let id = format!("i{i}");
                truth.push((id.clone(), classes[rng.gen_range(0..6)]));
                preds.push((id, Prediction::Class(classes[rng.gen_range(0..6)])));
            }
            let report_a = compute(&preds, &truth, &classes).unwrap();
            let mut shuffled = preds.clone();
            shuffled.shuffle(&mut rng);
            let report_b = compute(&shuffled, &truth, &classes).unwrap();
            prop_assert_eq!(report_a, report_b);
        }
    }
}
