//! Confusion matrices and the F1 metric suite.
//!
//! Rows are ground truth, columns are predictions. Pixels whose truth is
//! `Unknown` only bump the ignored counter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelfuse::{ClassId, LabelRaster, NUM_CLASSES};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} pixels but truth has {truth}")]
    Extent { pred: usize, truth: usize },
    #[error("predicted class index {0} is not a real class")]
    Prediction(usize),
    #[error("cannot merge a {0}-class matrix into a {1}-class matrix")]
    Classes(usize, usize),
    #[error("a report needs at least one confusion matrix")]
    NoSeeds,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new(NUM_CLASSES)
    }
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            ignored: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.count(k, k)).sum()
    }

    /// Adds one prediction raster given as class indices.
    pub fn accumulate_indices(&mut self, pred: &[usize], truth: &[ClassId]) -> Result<(), MetricsError> {
        if pred.len() != truth.len() {
            return Err(MetricsError::Extent {
                pred: pred.len(),
                truth: truth.len(),
            });
        }
        if let Some(&bad) = pred.iter().find(|&&p| p >= self.classes) {
            return Err(MetricsError::Prediction(bad));
        }
        for (&p, t) in pred.iter().zip(truth) {
            match t.index() {
                Some(t) => self.counts[t * self.classes + p] += 1,
                None => self.ignored += 1,
            }
        }
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &LabelRaster, truth: &LabelRaster) -> Result<(), MetricsError> {
        let idx = pred
            .labels
            .iter()
            .map(|c| c.index().ok_or(MetricsError::Prediction(c.code() as usize)))
            .collect::<Result<Vec<_>, _>>()?;
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(MetricsError::Extent {
                pred: pred.labels.len(),
                truth: truth.labels.len(),
            });
        }
        self.accumulate_indices(&idx, &truth.labels)
    }

    /// Adds another matrix; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.classes != self.classes {
            return Err(MetricsError::Classes(other.classes, self.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    fn tp_fp_fn(&self, k: usize) -> (u64, u64, u64) {
        let tp = self.count(k, k);
        let col: u64 = (0..self.classes).map(|t| self.count(t, k)).sum();
        let row: u64 = (0..self.classes).map(|p| self.count(k, p)).sum();
        (tp, col - tp, row - tp)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `2TP / (2TP + FP + FN)` per class, `0` when the denominator is zero.
pub fn f1_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.classes)
        .map(|k| {
            let (tp, fp, fn_) = cm.tp_fp_fn(k);
            ratio(2 * tp, 2 * tp + fp + fn_)
        })
        .collect()
}

pub fn precision_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.classes)
        .map(|k| {
            let (tp, fp, _) = cm.tp_fp_fn(k);
            ratio(tp, tp + fp)
        })
        .collect()
}

pub fn recall_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.classes)
        .map(|k| {
            let (tp, _, fn_) = cm.tp_fp_fn(k);
            ratio(tp, tp + fn_)
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Macro F1 over all classes of the matrix.
pub fn overall_f1(cm: &ConfusionMatrix) -> f64 {
    mean(&f1_per_class(cm))
}

/// Mean F1 over the three forest classes.
pub fn forest_f1(cm: &ConfusionMatrix) -> f64 {
    let f1 = f1_per_class(cm);
    let forest: Vec<f64> = ClassId::FOREST.iter().map(|c| f1[*c as usize]).collect();
    mean(&forest)
}

/// Mean and sample (n - 1) standard deviation; the deviation of a single
/// value is reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let m = mean(xs);
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        };
        Self { mean: m, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub overall_f1: f64,
    pub forest_f1: f64,
    pub ignored_pixels: u64,
    pub evaluated_pixels: u64,
}

impl SeedMetrics {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Self {
        Self {
            precision: precision_per_class(cm),
            recall: recall_per_class(cm),
            f1: f1_per_class(cm),
            overall_f1: overall_f1(cm),
            forest_f1: forest_f1(cm),
            ignored_pixels: cm.ignored(),
            evaluated_pixels: cm.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seeds: Vec<SeedMetrics>,
    pub per_class_f1: Vec<Stat>,
    pub per_class_precision: Vec<Stat>,
    pub per_class_recall: Vec<Stat>,
    pub overall_f1: Stat,
    pub forest_f1: Stat,
}

fn column_stats(seeds: &[SeedMetrics], pick: impl Fn(&SeedMetrics) -> &Vec<f64>) -> Vec<Stat> {
    let k = pick(&seeds[0]).len();
    (0..k)
        .map(|c| Stat::of(&seeds.iter().map(|s| pick(s)[c]).collect::<Vec<_>>()))
        .collect()
}

/// Per-seed metrics plus their mean and sample standard deviation.
pub fn report(cms: &[ConfusionMatrix]) -> Result<MetricReport, MetricsError> {
    if cms.is_empty() {
        return Err(MetricsError::NoSeeds);
    }
    let seeds: Vec<SeedMetrics> = cms.iter().map(SeedMetrics::from_matrix).collect();
    Ok(MetricReport {
        per_class_f1: column_stats(&seeds, |s| &s.f1),
        per_class_precision: column_stats(&seeds, |s| &s.precision),
        per_class_recall: column_stats(&seeds, |s| &s.recall),
        overall_f1: Stat::of(&seeds.iter().map(|s| s.overall_f1).collect::<Vec<_>>()),
        forest_f1: Stat::of(&seeds.iter().map(|s| s.forest_f1).collect::<Vec<_>>()),
        seeds,
    })
}

/// Header of the results table: overall, forests, and the three forest
/// classes, each as mean and standard deviation.
pub const TABLE_HEADER: [&str; 11] = [
    "run",
    "overall_f1",
    "overall_std",
    "forest_f1",
    "forest_std",
    "natural_f1",
    "natural_std",
    "planted_f1",
    "planted_std",
    "treecrops_f1",
    "treecrops_std",
];

impl MetricReport {
    pub fn table_row(&self, run: &str) -> Vec<String> {
        let mut row = vec![run.to_string()];
        let mut push = |s: Stat| {
            row.push(format!("{:.6}", s.mean));
            row.push(format!("{:.6}", s.std));
        };
        push(self.overall_f1);
        push(self.forest_f1);
        for c in ClassId::FOREST {
            push(self.per_class_f1[c as usize]);
        }
        row
    }
}

/// Writes one results-table row per `(run, report)`.
pub fn write_table<W: std::io::Write>(out: W, rows: &[(String, &MetricReport)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_HEADER)?;
    for (name, r) in rows {
        w.write_record(r.table_row(name))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_fills_diagonal() {
        let truth: Vec<ClassId> = (0..10).map(|i| ClassId::REAL[i % 8]).collect();
        let pred: Vec<usize> = truth.iter().map(|c| c.index().unwrap()).collect();
        let mut cm = ConfusionMatrix::default();
        cm.accumulate_indices(&pred, &truth).unwrap();
        assert_eq!(cm.trace(), 10);
        assert_eq!(cm.total(), 10);
        let f1 = f1_per_class(&cm);
        assert!(f1.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unknown_truth_is_only_counted_as_ignored() {
        let mut cm = ConfusionMatrix::default();
        cm.accumulate_indices(&[0, 3, 7], &[ClassId::Unknown; 3]).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.ignored(), 3);
    }

    #[test]
    fn f1_closed_forms() {
        // class 0: TP = 1, FP = 1 (truth 1 predicted 0), FN = 0
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate_indices(&[0, 0], &[ClassId::NaturalForest, ClassId::PlantedForest])
            .unwrap();
        let f1 = f1_per_class(&cm);
        assert!((f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1[2], 0.0);
        assert_eq!(precision_per_class(&cm)[0], 0.5);
        assert_eq!(recall_per_class(&cm)[0], 1.0);
    }

    #[test]
    fn extent_and_prediction_errors() {
        let mut cm = ConfusionMatrix::default();
        assert!(matches!(
            cm.accumulate_indices(&[0], &[ClassId::Water, ClassId::Ice]),
            Err(MetricsError::Extent { .. })
        ));
        assert_eq!(
            cm.accumulate_indices(&[8], &[ClassId::Water]),
            Err(MetricsError::Prediction(8))
        );
    }

    #[test]
    fn seed_statistics() {
        assert_eq!(Stat::of(&[0.42]), Stat { mean: 0.42, std: 0.0 });
        let s = Stat::of(&[0.8, 0.8, 0.8]);
        assert!((s.mean - 0.8).abs() < 1e-15 && s.std.abs() < 1e-15);
        let s = Stat::of(&[0.7, 0.8, 0.9]);
        assert!((s.mean - 0.8).abs() < 1e-15);
        assert!((s.std - 0.1).abs() < 1e-12);
        assert_eq!(report(&[]), Err(MetricsError::NoSeeds));
    }

    #[test]
    fn table_has_header_and_rows() {
        let mut cm = ConfusionMatrix::default();
        cm.accumulate_indices(&[0, 1, 2], &[ClassId::NaturalForest, ClassId::PlantedForest, ClassId::Water])
            .unwrap();
        let r = report(&[cm]).unwrap();
        let mut buf = Vec::new();
        write_table(&mut buf, &[("a".into(), &r), ("b".into(), &r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("run,overall_f1"));
    }
}
