//! Confusion matrices and per-class precision / recall / F1 reports with
//! macro and support-weighted averages.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `cell(i, j)` counts samples of true class `i` predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_labels(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid(format!(
                "{} true labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    /// Builds a matrix from explicit rows.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix rows must form a square"));
        }
        Ok(ConfusionMatrix {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::invalid(format!(
                "label pair ({truth}, {predicted}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|j| self.get(class, j)).sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, class)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// CSV with a header row of predicted classes and one row per true
    /// class.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, row) in self.rows().iter().enumerate() {
            out.push_str(&class_names[i]);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// A metric that evaluated to 0/0 and was reported as 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Undefined {
    pub class: String,
    pub metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_avg: ClassMetrics,
    pub weighted_avg: ClassMetrics,
    pub total: u64,
    pub undefined: Vec<Undefined>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// Per-class and averaged metrics with classes named `0..K`.
pub fn classification_report(cm: &ConfusionMatrix) -> Result<Report> {
    let names: Vec<String> = (0..cm.classes()).map(|c| c.to_string()).collect();
    classification_report_named(cm, &names)
}

pub fn classification_report_named(cm: &ConfusionMatrix, class_names: &[String]) -> Result<Report> {
    let k = cm.classes();
    if class_names.len() != k {
        return Err(Error::invalid(format!(
            "{} class names for a {k}-class matrix",
            class_names.len()
        )));
    }
    let total = cm.total();
    if k == 0 || total == 0 {
        return Err(Error::invalid("classification report of an empty confusion matrix"));
    }
    let mut undefined = Vec::new();
    let mut flag = |class: usize, metric: &str| {
        undefined.push(Undefined {
            class: class_names[class].clone(),
            metric: metric.to_string(),
        })
    };
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.get(c, c) as f64;
        let predicted = cm.col_sum(c) as f64;
        let support = cm.row_sum(c);
        let precision = ratio(tp, predicted).unwrap_or_else(|| {
            flag(c, "precision");
            0.0
        });
        let recall = ratio(tp, support as f64).unwrap_or_else(|| {
            flag(c, "recall");
            0.0
        });
        let f1 = ratio(2.0 * precision * recall, precision + recall).unwrap_or_else(|| {
            flag(c, "f1");
            0.0
        });
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class
            .iter()
            .map(|m| f(m) * m.support as f64)
            .sum::<f64>()
            / total as f64
    };
    let macro_avg = ClassMetrics {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        support: total,
    };
    let weighted_avg = ClassMetrics {
        precision: weighted(|m| m.precision),
        recall: weighted(|m| m.recall),
        f1: weighted(|m| m.f1),
        support: total,
    };
    Ok(Report {
        class_names: class_names.to_vec(),
        per_class,
        accuracy: cm.trace() as f64 / total as f64,
        macro_avg,
        weighted_avg,
        total,
        undefined,
    })
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table: one row per class, then accuracy, macro and
    /// weighted averages.
    pub fn to_text(&self) -> String {
        let w = self
            .class_names
            .iter()
            .map(String::len)
            .chain(["weighted avg".len()])
            .max()
            .unwrap_or(12);
        let mut out = format!(
            "{:>w$} {:>10} {:>10} {:>10} {:>10}\n\n",
            "", "precision", "recall", "f1-score", "support"
        );
        let row = |out: &mut String, name: &str, m: &ClassMetrics| {
            let _ = writeln!(
                out,
                "{name:>w$} {:>10.4} {:>10.4} {:>10.4} {:>10}",
                m.precision, m.recall, m.f1, m.support
            );
        };
        for (name, m) in self.class_names.iter().zip(&self.per_class) {
            row(&mut out, name, m);
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "{:>w$} {:>10} {:>10} {:>10.4} {:>10}",
            "accuracy", "", "", self.accuracy, self.total
        );
        row(&mut out, "macro avg", &self.macro_avg);
        row(&mut out, "weighted avg", &self.weighted_avg);
        for u in &self.undefined {
            let _ = writeln!(out, "note: {} of class {} is 0/0, reported as 0", u.metric, u.class);
        }
        out
    }

    /// `class,precision,recall,f1,support` rows plus the two averages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        let rows = self
            .class_names
            .iter()
            .map(String::as_str)
            .zip(&self.per_class)
            .chain([("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)]);
        for (name, m) in rows {
            let _ = writeln!(out, "{name},{},{},{},{}", m.precision, m.recall, m.f1, m.support);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_matrix() {
        let cm = ConfusionMatrix::from_labels(&[0], &[1], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![0, 1], vec![0, 0]]);
        assert!(ConfusionMatrix::from_labels(&[2], &[0], 2).is_err());
    }

    #[test]
    fn undefined_precision_is_flagged() {
        let cm = ConfusionMatrix::from_rows(&[vec![2, 0], vec![1, 0]]).unwrap();
        let r = classification_report(&cm).unwrap();
        assert_eq!(r.per_class[1].precision, 0.0);
        assert!(r
            .undefined
            .iter()
            .any(|u| u.class == "1" && u.metric == "precision"));
        assert!(classification_report(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn text_layout_has_average_rows() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![0, 4]]).unwrap();
        let text = classification_report(&cm).unwrap().to_text();
        assert!(text.contains("macro avg"));
        assert!(text.contains("weighted avg"));
        assert!(text.contains("accuracy"));
    }
}
