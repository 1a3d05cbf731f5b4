//! Confusion matrices and the classification metrics derived from them.

use crate::error::{Error, Result};

/// `K×K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument(
                "confusion matrix must be square".into(),
            ));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for v in [truth, pred] {
            if v >= self.k {
                return Err(Error::LabelOutOfRange {
                    label: v,
                    classes: self.k,
                });
            }
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.k.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    /// `true\pred` header then one row per class.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("true\\pred");
        for n in names {
            s += &format!(",{n}");
        }
        s.push('\n');
        for (i, row) in self.rows().iter().enumerate() {
            s += &names[i];
            for v in row {
                s += &format!(",{v}");
            }
            s.push('\n');
        }
        s
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Tallies paired predictions and labels.
pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::new(k);
    for (&p, &t) in preds.iter().zip(labels) {
        m.add(t, p)?;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Per-class precision, recall and F1 with their unweighted means. A zero
/// denominator yields 0 for that quantity.
pub fn metrics(m: &ConfusionMatrix) -> Metrics {
    let k = m.classes();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = m.get(c, c);
            let predicted: u64 = (0..k).map(|t| m.get(t, c)).sum();
            let support: u64 = (0..k).map(|p| m.get(c, p)).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if k == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / k as f64
        }
    };
    Metrics {
        accuracy: m.accuracy(),
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        per_class,
    }
}

impl Metrics {
    /// `class,precision,recall,f1,support` rows, a `macro` row and an
    /// `accuracy` row.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("class,precision,recall,f1,support\n");
        let mut total = 0;
        for (name, c) in names.iter().zip(&self.per_class) {
            s += &format!(
                "{name},{:.6},{:.6},{:.6},{}\n",
                c.precision, c.recall, c.f1, c.support
            );
            total += c.support;
        }
        s += &format!(
            "macro,{:.6},{:.6},{:.6},{total}\n",
            self.macro_precision, self.macro_recall, self.macro_f1
        );
        s += &format!("accuracy,,,{:.6},{total}\n", self.accuracy);
        s
    }
}
