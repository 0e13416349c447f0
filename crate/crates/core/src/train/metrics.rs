//! Window weighting, per-video aggregation and classification reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Default exponent of the window weighting.
pub const WEIGHT_EXPONENT: f64 = 3.0;

/// Weight of window `t` of `total`: `(t / total)^a`, so the last window
/// weighs exactly 1.
pub fn window_weight(t: usize, total: usize, a: f64) -> Result<f64> {
    if t == 0 || t > total {
        return Err(Error::invalid(format!("window {t} outside 1..={total}")));
    }
    if !(a >= 0.0) {
        return Err(Error::invalid(format!("weight exponent {a} must be non-negative")));
    }
    if t == total {
        return Ok(1.0);
    }
    Ok((t as f64 / total as f64).powf(a))
}

/// Weighted mean of per-window probability vectors, in window order.
pub fn aggregate_predictions(per_window: &[Vec<f64>], a: f64) -> Result<Vec<f64>> {
    let total = per_window.len();
    let k = per_window
        .first()
        .ok_or(Error::EmptyBatch("aggregate_predictions"))?
        .len();
    let mut out = vec![0.0; k];
    let mut norm = 0.0;
    for (i, p) in per_window.iter().enumerate() {
        if p.len() != k {
            return Err(Error::shape(
                "aggregate_predictions",
                format!("window {}", i + 1),
                k,
                p.len(),
            ));
        }
        let w = window_weight(i + 1, total, a)?;
        norm += w;
        for (o, &v) in out.iter_mut().zip(p) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= norm);
    Ok(out)
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// A frequently confused `(true, predicted)` class pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusedPair {
    pub truth: usize,
    pub predicted: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Mean negative log-probability of the true class.
    pub loss: f64,
    /// `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    /// Most common wrong prediction per class, hardest classes first.
    pub confused_pairs: Vec<ConfusedPair>,
}

impl MetricsReport {
    /// Builds a report from per-video probability vectors.
    pub fn from_probabilities(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptySplit("evaluation".into()));
        }
        if probs.len() != labels.len() {
            return Err(Error::shape("metrics", "labels", probs.len(), labels.len()));
        }
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        let mut loss = 0.0;
        for (p, &y) in probs.iter().zip(labels) {
            if y >= num_classes || p.len() != num_classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: num_classes,
                });
            }
            confusion[y][argmax(p)] += 1;
            loss -= p[y].max(1e-12).ln();
        }
        let n = labels.len();
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let per_class: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let support: usize = row.iter().sum();
                (support > 0).then(|| row[c] as f64 / support as f64)
            })
            .collect();

        let mut order: Vec<usize> = (0..num_classes).filter(|&c| per_class[c].is_some()).collect();
        order.sort_by(|&a, &b| per_class[a].partial_cmp(&per_class[b]).unwrap().then(a.cmp(&b)));
        let confused_pairs = order
            .into_iter()
            .filter_map(|c| {
                let (predicted, &count) = confusion[c]
                    .iter()
                    .enumerate()
                    .filter(|&(p, _)| p != c)
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
                (count > 0).then_some(ConfusedPair {
                    truth: c,
                    predicted,
                    count,
                })
            })
            .collect();
        Ok(MetricsReport {
            accuracy: correct as f64 / n as f64,
            loss: loss / n as f64,
            per_class,
            confusion,
            confused_pairs,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Confusion matrix CSV: header `true,0,1,...`, one row per true class.
    pub fn confusion_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true".to_string()];
        header.extend((0..self.confusion.len()).map(|c| c.to_string()));
        w.write_record(&header)?;
        for (c, row) in self.confusion.iter().enumerate() {
            let mut rec = vec![c.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Per-class accuracy CSV: `class,support,accuracy`.
    pub fn per_class_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "support", "accuracy"])?;
        for (c, acc) in self.per_class.iter().enumerate() {
            let support: usize = self.confusion[c].iter().sum();
            let acc = acc.map(|a| format!("{a:.6}")).unwrap_or_default();
            w.write_record([c.to_string(), support.to_string(), acc])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Human-readable summary with `true → predicted` pairs.
    pub fn summary(&self, names: Option<&[String]>) -> String {
        let name = |c: usize| match names.and_then(|n| n.get(c)) {
            Some(s) => s.clone(),
            None => format!("class {c}"),
        };
        let mut s = String::new();
        let _ = writeln!(s, "accuracy: {:.4} ({} videos)", self.accuracy, self.total());
        let _ = writeln!(s, "loss: {:.4}", self.loss);
        if !self.confused_pairs.is_empty() {
            let _ = writeln!(s, "most confused (true → predicted):");
            for p in &self.confused_pairs {
                let _ = writeln!(s, "  {} → {} ({})", name(p.truth), name(p.predicted), p.count);
            }
        }
        s
    }
}
