use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::towers::{Category, Split, Subset};
use crate::{Error, Result};

pub const METRICS_HEADER: [&str; 12] = [
    "epoch",
    "split",
    "acc",
    "acc_A",
    "acc_B",
    "acc_C",
    "acc_D",
    "steth_acc",
    "pearson_r",
    "loss_main",
    "loss_steth",
    "lr",
];

/// Sample correlation, or a marker that one input had zero variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    Value(f64),
    Degenerate,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Value(r) => Some(r),
            Correlation::Degenerate => None,
        }
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correlation::Value(r) => write!(f, "{r}"),
            Correlation::Degenerate => f.write_str("degenerate"),
        }
    }
}

/// Pearson's sample correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!("pearson inputs differ in length: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("pearson needs at least two samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation::Degenerate);
    }
    Ok(Correlation::Value((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// Metrics of one split after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub acc: f64,
    /// Accuracy per tower category; `None` for categories absent from the split.
    pub acc_by_category: [Option<f64>; 4],
    pub category_counts: [usize; 4],
    pub steth_acc: Option<f64>,
    pub pearson_r: Option<Correlation>,
    pub loss_main: f64,
    pub loss_steth: Option<f64>,
    pub lr: f64,
    /// Agreement of predictions with hint-implied digits.
    pub hint_acc: Option<f64>,
    pub diverged: bool,
}

impl MetricsRecord {
    /// Count-weighted accuracy over the categories of one subset.
    pub fn subset_acc(&self, subset: Subset) -> Option<f64> {
        let mut hits = 0.0;
        let mut n = 0;
        for c in Category::ALL.into_iter().filter(|c| c.subset() == subset) {
            if let Some(a) = self.acc_by_category[c.index()] {
                hits += a * self.category_counts[c.index()] as f64;
                n += self.category_counts[c.index()];
            }
        }
        (n > 0).then(|| hits / n as f64)
    }

    /// Unweighted mean of the per-category accuracies present.
    pub fn category_mean(&self) -> Option<f64> {
        let present: Vec<f64> = self.acc_by_category.iter().flatten().copied().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut row = vec![
            self.epoch.to_string(),
            split_name(self.split).to_string(),
            self.acc.to_string(),
        ];
        row.extend(self.acc_by_category.iter().map(|a| opt(*a)));
        row.push(opt(self.steth_acc));
        row.push(self.pearson_r.map_or(String::new(), |r| r.to_string()));
        row.push(self.loss_main.to_string());
        row.push(opt(self.loss_steth));
        row.push(self.lr.to_string());
        row
    }
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Writes `metrics.csv`; floats use shortest round-trip formatting.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record(r.csv_row()).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One parsed row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub acc: f64,
    pub acc_by_category: [Option<f64>; 4],
    pub steth_acc: Option<f64>,
    pub pearson_r: Option<String>,
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    if rdr.headers().map_err(csv_err)?.iter().ne(METRICS_HEADER) {
        return Err(Error::format(path, "unexpected metrics header"));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::format(path, format!("row {k}: bad {what}"));
        let num = |j: usize| -> Result<Option<f64>> {
            if rec[j].is_empty() {
                Ok(None)
            } else {
                rec[j].parse().map(Some).map_err(|_| bad(METRICS_HEADER[j]))
            }
        };
        rows.push(MetricsRow {
            epoch: rec[0].parse().map_err(|_| bad("epoch"))?,
            split: rec[1].to_string(),
            acc: num(2)?.ok_or_else(|| bad("acc"))?,
            acc_by_category: [num(3)?, num(4)?, num(5)?, num(6)?],
            steth_acc: num(7)?,
            pearson_r: (!rec[8].is_empty()).then(|| rec[8].to_string()),
        });
    }
    Ok(rows)
}

/// Largest deviation between `acc` and the count-weighted per-category accuracies.
pub fn aggregation_gap(acc: f64, acc_by_category: &[Option<f64>; 4], counts: &[usize; 4]) -> f64 {
    let mut hits = 0.0;
    let mut n = 0;
    for (a, c) in acc_by_category.iter().zip(counts) {
        if let Some(a) = a {
            hits += a * *c as f64;
            n += c;
        }
    }
    if n == 0 {
        return 0.0;
    }
    (hits / n as f64 - acc).abs()
}
