use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::data::ExperimentData;
use super::train::{train, with_lambda, write_run_outputs, FinalMetrics};
use crate::{Error, Result};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// Finished early on non-finite values; metrics are from the last good epoch.
    Diverged,
    Failed,
}

/// One `(λ, repeat)` run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub lambda: f64,
    pub repeat: usize,
    pub seed: u64,
    pub status: CellStatus,
    pub metrics: Option<FinalMetrics>,
    pub error: Option<String>,
}

/// Mean and sample standard deviation of one metric over the cells of a λ.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub runs: usize,
    pub failed: usize,
    pub acc: Option<Spread>,
    pub acc_easy: Option<Spread>,
    pub acc_hard: Option<Spread>,
    pub category_mean: Option<Spread>,
    pub steth_acc: Option<Spread>,
    pub hint_acc: Option<Spread>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub summary: Vec<LambdaSummary>,
}

impl SweepResult {
    pub fn summary_for(&self, lambda: f64) -> Option<&LambdaSummary> {
        self.summary.iter().find(|s| s.lambda == lambda)
    }
}

/// Seed of repeat `r`; shared across λ so that cells pair up.
pub fn cell_seed(base: u64, repeat: usize) -> u64 {
    base.wrapping_add(repeat as u64)
}

fn cell_dir(root: &Path, lambda: f64, repeat: usize) -> std::path::PathBuf {
    root.join("cells").join(format!("lambda_{lambda}_rep{repeat}"))
}

/// Trains every `(λ, repeat)` cell in order. Cell errors are recorded and the
/// sweep moves on; `on_cell` sees each cell as it finishes.
pub fn lambda_sweep(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    lambdas: &[f64],
    repeats: usize,
    mut on_cell: impl FnMut(&SweepCell),
) -> Result<SweepResult> {
    if lambdas.is_empty() {
        return Err(Error::Config("a sweep needs at least one lambda".into()));
    }
    if repeats == 0 {
        return Err(Error::Config("a sweep needs at least one repeat".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !l.is_finite()) {
        return Err(Error::Config(format!("lambda must be finite, got {l}")));
    }
    let mut cells = Vec::with_capacity(lambdas.len() * repeats);
    for &lambda in lambdas {
        for repeat in 0..repeats {
            let seed = cell_seed(cfg.seed, repeat);
            let cell = match run_cell(cfg, data, lambda, repeat, seed) {
                Ok((metrics, diverged)) => SweepCell {
                    lambda,
                    repeat,
                    seed,
                    status: if diverged { CellStatus::Diverged } else { CellStatus::Ok },
                    metrics,
                    error: None,
                },
                Err(e) => SweepCell {
                    lambda,
                    repeat,
                    seed,
                    status: CellStatus::Failed,
                    metrics: None,
                    error: Some(e.to_string()),
                },
            };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    let summary = summarize(&cells);
    let result = SweepResult { cells, summary };
    if let Some(dir) = &cfg.output_dir {
        write_sweep(dir, &result)?;
    }
    Ok(result)
}

fn run_cell(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    lambda: f64,
    repeat: usize,
    seed: u64,
) -> Result<(Option<FinalMetrics>, bool)> {
    let mut c = if lambda == 0.0 && cfg.stethoscope.is_none() {
        cfg.clone()
    } else {
        with_lambda(cfg, lambda)?
    };
    c.seed = seed;
    c.output_dir = cfg.output_dir.as_ref().map(|d| cell_dir(d, lambda, repeat));
    let outcome = train(&c, data)?;
    if let Some(dir) = &c.output_dir {
        write_run_outputs(dir, &outcome)?;
    }
    Ok((outcome.final_metrics(), outcome.diverged_at.is_some()))
}

/// Per-λ aggregates in first-appearance order.
pub fn summarize(cells: &[SweepCell]) -> Vec<LambdaSummary> {
    let mut lambdas: Vec<f64> = Vec::new();
    for c in cells {
        if !lambdas.contains(&c.lambda) {
            lambdas.push(c.lambda);
        }
    }
    lambdas
        .into_iter()
        .map(|lambda| {
            let mine: Vec<&SweepCell> = cells.iter().filter(|c| c.lambda == lambda).collect();
            let ok: Vec<&FinalMetrics> = mine.iter().filter_map(|c| c.metrics.as_ref()).collect();
            let col = |f: &dyn Fn(&FinalMetrics) -> Option<f64>| Spread::of(&ok.iter().filter_map(|m| f(m)).collect::<Vec<_>>());
            LambdaSummary {
                lambda,
                runs: mine.len(),
                failed: mine.iter().filter(|c| c.status == CellStatus::Failed).count(),
                acc: col(&|m| Some(m.acc)),
                acc_easy: col(&|m| m.acc_easy),
                acc_hard: col(&|m| m.acc_hard),
                category_mean: col(&|m| m.category_mean),
                steth_acc: col(&|m| m.steth_acc),
                hint_acc: col(&|m| m.hint_acc),
            }
        })
        .collect()
}

pub const SWEEP_HEADER: [&str; 13] = [
    "lambda",
    "repeat",
    "seed",
    "status",
    "epoch",
    "acc",
    "acc_easy",
    "acc_hard",
    "category_mean",
    "steth_acc",
    "hint_acc",
    "pearson_r",
    "error",
];

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Writes `sweep.csv` (one row per cell) and `sweep_summary.csv` (one row per λ).
pub fn write_sweep(dir: &Path, result: &SweepResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(SWEEP_FILE);
    let csv_err = |e: csv::Error| Error::format(&path, e.to_string());
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for c in &result.cells {
        let m = c.metrics.as_ref();
        let status = match c.status {
            CellStatus::Ok => "ok",
            CellStatus::Diverged => "diverged",
            CellStatus::Failed => "failed",
        };
        w.write_record([
            c.lambda.to_string(),
            c.repeat.to_string(),
            c.seed.to_string(),
            status.to_string(),
            m.map_or(String::new(), |m| m.epoch.to_string()),
            opt(m.map(|m| m.acc)),
            opt(m.and_then(|m| m.acc_easy)),
            opt(m.and_then(|m| m.acc_hard)),
            opt(m.and_then(|m| m.category_mean)),
            opt(m.and_then(|m| m.steth_acc)),
            opt(m.and_then(|m| m.hint_acc)),
            opt(m.and_then(|m| m.pearson_r)),
            c.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(SWEEP_SUMMARY_FILE);
    let csv_err = |e: csv::Error| Error::format(&path, e.to_string());
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let metrics = ["acc", "acc_easy", "acc_hard", "category_mean", "steth_acc", "hint_acc"];
    let mut header = vec!["lambda".to_string(), "runs".into(), "failed".into()];
    for m in metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for s in &result.summary {
        let mut row = vec![s.lambda.to_string(), s.runs.to_string(), s.failed.to_string()];
        for v in [s.acc, s.acc_easy, s.acc_hard, s.category_mean, s.steth_acc, s.hint_acc] {
            row.push(opt(v.map(|v| v.mean)));
            row.push(opt(v.map(|v| v.std)));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
