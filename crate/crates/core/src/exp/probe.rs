use std::path::Path;

use serde::Serialize;

use super::config::{ExperimentConfig, Task};
use super::data::ExperimentData;
use super::train::{stream_rng, task_loss, write_json, Model, Session, STREAM_BASELINE, STREAM_PROBE};
use crate::autodiff::{ParameterSet, Tensor};
use crate::optim::RmsProp;
use crate::stethoscope::{head_logits, head_only_step, AdapterKind, HeadSpec, Lambda, Mode, StethoscopeHead, Targets};
use crate::towers::Split;
use crate::{Error, Result};

pub const PROBE_FILE: &str = "probe.csv";
pub const FREEZE_FILE: &str = "freeze_recovery.csv";

const EVAL_BATCH: usize = 250;

/// Test accuracy curve of one analytic probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub layer: String,
    pub task: Task,
    /// Test accuracy after each probe epoch.
    pub test_acc: Vec<f64>,
    /// Mean training loss of each probe epoch.
    pub train_loss: Vec<f64>,
}

impl ProbeResult {
    pub fn final_acc(&self) -> f64 {
        *self.test_acc.last().expect("probes train at least one epoch")
    }
}

fn accuracy(head: &StethoscopeHead, params: &ParameterSet, features: &Tensor, targets: &Targets) -> Result<f64> {
    let n = features.shape()[0];
    let mut hits = 0;
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let logits = head_logits(head, params, features.slice_rows(start, end))?;
        let t = slice_targets(targets, start, end);
        hits += t.correct(&logits).iter().filter(|c| **c).count();
    }
    Ok(hits as f64 / n as f64)
}

fn slice_targets(t: &Targets, start: usize, end: usize) -> Targets {
    match t {
        Targets::Binary(v) => Targets::Binary(v[start..end].to_vec()),
        Targets::Classes(v) => Targets::Classes(v[start..end].to_vec()),
    }
}

fn gather_targets(t: &Targets, rows: &[usize]) -> Targets {
    match t {
        Targets::Binary(v) => Targets::Binary(rows.iter().map(|&r| v[r]).collect()),
        Targets::Classes(v) => Targets::Classes(rows.iter().map(|&r| v[r]).collect()),
    }
}

/// Trains one analytic sparse-adapter probe per `(layer, task)` on the frozen
/// main network of `model` and reports its test accuracy after every epoch.
pub fn per_layer_probe(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    model: &Model,
    layers: &[String],
    tasks: &[Task],
) -> Result<Vec<ProbeResult>> {
    if data.towers().is_none() {
        return Err(Error::Config("layer probes run on tower datasets".into()));
    }
    if layers.is_empty() || tasks.is_empty() {
        return Err(Error::Config("probe needs at least one layer and one task".into()));
    }
    let taps = model.net.taps();
    for l in layers {
        if !taps.iter().any(|t| &t.name == l) {
            let names: Vec<_> = taps.iter().map(|t| t.name.as_str()).collect();
            return Err(Error::Config(format!("unknown layer {l:?}; available: {names:?}")));
        }
    }
    for t in tasks {
        if !Task::TOWER_TASKS.contains(t) {
            return Err(Error::Config(format!("probe task {t} is not a tower task")));
        }
    }
    let train_idx = data.split_indices(Split::Train);
    let test_idx = data.split_indices(Split::Test);
    let mut results = Vec::new();
    for layer in layers {
        let train_x = model.features(data, &train_idx, layer)?;
        let test_x = model.features(data, &test_idx, layer)?;
        for &task in tasks {
            let spec = HeadSpec {
                lambda: Lambda(0.0),
                loss: task_loss(cfg, task)?,
                attach_layer: layer.clone(),
                hidden_width: cfg.probe.hidden_width,
                n_non_zero: None,
                adapter: AdapterKind::Sparse,
            };
            let train_y = data.task_targets(task, &train_idx)?;
            let test_y = data.task_targets(task, &test_idx)?;
            results.push(train_probe(cfg, &taps, spec, (&train_x, &train_y), (&test_x, &test_y), task)?);
        }
    }
    Ok(results)
}

fn train_probe(
    cfg: &ExperimentConfig,
    taps: &[crate::nn::TapInfo],
    spec: HeadSpec,
    train: (&Tensor, &Targets),
    test: (&Tensor, &Targets),
    task: Task,
) -> Result<ProbeResult> {
    let layer = spec.attach_layer.clone();
    let mut params = ParameterSet::new();
    let mut head = StethoscopeHead::new(spec);
    head.attach(taps, &mut params, "probe", &mut stream_rng(cfg.seed, STREAM_PROBE))?;
    let mut opt = RmsProp::new(cfg.optimizer)?;
    let mut shuffle = stream_rng(cfg.seed, STREAM_PROBE + 1);
    let positions: Vec<usize> = (0..train.0.shape()[0]).collect();
    let mut result = ProbeResult {
        layer,
        task,
        test_acc: Vec::with_capacity(cfg.probe.epochs),
        train_loss: Vec::with_capacity(cfg.probe.epochs),
    };
    for epoch in 1..=cfg.probe.epochs {
        let mut order = positions.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
        let mut loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let l = head_only_step(
                &head,
                &mut params,
                train.0.gather_rows(chunk),
                &gather_targets(train.1, chunk),
                None,
                &mut opt,
            )?;
            loss += l * chunk.len() as f64;
        }
        opt.apply_lr_decay(epoch);
        result.train_loss.push(loss / positions.len() as f64);
        result.test_acc.push(accuracy(&head, &params, test.0, test.1)?);
    }
    Ok(result)
}

pub fn write_probe_csv(path: &Path, results: &[ProbeResult]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["layer", "task", "epoch", "train_loss", "test_acc"]).map_err(csv_err)?;
    for r in results {
        for (k, (loss, acc)) in r.train_loss.iter().zip(&r.test_acc).enumerate() {
            w.write_record([
                r.layer.clone(),
                r.task.to_string(),
                (k + 1).to_string(),
                loss.to_string(),
                acc.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Main network and stethoscope train together.
    Joint,
    /// Main network frozen, heads train alone.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreezeRow {
    pub epoch: usize,
    pub phase: Phase,
    /// Test accuracy of the jointly trained head.
    pub steth_acc: f64,
    /// Test accuracy of the analytic head trained from scratch on the frozen network.
    pub baseline_acc: Option<f64>,
    pub theta_checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreezeOutcome {
    pub freeze_epoch: usize,
    pub rows: Vec<FreezeRow>,
}

impl FreezeOutcome {
    pub fn last(&self) -> &FreezeRow {
        self.rows.last().expect("at least one epoch")
    }
}

/// Trains adversarially up to `freeze_epoch`, then freezes the main network and
/// keeps training the stethoscope next to a fresh analytic baseline head.
pub fn freeze_recovery(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<FreezeOutcome> {
    cfg.validate()?;
    let freeze_epoch = cfg
        .freeze_epoch
        .ok_or_else(|| Error::Config("freeze_recovery needs freeze_epoch".into()))?;
    let steth = cfg
        .stethoscope
        .as_ref()
        .ok_or_else(|| Error::Config("freeze_recovery needs a stethoscope".into()))?;
    if steth.lambda.mode() != Mode::Adversarial {
        return Err(Error::Config(format!(
            "freeze_recovery needs an adversarial stethoscope, got lambda {}",
            steth.lambda
        )));
    }
    let task = steth.task;
    let mut session = Session::new(cfg, data)?;
    let mut rows = Vec::with_capacity(cfg.epochs);
    for _ in 0..freeze_epoch {
        session.train_epoch()?;
        let r = session.evaluate(Split::Test, session.learning_rate())?;
        rows.push(FreezeRow {
            epoch: session.completed_epochs(),
            phase: Phase::Joint,
            steth_acc: r.steth_acc.expect("stethoscope configured"),
            baseline_acc: None,
            theta_checksum: session.model.theta_checksum(),
        });
    }

    let head_spec = session.model.head.as_ref().expect("stethoscope configured").spec().clone();
    let layer = head_spec.attach_layer.clone();
    let pool = session.steth_pool();
    let test_idx = data.split_indices(Split::Test);
    let train_x = session.model.features(data, &pool, &layer)?;
    let test_x = session.model.features(data, &test_idx, &layer)?;
    let train_y = data.task_targets(task, &pool)?;
    let test_y = data.task_targets(task, &test_idx)?;

    let mut baseline = StethoscopeHead::new(HeadSpec {
        lambda: Lambda(0.0),
        ..head_spec
    });
    let taps = session.model.net.taps();
    baseline.attach(&taps, &mut session.model.params, "baseline", &mut stream_rng(cfg.seed, STREAM_BASELINE))?;
    let mut base_opt = RmsProp::new(cfg.optimizer)?;
    let positions: Vec<usize> = (0..pool.len()).collect();

    for epoch in freeze_epoch + 1..=cfg.epochs {
        let order = session.next_order(&positions);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train_x.gather_rows(chunk);
            let y = gather_targets(&train_y, chunk);
            session.head_step(x.clone(), &y)?;
            head_only_step(&baseline, &mut session.model.params, x, &y, None, &mut base_opt)?;
        }
        session.decay_psi(epoch);
        base_opt.apply_lr_decay(epoch - freeze_epoch);
        let head = session.model.head.as_ref().expect("stethoscope configured");
        rows.push(FreezeRow {
            epoch,
            phase: Phase::Frozen,
            steth_acc: accuracy(head, &session.model.params, &test_x, &test_y)?,
            baseline_acc: Some(accuracy(&baseline, &session.model.params, &test_x, &test_y)?),
            theta_checksum: session.model.theta_checksum(),
        });
    }
    let outcome = FreezeOutcome { freeze_epoch, rows };
    if let Some(dir) = &cfg.output_dir {
        write_freeze_outputs(dir, &outcome)?;
    }
    Ok(outcome)
}

pub fn write_freeze_outputs(dir: &Path, outcome: &FreezeOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(FREEZE_FILE);
    let csv_err = |e: csv::Error| Error::format(&path, e.to_string());
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["epoch", "phase", "steth_acc", "baseline_acc", "theta_checksum"])
        .map_err(csv_err)?;
    for r in &outcome.rows {
        let phase = match r.phase {
            Phase::Joint => "joint",
            Phase::Frozen => "frozen",
        };
        w.write_record([
            r.epoch.to_string(),
            phase.to_string(),
            r.steth_acc.to_string(),
            r.baseline_acc.map_or(String::new(), |v| v.to_string()),
            format!("{:016x}", r.theta_checksum),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("freeze_summary.json"), outcome)
}
