use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DatasetSpec, ExperimentConfig, SubsetFilter, Task};
use super::data::ExperimentData;
use super::metrics::{pearson, write_metrics_csv, Correlation, MetricsRecord};
use super::tower_net::TowerNet;
use crate::autodiff::{Graph, ParameterSet, Partition, Tensor};
use crate::mnist::{build_toy_model, hint_agreement_accuracy};
use crate::nn::{argmax_rows, LossKind, Network, PRE_LOGITS};
use crate::optim::RmsProp;
use crate::stethoscope::{head_only_step, stethoscope_step, Batch, HeadSpec, Lambda, StethoscopeHead, Targets};
use crate::towers::{Category, Split, Subset};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

const EVAL_BATCH: usize = 250;
const CHECKPOINT_MAGIC: &[u8; 8] = b"STHCKPT1";

// Independent RNG streams per run seed.
const STREAM_INIT: u64 = 0;
const STREAM_HEAD: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
pub(crate) const STREAM_BASELINE: u64 = 3;
pub(crate) const STREAM_PROBE: u64 = 4;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Main network, optional stethoscope head and their shared parameters.
pub struct Model {
    pub net: Box<dyn Network>,
    pub head: Option<StethoscopeHead>,
    pub params: ParameterSet,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("taps", &self.net.taps())
            .field("head", &self.head)
            .field("params", &self.params.len())
            .finish()
    }
}

/// Loss family for `task` on the configured dataset.
pub fn task_loss(cfg: &ExperimentConfig, task: Task) -> Result<LossKind> {
    Ok(match cfg.task_classes(task)? {
        1 => LossKind::SigmoidCe,
        classes => LossKind::SoftmaxCe { classes },
    })
}

/// Layer a stethoscope reads when the config leaves it open.
pub fn default_attach_layer(dataset: &DatasetSpec) -> &'static str {
    match dataset.hint_variant() {
        Some(v) => v.probe().0,
        None => PRE_LOGITS,
    }
}

impl Model {
    pub fn build(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Self> {
        let mut params = ParameterSet::new();
        let mut rng = stream_rng(cfg.seed, STREAM_INIT);
        let net: Box<dyn Network> = match data {
            ExperimentData::Towers(t) => Box::new(TowerNet::new(&mut params, &cfg.model, t.image_size(), &mut rng)?),
            ExperimentData::Mnist(m) => build_toy_model(
                m.variant(),
                &mut params,
                cfg.model.toy_hidden_width,
                cfg.model.hint_scale_init,
                &mut rng,
            )?,
        };
        let head = match &cfg.stethoscope {
            None => None,
            Some(s) => {
                let mut head = StethoscopeHead::new(HeadSpec {
                    lambda: s.lambda,
                    loss: task_loss(cfg, s.task)?,
                    attach_layer: s
                        .attach_layer
                        .clone()
                        .unwrap_or_else(|| default_attach_layer(&cfg.dataset).to_string()),
                    hidden_width: s.hidden_width,
                    n_non_zero: s.n_non_zero,
                    adapter: s.adapter,
                });
                head.attach(&net.taps(), &mut params, "steth", &mut stream_rng(cfg.seed, STREAM_HEAD))?;
                Some(head)
            }
        };
        Ok(Self { net, head, params })
    }

    /// Digest of the main network parameters.
    pub fn theta_checksum(&self) -> u64 {
        self.params.checksum(Partition::is_main)
    }

    /// Activations of `layer` for `indices`, computed with frozen parameters.
    pub fn features(&self, data: &ExperimentData, indices: &[usize], layer: &str) -> Result<Tensor> {
        let info = self
            .net
            .tap_info(layer)
            .ok_or_else(|| Error::Config(format!("unknown layer {layer:?}")))?;
        let width = info.flat_len();
        let mut out = Vec::with_capacity(indices.len() * width);
        for chunk in indices.chunks(EVAL_BATCH) {
            let mut g = Graph::new();
            let o = self.net.forward(&mut g, &self.params, &data.input(chunk), false)?;
            let z = o.tap(layer).expect("tap listed by the network");
            g.forward([])?;
            out.extend_from_slice(g.value(z).data());
        }
        Ok(Tensor::new(vec![indices.len(), width], out)?)
    }

    /// Writes every parameter as little-endian f64 with names and shapes.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (_, p) in self.params.iter() {
            buf.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.value.shape().len() as u64).to_le_bytes());
            for d in p.value.shape() {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Restores values saved by [`Model::save_checkpoint`] for a model of the same layout.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint"));
        }
        let count = r.u64()? as usize;
        if count != self.params.len() {
            return Err(Error::format(
                path,
                format!("{count} parameters, model has {}", self.params.len()),
            ));
        }
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let n = r.u64()? as usize;
            let name = String::from_utf8_lossy(r.take(n)?).into_owned();
            let rank = r.u64()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let p = self.params.get(id);
            if name != p.name || shape != p.value.shape() {
                return Err(Error::format(
                    path,
                    format!("parameter {name:?} {shape:?} does not match {:?} {:?}", p.name, p.value.shape()),
                ));
            }
            let len: usize = shape.iter().product();
            let vals = r.take(len * 8)?;
            let dst = self.params.value_mut(id).data_mut();
            for (d, c) in dst.iter_mut().zip(vals.chunks_exact(8)) {
                *d = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Training state of one run: model, optimizers and the shuffle stream.
pub struct Session<'d> {
    cfg: ExperimentConfig,
    data: &'d ExperimentData,
    pub model: Model,
    theta_opt: RmsProp,
    psi_opt: RmsProp,
    shuffle: ChaCha8Rng,
    pool: Vec<usize>,
    main_subset: SubsetFilter,
    steth_subset: SubsetFilter,
    completed: usize,
}

impl<'d> Session<'d> {
    pub fn new(cfg: &ExperimentConfig, data: &'d ExperimentData) -> Result<Self> {
        cfg.validate()?;
        let model = Model::build(cfg, data)?;
        let main_subset = cfg.dataset.subset();
        let steth_subset = cfg
            .stethoscope
            .as_ref()
            .and_then(|s| s.subset)
            .unwrap_or(main_subset);
        let uses_steth = cfg.stethoscope.is_some();
        let pool: Vec<usize> = data
            .split_indices(Split::Train)
            .into_iter()
            .filter(|&i| data.includes(i, main_subset) || (uses_steth && data.includes(i, steth_subset)))
            .collect();
        if pool.is_empty() {
            return Err(Error::Config("no training samples match the configured subsets".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            data,
            model,
            theta_opt: RmsProp::new(cfg.optimizer)?,
            psi_opt: RmsProp::new(cfg.optimizer)?,
            shuffle: stream_rng(cfg.seed, STREAM_SHUFFLE),
            pool,
            main_subset,
            steth_subset,
            completed: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn data(&self) -> &'d ExperimentData {
        self.data
    }

    pub fn completed_epochs(&self) -> usize {
        self.completed
    }

    /// Learning rate used by the next epoch.
    pub fn learning_rate(&self) -> f64 {
        self.theta_opt.learning_rate()
    }

    /// One ψ-only update of the attached head on precomputed activations.
    pub(crate) fn head_step(&mut self, features: Tensor, targets: &Targets) -> Result<f64> {
        let head = self
            .model
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("no stethoscope configured".into()))?;
        head_only_step(head, &mut self.model.params, features, targets, None, &mut self.psi_opt)
    }

    pub(crate) fn decay_psi(&mut self, completed_epochs: usize) {
        self.psi_opt.apply_lr_decay(completed_epochs);
    }

    pub(crate) fn next_order(&mut self, indices: &[usize]) -> Vec<usize> {
        let mut order = indices.to_vec();
        order.shuffle(&mut self.shuffle);
        order
    }

    /// Training indices that carry stethoscope supervision.
    pub fn steth_pool(&self) -> Vec<usize> {
        self.pool
            .iter()
            .copied()
            .filter(|&i| self.data.includes(i, self.steth_subset))
            .collect()
    }

    fn weights(&self, chunk: &[usize], filter: SubsetFilter) -> Option<Vec<f64>> {
        (filter != SubsetFilter::All).then(|| {
            chunk
                .iter()
                .map(|&i| if self.data.includes(i, filter) { 1.0 } else { 0.0 })
                .collect()
        })
    }

    fn batch(&self, chunk: &[usize]) -> Result<Batch> {
        let steth = match &self.cfg.stethoscope {
            Some(s) => Some(self.data.task_targets(s.task, chunk)?),
            None => None,
        };
        Ok(Batch {
            input: self.data.input(chunk),
            main: self.data.main_targets(chunk),
            main_weights: self.weights(chunk, self.main_subset),
            steth_weights: steth.as_ref().and_then(|_| self.weights(chunk, self.steth_subset)),
            steth,
        })
    }

    /// One pass over the training pool. On a non-finite loss or gradient the
    /// parameters and optimizer state roll back to the start of the epoch.
    pub fn train_epoch(&mut self) -> Result<()> {
        let epoch = self.completed + 1;
        let snapshot = (self.model.params.clone(), self.theta_opt.clone(), self.psi_opt.clone());
        let order = self.next_order(&self.pool.clone());
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = self.batch(chunk)?;
            let m = &mut self.model;
            let res = stethoscope_step(
                m.net.as_ref(),
                m.head.as_ref(),
                &mut m.params,
                &batch,
                &mut self.theta_opt,
                &mut self.psi_opt,
            );
            let what = match res {
                Ok(r) if r.loss_main.is_finite() && r.loss_steth.is_none_or(f64::is_finite) => continue,
                Ok(_) => "non-finite loss".to_string(),
                Err(Error::NonFiniteGradient(p)) => format!("non-finite gradient in {p}"),
                Err(e) => return Err(e),
            };
            (self.model.params, self.theta_opt, self.psi_opt) = snapshot;
            return Err(Error::Diverged { epoch, what });
        }
        self.completed = epoch;
        self.theta_opt.apply_lr_decay(epoch);
        self.psi_opt.apply_lr_decay(epoch);
        Ok(())
    }

    /// Metrics of the current parameters on every sample of `split`.
    pub fn evaluate(&self, split: Split, lr: f64) -> Result<MetricsRecord> {
        let data = self.data;
        let indices = data.split_indices(split);
        if indices.is_empty() {
            return Err(Error::InvalidInput(format!("split {split:?} is empty")));
        }
        let task = self.cfg.stethoscope.as_ref().map(|s| s.task);
        let mut main_correct = Vec::with_capacity(indices.len());
        let mut steth_correct = Vec::new();
        let mut predictions = Vec::with_capacity(indices.len());
        let (mut loss_main, mut loss_steth) = (0.0, 0.0);
        let m = &self.model;
        for chunk in indices.chunks(EVAL_BATCH) {
            let mut g = Graph::new();
            let out = m.net.forward(&mut g, &m.params, &data.input(chunk), false)?;
            let targets = data.main_targets(chunk);
            let lm = targets.loss(&mut g, out.logits, None)?;
            let steth = match (&m.head, task) {
                (Some(head), Some(task)) => {
                    let layer = &head.attachment().expect("attached head").layer;
                    let z = out.tap(layer).expect("head layer is a tap");
                    let logits = head.apply(&mut g, &m.params, z, false)?;
                    let t = data.task_targets(task, chunk)?;
                    let ls = t.loss(&mut g, logits, None)?;
                    Some((logits, t, ls))
                }
                _ => None,
            };
            g.forward([])?;
            let logits = g.value(out.logits);
            main_correct.extend(targets.correct(logits));
            predictions.extend(match &targets {
                Targets::Binary(_) => logits.data().iter().map(|z| usize::from(*z > 0.0)).collect(),
                Targets::Classes(_) => argmax_rows(logits),
            });
            loss_main += g.value(lm).item() * chunk.len() as f64;
            if let Some((logits, t, ls)) = steth {
                steth_correct.extend(t.correct(g.value(logits)));
                loss_steth += g.value(ls).item() * chunk.len() as f64;
            }
        }
        let n = indices.len() as f64;
        let frac = |v: &[bool]| v.iter().filter(|c| **c).count() as f64 / v.len() as f64;

        let mut acc_by_category = [None; 4];
        let category_counts = data.category_counts(&indices);
        if data.towers().is_some() {
            for c in Category::ALL {
                let hits: Vec<bool> = indices
                    .iter()
                    .zip(&main_correct)
                    .filter(|(i, _)| data.category(**i) == Some(c))
                    .map(|(_, k)| *k)
                    .collect();
                if !hits.is_empty() {
                    acc_by_category[c.index()] = Some(frac(&hits));
                }
            }
        }
        let pearson_r = match data.towers() {
            Some(t) if indices.len() >= 2 => {
                let x: Vec<f64> = predictions.iter().map(|p| *p as f64).collect();
                let y: Vec<f64> = indices.iter().map(|&i| f64::from(u8::from(t.records[i].y_l))).collect();
                Some(pearson(&x, &y)?)
            }
            _ => None,
        };
        let hint_acc = match data.hint_digits(&indices) {
            Some(h) => Some(hint_agreement_accuracy(&predictions, &h)?),
            None => None,
        };
        let has_steth = !steth_correct.is_empty();
        Ok(MetricsRecord {
            epoch: self.completed,
            split,
            acc: frac(&main_correct),
            acc_by_category,
            category_counts,
            steth_acc: has_steth.then(|| frac(&steth_correct)),
            pearson_r,
            loss_main: loss_main / n,
            loss_steth: has_steth.then(|| loss_steth / n),
            lr,
            hint_acc,
            diverged: false,
        })
    }
}

/// Headline numbers of a run, taken from its last test evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub epoch: usize,
    pub acc: f64,
    pub acc_easy: Option<f64>,
    pub acc_hard: Option<f64>,
    /// Unweighted mean of the four category accuracies.
    pub category_mean: Option<f64>,
    pub steth_acc: Option<f64>,
    pub hint_acc: Option<f64>,
    pub pearson_r: Option<f64>,
}

impl FinalMetrics {
    pub fn from_record(r: &MetricsRecord) -> Self {
        Self {
            epoch: r.epoch,
            acc: r.acc,
            acc_easy: r.subset_acc(Subset::Easy),
            acc_hard: r.subset_acc(Subset::Hard),
            category_mean: r.category_mean(),
            steth_acc: r.steth_acc,
            hint_acc: r.hint_acc,
            pearson_r: r.pearson_r.and_then(Correlation::value),
        }
    }
}

/// Result of [`train`].
#[derive(Debug)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub records: Vec<MetricsRecord>,
    pub model: Model,
    /// Epoch whose update produced non-finite values; the model holds the last good parameters.
    pub diverged_at: Option<usize>,
}

impl RunOutcome {
    pub fn final_test(&self) -> Option<&MetricsRecord> {
        self.records.iter().rev().find(|r| r.split == Split::Test)
    }

    pub fn final_metrics(&self) -> Option<FinalMetrics> {
        self.final_test().map(FinalMetrics::from_record)
    }
}

/// Trains for `cfg.epochs`, calling `on_epoch` after each completed epoch.
pub fn train_with(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    mut on_epoch: impl FnMut(&Session<'_>),
) -> Result<RunOutcome> {
    let mut session = Session::new(cfg, data)?;
    let mut records = Vec::new();
    let mut diverged_at = None;
    for _ in 0..cfg.epochs {
        let lr = session.learning_rate();
        match session.train_epoch() {
            Ok(()) => {}
            Err(Error::Diverged { epoch, .. }) => {
                diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        }
        if cfg.eval_train {
            records.push(session.evaluate(Split::Train, lr)?);
        }
        records.push(session.evaluate(Split::Test, lr)?);
        on_epoch(&session);
    }
    if diverged_at.is_some() {
        for r in &mut records {
            r.diverged = true;
        }
    }
    Ok(RunOutcome {
        config: cfg.clone(),
        records,
        model: session.model,
        diverged_at,
    })
}

pub fn train(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<RunOutcome> {
    train_with(cfg, data, |_| {})
}

/// Run metadata written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub epochs_completed: usize,
    pub diverged_at: Option<usize>,
    pub final_test: Option<FinalMetrics>,
}

/// SHA-256 of the canonical TOML form of `cfg`.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    Sha256::digest(cfg.to_toml_string().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub(crate) fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("stethlab".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint_format".to_string(), String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned()),
    ])
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Writes metrics, checkpoint, resolved config and run manifest into `dir`.
pub fn write_run_outputs(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics_csv(&dir.join(METRICS_FILE), &outcome.records)?;
    outcome.model.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, outcome.config.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let manifest = RunManifest {
        config_hash: config_hash(&outcome.config),
        seed: outcome.config.seed,
        versions: versions(),
        epochs_completed: outcome.records.iter().map(|r| r.epoch).max().unwrap_or(0),
        diverged_at: outcome.diverged_at,
        final_test: outcome.final_metrics(),
    };
    write_json(&dir.join(RUN_MANIFEST_FILE), &manifest)
}

/// Validates, loads data, trains and writes outputs when `output_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = ExperimentData::load(&cfg.dataset)?;
    let outcome = train(cfg, &data)?;
    if let Some(dir) = &cfg.output_dir {
        write_run_outputs(dir, &outcome)?;
    }
    Ok(outcome)
}

/// Same config with another stethoscope weight.
pub fn with_lambda(cfg: &ExperimentConfig, lambda: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    let s = c
        .stethoscope
        .as_mut()
        .ok_or_else(|| Error::Config("setting lambda needs a stethoscope section".into()))?;
    s.lambda = Lambda(lambda);
    Ok(c)
}
