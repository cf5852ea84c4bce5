use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::mnist::{HintConfig, HintVariant};
use crate::nn::PRE_LOGITS;
use crate::optim::RmsPropConfig;
use crate::stethoscope::{AdapterKind, Lambda};
use crate::towers::{Category, DatasetConfig, MAX_BLOCKS};
use crate::{Error, Result};

/// Which tower categories take part in a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetFilter {
    #[default]
    All,
    Easy,
    Hard,
}

impl SubsetFilter {
    pub fn includes(self, category: Category) -> bool {
        match self {
            SubsetFilter::All => true,
            SubsetFilter::Easy => category.subset() == crate::towers::Subset::Easy,
            SubsetFilter::Hard => category.subset() == crate::towers::Subset::Hard,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SubsetFilter::All => "all",
            SubsetFilter::Easy => "easy",
            SubsetFilter::Hard => "hard",
        }
    }
}

impl FromStr for SubsetFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SubsetFilter::All),
            "easy" => Ok(SubsetFilter::Easy),
            "hard" => Ok(SubsetFilter::Hard),
            _ => Err(Error::Config(format!("unknown subset {s:?}; expected all, easy or hard"))),
        }
    }
}

impl fmt::Display for SubsetFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Supervision read by a stethoscope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GlobalBinary,
    LocalBinary,
    ViolationNway,
    #[serde(rename = "hint_10way")]
    Hint10way,
    #[serde(rename = "hint_100way")]
    Hint100way,
}

impl Task {
    pub const TOWER_TASKS: [Task; 3] = [Task::GlobalBinary, Task::LocalBinary, Task::ViolationNway];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::GlobalBinary => "global_binary",
            Task::LocalBinary => "local_binary",
            Task::ViolationNway => "violation_nway",
            Task::Hint10way => "hint_10way",
            Task::Hint100way => "hint_100way",
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Task::GlobalBinary | Task::LocalBinary)
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Task::GlobalBinary,
            Task::LocalBinary,
            Task::ViolationNway,
            Task::Hint10way,
            Task::Hint100way,
        ]
        .into_iter()
        .find(|t| t.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// A tower dataset directory, or an in-memory one generated from `generate`
    /// when `path` is absent.
    Towers {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        generate: DatasetConfig,
        /// Categories whose global-stability labels train the main network.
        #[serde(default)]
        subset: SubsetFilter,
    },
    /// Hinted digits, either a directory written by `prep-mnist` or built from
    /// IDX files (the bundled subset when `images`/`labels` are absent).
    Mnist {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        images: Option<PathBuf>,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        hints: HintConfig,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Towers {
            path: None,
            generate: DatasetConfig::default(),
            subset: SubsetFilter::All,
        }
    }
}

impl DatasetSpec {
    pub fn subset(&self) -> SubsetFilter {
        match self {
            DatasetSpec::Towers { subset, .. } => *subset,
            DatasetSpec::Mnist { .. } => SubsetFilter::All,
        }
    }

    pub fn hint_variant(&self) -> Option<HintVariant> {
        match self {
            DatasetSpec::Mnist { hints, .. } => Some(hints.variant),
            DatasetSpec::Towers { .. } => None,
        }
    }
}

/// Architecture knobs; the family follows from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Output channels of the tower CNN's convolution blocks.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub dense_width: usize,
    /// Hidden width of the pixel-hint perceptron.
    pub toy_hidden_width: usize,
    /// Starting value of the one-hint model's scalar hint weight.
    pub hint_scale_init: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            kernel: 5,
            stride: 2,
            dense_width: 256,
            toy_hidden_width: 256,
            hint_scale_init: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StethoscopeSpec {
    pub task: Task,
    #[serde(default)]
    pub lambda: Lambda,
    /// Categories whose labels train the head; defaults to the main subset.
    #[serde(default)]
    pub subset: Option<SubsetFilter>,
    #[serde(default)]
    pub attach_layer: Option<String>,
    #[serde(default = "default_head_width")]
    pub hidden_width: usize,
    #[serde(default)]
    pub n_non_zero: Option<usize>,
    #[serde(default)]
    pub adapter: AdapterKind,
}

fn default_head_width() -> usize {
    256
}

impl StethoscopeSpec {
    pub fn new(task: Task, lambda: f64) -> Self {
        Self {
            task,
            lambda: Lambda(lambda),
            subset: None,
            attach_layer: None,
            hidden_width: default_head_width(),
            n_non_zero: None,
            adapter: AdapterKind::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub epochs: usize,
    pub layers: Vec<String>,
    pub tasks: Vec<Task>,
    pub hidden_width: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            epochs: 15,
            layers: vec!["input".into(), "conv1".into(), "conv3".into(), PRE_LOGITS.into()],
            tasks: vec![Task::GlobalBinary],
            hidden_width: 256,
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub output_dir: Option<PathBuf>,
    /// Also evaluate the training split after every epoch.
    pub eval_train: bool,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub stethoscope: Option<StethoscopeSpec>,
    pub optimizer: RmsPropConfig,
    pub probe: ProbeSpec,
    /// Epoch after which the main network is frozen in `freeze-recover`.
    pub freeze_epoch: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            batch_size: 32,
            output_dir: None,
            eval_train: true,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            stethoscope: None,
            optimizer: RmsPropConfig::default(),
            probe: ProbeSpec::default(),
            freeze_epoch: None,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for the hint experiments: 10 epochs on the bundled digits.
    pub fn mnist(variant: HintVariant) -> Self {
        let task = match variant {
            HintVariant::OnehotHint => Task::Hint10way,
            HintVariant::PixelHint => Task::Hint100way,
        };
        Self {
            epochs: 10,
            dataset: DatasetSpec::Mnist {
                path: None,
                images: None,
                labels: None,
                hints: HintConfig {
                    variant,
                    ..HintConfig::default()
                },
            },
            stethoscope: Some(StethoscopeSpec {
                adapter: AdapterKind::Dense,
                ..StethoscopeSpec::new(task, 0.0)
            }),
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Number of classes of `task` for this dataset.
    pub fn task_classes(&self, task: Task) -> Result<usize> {
        match (&self.dataset, task) {
            (DatasetSpec::Towers { .. }, Task::GlobalBinary | Task::LocalBinary) => Ok(1),
            // interfaces 1..n-1 plus the stable class 0
            (DatasetSpec::Towers { .. }, Task::ViolationNway) => Ok(MAX_BLOCKS),
            (DatasetSpec::Mnist { hints, .. }, Task::Hint10way) if hints.variant == HintVariant::OnehotHint => Ok(10),
            (DatasetSpec::Mnist { hints, .. }, Task::Hint100way) if hints.variant == HintVariant::PixelHint => Ok(100),
            _ => Err(Error::Config(format!("task {task} does not fit the configured dataset"))),
        }
    }

    /// Rejects inconsistent settings before any data is touched.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()?;
        if let DatasetSpec::Towers { path: None, generate, .. } = &self.dataset {
            generate.validate()?;
        }
        if let DatasetSpec::Mnist { images, labels, .. } = &self.dataset {
            if images.is_some() != labels.is_some() {
                return Err(Error::Config("mnist images and labels must be given together".into()));
            }
        }
        let m = &self.model;
        if m.channels.is_empty() || m.channels.contains(&0) || m.kernel == 0 || m.stride == 0 || m.dense_width == 0 {
            return Err(Error::Config("model layers must have positive sizes".into()));
        }
        if m.toy_hidden_width == 0 {
            return Err(Error::Config("toy_hidden_width must be positive".into()));
        }
        if let Some(s) = &self.stethoscope {
            self.task_classes(s.task)?;
            if !s.lambda.0.is_finite() {
                return Err(Error::Config(format!("lambda must be finite, got {}", s.lambda)));
            }
            if s.hidden_width == 0 {
                return Err(Error::Config("stethoscope hidden_width must be positive".into()));
            }
            if s.subset.is_some() && matches!(self.dataset, DatasetSpec::Mnist { .. }) {
                return Err(Error::Config("stethoscope subsets apply to tower datasets only".into()));
            }
        }
        if self.probe.epochs == 0 || self.probe.hidden_width == 0 {
            return Err(Error::Config("probe epochs and hidden_width must be positive".into()));
        }
        for t in &self.probe.tasks {
            if !Task::TOWER_TASKS.contains(t) {
                return Err(Error::Config(format!("probe task {t} is not a tower task")));
            }
        }
        if let Some(f) = self.freeze_epoch {
            if f >= self.epochs {
                return Err(Error::Config(format!(
                    "freeze_epoch {f} must be smaller than epochs {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}
