use std::sync::Arc;

use super::config::{DatasetSpec, SubsetFilter, Task};
use crate::autodiff::Tensor;
use crate::mnist::{self, HintVariant, HintedDataset};
use crate::nn::NetInput;
use crate::stethoscope::Targets;
use crate::towers::{build_dataset, Category, Split, TowerDataset};
use crate::{Error, Result};

/// A dataset loaded for training, shared cheaply between runs.
#[derive(Debug, Clone)]
pub enum ExperimentData {
    Towers(Arc<TowerDataset>),
    Mnist(Arc<HintedDataset>),
}

impl ExperimentData {
    /// Loads or generates the data described by `spec`.
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        match spec {
            DatasetSpec::Towers { path: Some(p), .. } => Ok(Self::Towers(Arc::new(TowerDataset::load(p)?))),
            DatasetSpec::Towers { path: None, generate, .. } => Ok(Self::Towers(Arc::new(build_dataset(generate)?))),
            DatasetSpec::Mnist { path: Some(p), .. } => Ok(Self::Mnist(Arc::new(HintedDataset::load(p)?))),
            DatasetSpec::Mnist {
                path: None,
                images,
                labels,
                hints,
            } => {
                let (bi, bl) = mnist::bundled_paths();
                let idx = mnist::load_idx(images.as_deref().unwrap_or(&bi), labels.as_deref().unwrap_or(&bl))?;
                Ok(Self::Mnist(Arc::new(mnist::build_hinted_dataset(&idx, hints)?)))
            }
        }
    }

    pub fn towers(&self) -> Option<&TowerDataset> {
        match self {
            Self::Towers(t) => Some(t),
            Self::Mnist(_) => None,
        }
    }

    pub fn mnist(&self) -> Option<&HintedDataset> {
        match self {
            Self::Mnist(m) => Some(m),
            Self::Towers(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Towers(t) => t.len(),
            Self::Mnist(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        match self {
            Self::Towers(t) => t.indices(split, None),
            Self::Mnist(m) => m.indices(split),
        }
    }

    /// Tower category of sample `i`; digits have none.
    pub fn category(&self, i: usize) -> Option<Category> {
        self.towers().map(|t| t.records[i].category)
    }

    /// Whether sample `i` passes `filter`; every digit passes.
    pub fn includes(&self, i: usize, filter: SubsetFilter) -> bool {
        self.category(i).is_none_or(|c| filter.includes(c))
    }

    pub fn input(&self, indices: &[usize]) -> NetInput {
        match self {
            Self::Towers(t) => NetInput::images(t.image_tensor(indices)),
            Self::Mnist(m) => NetInput {
                images: m.image_tensor(indices),
                hints: (m.variant() == HintVariant::OnehotHint).then(|| m.hint_tensor(indices)),
            },
        }
    }

    /// Global stability for towers, the true digit for MNIST.
    pub fn main_targets(&self, indices: &[usize]) -> Targets {
        match self {
            Self::Towers(t) => Targets::Binary(indices.iter().map(|&i| f64::from(u8::from(t.records[i].y_g))).collect()),
            Self::Mnist(m) => Targets::Classes(indices.iter().map(|&i| m.digits[i]).collect()),
        }
    }

    pub fn task_targets(&self, task: Task, indices: &[usize]) -> Result<Targets> {
        let mismatch = || Error::Config(format!("task {task} does not fit the loaded dataset"));
        match (self, task) {
            (Self::Towers(t), Task::GlobalBinary) => Ok(binary(indices, |i| t.records[i].y_g)),
            (Self::Towers(t), Task::LocalBinary) => Ok(binary(indices, |i| t.records[i].y_l)),
            (Self::Towers(t), Task::ViolationNway) => {
                Ok(Targets::Classes(indices.iter().map(|&i| t.records[i].violation_class).collect()))
            }
            (Self::Mnist(m), Task::Hint10way) if m.variant() == HintVariant::OnehotHint => {
                Ok(Targets::Classes(indices.iter().map(|&i| m.hints[i]).collect()))
            }
            (Self::Mnist(m), Task::Hint100way) if m.variant() == HintVariant::PixelHint => {
                Ok(Targets::Classes(indices.iter().map(|&i| m.hints[i]).collect()))
            }
            _ => Err(mismatch()),
        }
    }

    /// Digits named by the hints of `indices`, for MNIST data.
    pub fn hint_digits(&self, indices: &[usize]) -> Option<Vec<usize>> {
        self.mnist().map(|m| indices.iter().map(|&i| m.hint_digit(i)).collect())
    }

    /// Per-category sample counts of `indices`.
    pub fn category_counts(&self, indices: &[usize]) -> [usize; 4] {
        let mut counts = [0; 4];
        for &i in indices {
            if let Some(c) = self.category(i) {
                counts[c.index()] += 1;
            }
        }
        counts
    }

    /// Stacked images of `indices` in network input layout.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        self.input(indices).images
    }
}

fn binary(indices: &[usize], label: impl Fn(usize) -> bool) -> Targets {
    Targets::Binary(indices.iter().map(|&i| if label(i) { 1.0 } else { 0.0 }).collect())
}
