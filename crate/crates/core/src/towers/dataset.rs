use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_scenario, rasterize, to_rgb_bytes, Category, GeneratorConfig, Subset, MAX_BLOCKS};
use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.csv";
const LABELS_HEADER: [&str; 7] = ["index", "category", "y_G", "y_L", "violation_class", "split", "subset"];
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub per_category: usize,
    pub image_size: usize,
    pub seed: u64,
    pub test_fraction: f64,
    pub min_blocks: usize,
    pub max_blocks: usize,
    pub generator: GeneratorConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            per_category: 1000,
            image_size: 48,
            seed: 0,
            test_fraction: 0.2,
            min_blocks: 3,
            max_blocks: 6,
            generator: GeneratorConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_category == 0 {
            return Err(Error::Config("per_category must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} is too small", self.image_size)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction must be in [0, 1), got {}", self.test_fraction)));
        }
        if self.min_blocks < 3 || self.min_blocks > self.max_blocks || self.max_blocks > MAX_BLOCKS {
            return Err(Error::Config(format!(
                "block range {}..={} must lie within 3..={MAX_BLOCKS}",
                self.min_blocks, self.max_blocks
            )));
        }
        Ok(())
    }

    fn train_per_category(&self) -> usize {
        self.per_category - (self.per_category as f64 * self.test_fraction).round() as usize
    }
}

/// One row of `labels.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TowerRecord {
    pub index: usize,
    pub category: Category,
    pub y_g: bool,
    pub y_l: bool,
    pub violation_class: usize,
    pub split: Split,
    pub subset: Subset,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    index: usize,
    category: Category,
    #[serde(rename = "y_G")]
    y_g: u8,
    #[serde(rename = "y_L")]
    y_l: u8,
    violation_class: usize,
    split: Split,
    subset: Subset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub count: usize,
    pub per_category_counts: BTreeMap<Category, usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub images_file: String,
    pub labels_file: String,
}

/// Rendered towers with labels, split and subset assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerDataset {
    pub manifest: DatasetManifest,
    pub records: Vec<TowerRecord>,
    /// `count × size × size × 3` interleaved RGB bytes.
    pub images: Vec<u8>,
}

/// Generates `per_category` towers for each category in order A, B, C, D.
///
/// Tower `index` draws from its own ChaCha stream, so any single tower can be
/// regenerated without the others. Within each category the first
/// `(1 - test_fraction)` share goes to the training split.
pub fn build_dataset(config: &DatasetConfig) -> Result<TowerDataset> {
    config.validate()?;
    let per = config.per_category;
    let n_train = config.train_per_category();
    let size = config.image_size;
    let mut records = Vec::with_capacity(4 * per);
    let mut images = Vec::with_capacity(4 * per * size * size * 3);
    for category in Category::ALL {
        for j in 0..per {
            let index = category.index() * per + j;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(index as u64);
            let n_blocks = rng.random_range(config.min_blocks..=config.max_blocks);
            let scenario = generate_scenario(category, n_blocks, &config.generator, &mut rng)?;
            images.extend(to_rgb_bytes(&rasterize(&scenario.blocks, size)?));
            records.push(TowerRecord {
                index,
                category,
                y_g: scenario.y_g(),
                y_l: scenario.y_l(),
                violation_class: scenario.violation_class,
                split: if j < n_train { Split::Train } else { Split::Test },
                subset: category.subset(),
            });
        }
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        count: records.len(),
        per_category_counts: Category::ALL.iter().map(|c| (*c, per)).collect(),
        train: split_indices(&records, Split::Train),
        test: split_indices(&records, Split::Test),
        images_file: IMAGES_FILE.into(),
        labels_file: LABELS_FILE.into(),
    };
    Ok(TowerDataset {
        manifest,
        records,
        images,
    })
}

fn split_indices(records: &[TowerRecord], split: Split) -> Vec<usize> {
    records.iter().filter(|r| r.split == split).map(|r| r.index).collect()
}

impl TowerDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.manifest.config.image_size
    }

    /// Indices in `split`, optionally restricted to one subset.
    pub fn indices(&self, split: Split, subset: Option<Subset>) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| r.split == split && subset.is_none_or(|s| r.subset == s))
            .map(|r| r.index)
            .collect()
    }

    /// Stacks the chosen images as a `[batch × 3 × size × size]` tensor in `[0, 1]`.
    pub fn image_tensor(&self, indices: &[usize]) -> Tensor {
        let s = self.image_size();
        let plane = s * s;
        let mut data = vec![0.0; indices.len() * 3 * plane];
        for (b, &i) in indices.iter().enumerate() {
            let src = &self.images[i * 3 * plane..(i + 1) * 3 * plane];
            let dst = &mut data[b * 3 * plane..(b + 1) * 3 * plane];
            for p in 0..plane {
                for ch in 0..3 {
                    dst[ch * plane + p] = f64::from(src[3 * p + ch]) / 255.0;
                }
            }
        }
        Tensor::new(vec![indices.len(), 3, s, s], data).expect("image tensor shape")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

        let images_path = dir.join(IMAGES_FILE);
        fs::write(&images_path, &self.images).map_err(|e| Error::io(&images_path, e))?;

        let labels_path = dir.join(LABELS_FILE);
        let csv_err = |e: csv::Error| Error::format(&labels_path, e.to_string());
        let mut w = csv::Writer::from_path(&labels_path).map_err(csv_err)?;
        for r in &self.records {
            w.serialize(LabelRow {
                index: r.index,
                category: r.category,
                y_g: r.y_g.into(),
                y_l: r.y_l.into(),
                violation_class: r.violation_class,
                split: r.split,
                subset: r.subset,
            })
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&labels_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                &manifest_path,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }

        let labels_path = dir.join(&manifest.labels_file);
        let csv_err = |e: csv::Error| Error::format(&labels_path, e.to_string());
        let mut rdr = csv::Reader::from_path(&labels_path).map_err(csv_err)?;
        if rdr.headers().map_err(csv_err)?.iter().ne(LABELS_HEADER) {
            return Err(Error::format(&labels_path, "unexpected header"));
        }
        let mut records = Vec::with_capacity(manifest.count);
        for (k, row) in rdr.deserialize::<LabelRow>().enumerate() {
            let row = row.map_err(csv_err)?;
            if row.index != k || row.y_g > 1 || row.y_l > 1 {
                return Err(Error::format(&labels_path, format!("malformed row {k}")));
            }
            records.push(TowerRecord {
                index: row.index,
                category: row.category,
                y_g: row.y_g == 1,
                y_l: row.y_l == 1,
                violation_class: row.violation_class,
                split: row.split,
                subset: row.subset,
            });
        }
        if records.len() != manifest.count {
            return Err(Error::format(
                &labels_path,
                format!("{} rows but the manifest lists {}", records.len(), manifest.count),
            ));
        }
        if split_indices(&records, Split::Train) != manifest.train || split_indices(&records, Split::Test) != manifest.test {
            return Err(Error::format(&labels_path, "split assignment disagrees with the manifest"));
        }

        let images_path = dir.join(&manifest.images_file);
        let images = fs::read(&images_path).map_err(|e| Error::io(&images_path, e))?;
        let s = manifest.config.image_size;
        if images.len() != manifest.count * s * s * 3 {
            return Err(Error::format(
                &images_path,
                format!("{} bytes, expected {}", images.len(), manifest.count * s * s * 3),
            ));
        }
        Ok(Self {
            manifest,
            records,
            images,
        })
    }
}
