//! Digit classification with injected hints: IDX ingestion, one-hot and pixel
//! hints, and the two small models used to study hint reliance.

mod hints;
mod idx;
mod models;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::towers::Split;
use crate::{Error, Result};

pub use hints::{
    assign_hint_class, embed_pixel_hint, hint_agreement_accuracy, hint_class_digit, make_onehot_hint, marker_pixels,
    onehot, sample_hint_digit, sample_test_hint_class, sample_test_hint_digit, DIGITS, HINT_CLASSES,
};
pub use idx::{load_idx, IdxDataset};
pub use models::{build_toy_model, HintVariant, OnehotHintNet, PixelHintNet, HIDDEN, HINT_ENCODING, IMAGE_ENCODING};

#[cfg(test)]
mod tests;

const FORMAT_VERSION: u32 = 1;
const SIDE: usize = 28;

/// Location of the bundled 10 000-digit subset relative to this crate.
pub fn bundled_paths() -> (PathBuf, PathBuf) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mnist");
    (
        dir.join("digits10k-images-idx3-ubyte.gz"),
        dir.join("digits10k-labels-idx1-ubyte.gz"),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HintConfig {
    pub variant: HintVariant,
    /// Probability that a training hint names the true digit.
    pub q_h: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for HintConfig {
    fn default() -> Self {
        Self {
            variant: HintVariant::OnehotHint,
            q_h: 1.0,
            train_count: 8000,
            test_count: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintManifest {
    pub format_version: u32,
    pub config: HintConfig,
    pub count: usize,
    /// Source row of each sample in the IDX file.
    pub source_rows: Vec<usize>,
}

/// Digits paired with hints, split into train and test.
///
/// `hints` holds hint digits for [`HintVariant::OnehotHint`] and hint classes
/// for [`HintVariant::PixelHint`]; in the latter case the marker is already
/// burned into `images`.
#[derive(Debug, Clone, PartialEq)]
pub struct HintedDataset {
    pub manifest: HintManifest,
    /// `count × 28 × 28` bytes.
    pub images: Vec<u8>,
    pub digits: Vec<usize>,
    pub hints: Vec<usize>,
    pub splits: Vec<Split>,
}

/// Draws a seeded train/test subsample of `source` and attaches hints.
///
/// Sample `i` draws its hint from ChaCha stream `i`, so samples are independent
/// of each other and of the subsample size.
pub fn build_hinted_dataset(source: &IdxDataset, config: &HintConfig) -> Result<HintedDataset> {
    hints::check_quality(config.q_h)?;
    if source.image_shape() != (SIDE, SIDE) {
        return Err(Error::InvalidInput(format!(
            "expected 28 x 28 digits, got {:?}",
            source.image_shape()
        )));
    }
    let total = config.train_count + config.test_count;
    if config.train_count == 0 || config.test_count == 0 || total > source.len() {
        return Err(Error::Config(format!(
            "train_count {} + test_count {} must be positive and fit in {} samples",
            config.train_count,
            config.test_count,
            source.len()
        )));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    order.truncate(total);

    let mut ds = HintedDataset {
        manifest: HintManifest {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            count: total,
            source_rows: order.clone(),
        },
        images: Vec::with_capacity(total * SIDE * SIDE),
        digits: Vec::with_capacity(total),
        hints: Vec::with_capacity(total),
        splits: Vec::with_capacity(total),
    };
    for (i, &row) in order.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let digit = usize::from(source.labels[row]);
        let split = if i < config.train_count { Split::Train } else { Split::Test };
        let mut pixels = source.pixels(row);
        let hint = match (config.variant, split) {
            (HintVariant::OnehotHint, Split::Train) => sample_hint_digit(digit, config.q_h, &mut rng)?,
            (HintVariant::OnehotHint, Split::Test) => sample_test_hint_digit(&mut rng),
            (HintVariant::PixelHint, Split::Train) => {
                let d = sample_hint_digit(digit, config.q_h, &mut rng)?;
                assign_hint_class(d, &mut rng)?
            }
            (HintVariant::PixelHint, Split::Test) => sample_test_hint_class(&mut rng),
        };
        if config.variant == HintVariant::PixelHint {
            hints::burn_marker(&mut pixels, SIDE, hint);
        }
        ds.images.extend(pixels);
        ds.digits.push(digit);
        ds.hints.push(hint);
        ds.splits.push(split);
    }
    Ok(ds)
}

impl HintedDataset {
    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    pub fn variant(&self) -> HintVariant {
        self.manifest.config.variant
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Digit each hint points at.
    pub fn hint_digit(&self, i: usize) -> usize {
        match self.variant() {
            HintVariant::OnehotHint => self.hints[i],
            HintVariant::PixelHint => hint_class_digit(self.hints[i]),
        }
    }

    /// `[batch × 1 × 28 × 28]` images in `[0, 1]`.
    pub fn image_tensor(&self, indices: &[usize]) -> Tensor {
        let plane = SIDE * SIDE;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend(self.images[i * plane..(i + 1) * plane].iter().map(|&p| f64::from(p) / 255.0));
        }
        Tensor::new(vec![indices.len(), 1, SIDE, SIDE], data).expect("image tensor shape")
    }

    /// `[batch × 10]` one-hot hint vectors.
    pub fn hint_tensor(&self, indices: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(&[indices.len(), DIGITS]);
        for (b, &i) in indices.iter().enumerate() {
            t.set(&[b, self.hint_digit(i)], 1.0);
        }
        t
    }

    fn hint_column(&self) -> &'static str {
        match self.variant() {
            HintVariant::OnehotHint => "hint_digit",
            HintVariant::PixelHint => "hint_class",
        }
    }

    /// Writes `manifest.json`, `images.bin` and `labels.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::format(&mpath, e.to_string()))?;
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let ipath = dir.join("images.bin");
        fs::write(&ipath, &self.images).map_err(|e| Error::io(&ipath, e))?;

        let lpath = dir.join("labels.csv");
        let csv_err = |e: csv::Error| Error::format(&lpath, e.to_string());
        let mut w = csv::Writer::from_path(&lpath).map_err(csv_err)?;
        w.write_record(["index", "split", "digit", self.hint_column()]).map_err(csv_err)?;
        for i in 0..self.len() {
            let split = match self.splits[i] {
                Split::Train => "train",
                Split::Test => "test",
            };
            w.write_record([i.to_string(), split.into(), self.digits[i].to_string(), self.hints[i].to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&lpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: HintManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(&mpath, format!("unsupported format version {}", manifest.format_version)));
        }
        let n = manifest.count;
        let mut ds = HintedDataset {
            manifest,
            images: Vec::new(),
            digits: Vec::with_capacity(n),
            hints: Vec::with_capacity(n),
            splits: Vec::with_capacity(n),
        };

        let lpath = dir.join("labels.csv");
        let csv_err = |e: csv::Error| Error::format(&lpath, e.to_string());
        let mut rdr = csv::Reader::from_path(&lpath).map_err(csv_err)?;
        let expected = ["index", "split", "digit", ds.hint_column()];
        if rdr.headers().map_err(csv_err)?.iter().ne(expected) {
            return Err(Error::format(&lpath, format!("expected header {}", expected.join(","))));
        }
        let hint_limit = match ds.variant() {
            HintVariant::OnehotHint => DIGITS,
            HintVariant::PixelHint => HINT_CLASSES,
        };
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = || Error::format(&lpath, format!("malformed row {k}"));
            let num = |j: usize| rec[j].parse::<usize>().map_err(|_| bad());
            let split = match &rec[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad()),
            };
            let (index, digit, hint) = (num(0)?, num(2)?, num(3)?);
            if index != k || digit >= DIGITS || hint >= hint_limit {
                return Err(bad());
            }
            ds.digits.push(digit);
            ds.hints.push(hint);
            ds.splits.push(split);
        }
        if ds.len() != n {
            return Err(Error::format(&lpath, format!("{} rows but the manifest lists {n}", ds.len())));
        }
        let ipath = dir.join("images.bin");
        ds.images = fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
        if ds.images.len() != n * SIDE * SIDE {
            return Err(Error::format(&ipath, format!("{} bytes, expected {}", ds.images.len(), n * SIDE * SIDE)));
        }
        Ok(ds)
    }
}
