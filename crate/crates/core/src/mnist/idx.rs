use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::autodiff::Tensor;
use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Digit images with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxDataset {
    /// `[N × rows × cols]` intensities in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    /// 8-bit pixels of image `i`, row-major.
    pub fn pixels(&self, i: usize) -> Vec<u8> {
        let (r, c) = self.image_shape();
        self.images.data()[i * r * c..(i + 1) * r * c]
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect()
    }
}

/// Reads an image/label pair in IDX format; gzip input is detected by its header.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<IdxDataset> {
    let images = read_maybe_gz(images_path)?;
    let labels = read_maybe_gz(labels_path)?;
    let (n, rows, cols, pixels) = parse_images(&images).map_err(|m| Error::format(images_path, m))?;
    let labels = parse_labels(&labels).map_err(|m| Error::format(labels_path, m))?;
    if labels.len() != n {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l > 9) {
        return Err(Error::format(labels_path, format!("label {i} is {l}, expected 0..=9")));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok(IdxDataset {
        images: Tensor::new(vec![n, rows, cols], data)?,
        labels,
    })
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], words: usize) -> Result<Vec<u32>, String> {
    if bytes.len() < 4 * words {
        return Err(format!("truncated header: {} bytes", bytes.len()));
    }
    Ok(bytes[..4 * words]
        .chunks_exact(4)
        .map(|w| u32::from_be_bytes([w[0], w[1], w[2], w[3]]))
        .collect())
}

pub(crate) fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), String> {
    let h = header(bytes, 4)?;
    if h[0] != IMAGES_MAGIC {
        return Err(format!("bad magic {:#010x}, expected {IMAGES_MAGIC:#010x}", h[0]));
    }
    let (n, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() != need {
        return Err(format!("{} pixel bytes, header promises {need}", body.len()));
    }
    Ok((n, rows, cols, body))
}

pub(crate) fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, String> {
    let h = header(bytes, 2)?;
    if h[0] != LABELS_MAGIC {
        return Err(format!("bad magic {:#010x}, expected {LABELS_MAGIC:#010x}", h[0]));
    }
    let n = h[1] as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(format!("{} label bytes, header promises {n}", body.len()));
    }
    Ok(body.to_vec())
}
