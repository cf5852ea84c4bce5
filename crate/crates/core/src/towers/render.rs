use super::Block;
use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Side length of the square world window in world units.
pub const WORLD_SIZE: f64 = 9.0;

pub const BACKGROUND: f64 = 0.08;

pub const PALETTE: [[f64; 3]; 6] = [
    [0.9, 0.2, 0.2],
    [0.95, 0.8, 0.2],
    [0.2, 0.4, 0.9],
    [0.2, 0.8, 0.3],
    [0.8, 0.4, 0.9],
    [0.95, 0.55, 0.15],
];

/// Renders a front view as a `[3 × size × size]` tensor with values in `[0, 1]`.
///
/// The tower is centred horizontally and stands on the bottom row.
pub fn rasterize(blocks: &[Block], size: usize) -> Result<Tensor> {
    if size == 0 {
        return Err(Error::InvalidInput("image size must be positive".into()));
    }
    if blocks.is_empty() {
        return Err(Error::InvalidInput("cannot render an empty tower".into()));
    }
    let lo = blocks.iter().map(Block::left).fold(f64::INFINITY, f64::min);
    let hi = blocks.iter().map(Block::right).fold(f64::NEG_INFINITY, f64::max);
    let height: f64 = blocks.iter().map(|b| b.height).sum();
    if hi - lo > WORLD_SIZE || height > WORLD_SIZE {
        return Err(Error::InvalidInput(format!(
            "tower extent {:.3} x {:.3} exceeds the {WORLD_SIZE} x {WORLD_SIZE} window",
            hi - lo,
            height
        )));
    }

    let s = size as f64;
    let scale = s / WORLD_SIZE;
    let shift = -(lo + hi) / 2.0;
    let mut img = Tensor::filled(&[3, size, size], BACKGROUND);
    let mut base = 0.0;
    for b in blocks {
        let color = PALETTE
            .get(b.color_index as usize)
            .ok_or_else(|| Error::InvalidInput(format!("colour index {} out of range", b.color_index)))?;
        let c0 = pixel((b.left() + shift) * scale + s / 2.0, size);
        let c1 = pixel((b.right() + shift) * scale + s / 2.0, size);
        let r0 = pixel(base * scale, size);
        let r1 = pixel((base + b.height) * scale, size);
        base += b.height;
        let data = img.data_mut();
        for (ch, &v) in color.iter().enumerate() {
            for r in r0..r1 {
                let row = size - 1 - r;
                let off = (ch * size + row) * size;
                data[off + c0..off + c1].fill(v);
            }
        }
    }
    Ok(img)
}

fn pixel(x: f64, size: usize) -> usize {
    (x.round().max(0.0) as usize).min(size)
}

/// Interleaved 8-bit RGB (`size × size × 3`) from a `[3 × size × size]` tensor.
pub fn to_rgb_bytes(img: &Tensor) -> Vec<u8> {
    let shape = img.shape();
    let (h, w) = (shape[1], shape[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            out.push((d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}
