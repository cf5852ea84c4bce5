use rand::Rng;

use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const DIGITS: usize = 10;
pub const HINT_CLASSES: usize = 100;
/// First marker column; columns `4..24` of the top two rows carry the marker.
const MARKER_OFFSET: usize = 4;

/// Training-time hint digit: the true digit with probability `q_h`, otherwise
/// one of the nine wrong digits chosen uniformly.
pub fn sample_hint_digit<R: Rng + ?Sized>(digit: usize, q_h: f64, rng: &mut R) -> Result<usize> {
    check_digit(digit)?;
    check_quality(q_h)?;
    if rng.random::<f64>() < q_h {
        return Ok(digit);
    }
    let w = rng.random_range(0..DIGITS - 1);
    Ok(if w < digit { w } else { w + 1 })
}

/// Test-time hint digit, independent of the image.
pub fn sample_test_hint_digit<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(0..DIGITS)
}

pub fn onehot(digit: usize) -> [f64; DIGITS] {
    let mut v = [0.0; DIGITS];
    v[digit] = 1.0;
    v
}

/// One-hot encoding of [`sample_hint_digit`].
pub fn make_onehot_hint<R: Rng + ?Sized>(digit: usize, q_h: f64, rng: &mut R) -> Result<[f64; DIGITS]> {
    Ok(onehot(sample_hint_digit(digit, q_h, rng)?))
}

/// Training-time pixel hint class `10·digit + j` with `j` uniform.
pub fn assign_hint_class<R: Rng + ?Sized>(digit: usize, rng: &mut R) -> Result<usize> {
    check_digit(digit)?;
    Ok(DIGITS * digit + rng.random_range(0..DIGITS))
}

/// Test-time pixel hint class, independent of the image.
pub fn sample_test_hint_class<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(0..HINT_CLASSES)
}

/// Digit implied by a pixel hint class.
pub fn hint_class_digit(hint_class: usize) -> usize {
    hint_class / DIGITS
}

/// Pixel positions `(row, col)` of the marker for `hint_class`.
pub fn marker_pixels(hint_class: usize) -> [(usize, usize); 4] {
    let (d, j) = (hint_class / DIGITS, hint_class % DIGITS);
    let c0 = MARKER_OFFSET + 2 * d;
    let c1 = MARKER_OFFSET + 2 * j;
    [(0, c0), (0, c0 + 1), (1, c1), (1, c1 + 1)]
}

/// Sets the four marker pixels of `hint_class` to full intensity.
///
/// Accepts `[rows × cols]` or `[1 × rows × cols]` images at least 24 pixels wide.
pub fn embed_pixel_hint(image: &Tensor, hint_class: usize) -> Result<Tensor> {
    check_hint_class(hint_class)?;
    let shape = image.shape();
    let cols = match shape {
        [_, c] | [1, _, c] => *c,
        _ => {
            return Err(Error::InvalidInput(format!("expected a single-channel image, got shape {shape:?}")));
        }
    };
    if cols < MARKER_OFFSET + 2 * DIGITS || shape[shape.len() - 2] < 2 {
        return Err(Error::InvalidInput(format!("image {shape:?} too small for a hint marker")));
    }
    let mut out = image.clone();
    for (r, c) in marker_pixels(hint_class) {
        out.data_mut()[r * cols + c] = 1.0;
    }
    Ok(out)
}

pub(crate) fn burn_marker(pixels: &mut [u8], cols: usize, hint_class: usize) {
    for (r, c) in marker_pixels(hint_class) {
        pixels[r * cols + c] = u8::MAX;
    }
}

/// Fraction of predictions equal to the hint-implied digit.
pub fn hint_agreement_accuracy(predictions: &[usize], hint_digits: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidInput("hint agreement of an empty prediction set".into()));
    }
    if predictions.len() != hint_digits.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions but {} hints",
            predictions.len(),
            hint_digits.len()
        )));
    }
    let hits = predictions.iter().zip(hint_digits).filter(|(p, h)| p == h).count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn check_digit(digit: usize) -> Result<()> {
    if digit >= DIGITS {
        return Err(Error::InvalidInput(format!("digit {digit} out of range 0..=9")));
    }
    Ok(())
}

fn check_hint_class(c: usize) -> Result<()> {
    if c >= HINT_CLASSES {
        return Err(Error::InvalidInput(format!("hint class {c} out of range 0..=99")));
    }
    Ok(())
}

pub(crate) fn check_quality(q_h: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q_h) {
        return Err(Error::Config(format!("hint quality q_h must be in [0, 1], got {q_h}")));
    }
    Ok(())
}
