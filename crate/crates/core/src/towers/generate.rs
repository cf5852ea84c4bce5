use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{relative_margin, Block, Category, TowerScenario, MAX_BLOCKS, PALETTE, WORLD_SIZE};
use crate::{Error, Result};

const WIDTH_RANGE: (f64, f64) = (1.6, 3.0);
const HEIGHT_RANGE: (f64, f64) = (0.8, 1.2);
/// Horizontal jitter between neighbours, as a fraction of the lower width.
const JITTER: f64 = 0.45;
/// Maximum consistent lean per level for the aligned and staircase families.
const MAX_DRIFT: f64 = 0.35;
/// Overhang of the offset block past its support, as a fraction of its width.
const OVERHANG: (f64, f64) = (0.1, 0.45);
/// Maximum pull-back of each block above the offset one.
const MAX_COUNTERWEIGHT: f64 = 0.45;
/// Proposals tried per latent draw before the latent is redrawn.
const PROPOSALS_PER_LATENT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Minimum centre-to-boundary distance as a fraction of contact width.
    pub margin: f64,
    pub max_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            max_attempts: 100_000,
        }
    }
}

enum Latent {
    /// Every level shifts by a common lean plus jitter.
    Lean { sign: f64, drift: f64 },
    /// One block overhangs its support; the blocks above pull back.
    Offset { sign: f64, level: usize, overhang: f64 },
}

/// Rejection-samples an `n_blocks` tower of `category` that respects the margin
/// and fits the render window.
pub fn generate_scenario<R: Rng + ?Sized>(
    category: Category,
    n_blocks: usize,
    config: &GeneratorConfig,
    rng: &mut R,
) -> Result<TowerScenario> {
    if !(2..=MAX_BLOCKS).contains(&n_blocks) {
        return Err(Error::Config(format!("n_blocks must be in 2..={MAX_BLOCKS}, got {n_blocks}")));
    }
    if matches!(category, Category::B | Category::C) && n_blocks < 3 {
        return Err(Error::Config(format!(
            "category {category} needs at least 3 blocks, got {n_blocks}"
        )));
    }
    if !(0.0..0.5).contains(&config.margin) {
        return Err(Error::Config(format!("margin must be in [0, 0.5), got {}", config.margin)));
    }

    let mut attempts = 0;
    while attempts < config.max_attempts {
        let latent = draw_latent(category, n_blocks, rng);
        for _ in 0..PROPOSALS_PER_LATENT.min(config.max_attempts - attempts) {
            attempts += 1;
            let blocks = propose(&latent, n_blocks, rng);
            let lo = blocks.iter().map(Block::left).fold(f64::INFINITY, f64::min);
            let hi = blocks.iter().map(Block::right).fold(f64::NEG_INFINITY, f64::max);
            if hi - lo >= WORLD_SIZE {
                continue;
            }
            let Ok(margin) = relative_margin(&blocks) else { continue };
            if margin < config.margin {
                continue;
            }
            let Ok(mut scenario) = TowerScenario::from_blocks(blocks) else { continue };
            if scenario.category == category {
                assign_colors(&mut scenario.blocks, rng);
                return Ok(scenario);
            }
        }
    }
    Err(Error::SamplingExhausted {
        category: category.as_char(),
        attempts,
        constraints: format!("n_blocks {n_blocks}, margin {}", config.margin),
    })
}

fn sign<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

fn draw_latent<R: Rng + ?Sized>(category: Category, n: usize, rng: &mut R) -> Latent {
    match category {
        Category::A | Category::B => Latent::Lean {
            sign: sign(rng),
            drift: rng.random_range(0.0..MAX_DRIFT),
        },
        Category::C | Category::D => Latent::Offset {
            sign: sign(rng),
            level: if n >= 3 { rng.random_range(1..n - 1) } else { 1 },
            overhang: rng.random_range(OVERHANG.0..OVERHANG.1),
        },
    }
}

fn propose<R: Rng + ?Sized>(latent: &Latent, n: usize, rng: &mut R) -> Vec<Block> {
    let widths: Vec<f64> = (0..n).map(|_| rng.random_range(WIDTH_RANGE.0..WIDTH_RANGE.1)).collect();
    let heights: Vec<f64> = (0..n).map(|_| rng.random_range(HEIGHT_RANGE.0..HEIGHT_RANGE.1)).collect();
    let mut xs = vec![0.0];
    for i in 1..n {
        let below = xs[i - 1];
        let w_below = widths[i - 1];
        let x = match *latent {
            Latent::Lean { sign, drift } => below + (sign * drift + rng.random_range(-JITTER..JITTER)) * w_below,
            Latent::Offset { sign, level, overhang } => {
                if i == level {
                    below + sign * (w_below / 2.0 + overhang * widths[i])
                } else if i > level {
                    below - sign * rng.random_range(0.0..MAX_COUNTERWEIGHT) * w_below
                } else {
                    below + rng.random_range(-JITTER..JITTER) * w_below
                }
            }
        };
        xs.push(x);
    }
    (0..n).map(|i| Block::new(xs[i], widths[i], heights[i])).collect()
}

/// Random palette colours with no two touching blocks sharing one.
fn assign_colors<R: Rng + ?Sized>(blocks: &mut [Block], rng: &mut R) {
    let k = PALETTE.len() as u8;
    let mut prev: Option<u8> = None;
    for b in blocks {
        let c = match prev {
            None => rng.random_range(0..k),
            Some(p) => (p + rng.random_range(1..k)) % k,
        };
        b.color_index = c;
        prev = Some(c);
    }
}
