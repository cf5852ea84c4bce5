//! Planar single-stranded block towers with an exact quasi-static stability oracle.
//!
//! Blocks are stacked bottom to top; interface `i` (1-indexed) is the contact
//! between block `i - 1` and block `i`. A tower is globally stable when, at every
//! interface, the centre of mass of everything above lies strictly inside the
//! contact interval. It is locally stable when each block's own centre lies
//! strictly inside the contact it rests on. Label value 1 means unstable.

mod dataset;
mod generate;
pub mod render;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use dataset::{build_dataset, DatasetConfig, DatasetManifest, Split, TowerDataset, TowerRecord};
pub use generate::{generate_scenario, GeneratorConfig};
pub use render::{rasterize, to_rgb_bytes, PALETTE, WORLD_SIZE};

#[cfg(test)]
mod tests;

/// Largest supported tower; violation classes lie in `0..MAX_BLOCKS`.
pub const MAX_BLOCKS: usize = 6;

/// One rectangular block of uniform density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub center_x: f64,
    pub width: f64,
    pub height: f64,
    pub color_index: u8,
}

impl Block {
    pub fn new(center_x: f64, width: f64, height: f64) -> Self {
        Self {
            center_x,
            width,
            height,
            color_index: 0,
        }
    }

    pub fn mass(&self) -> f64 {
        self.width * self.height
    }

    pub fn left(&self) -> f64 {
        self.center_x - self.width / 2.0
    }

    pub fn right(&self) -> f64 {
        self.center_x + self.width / 2.0
    }
}

/// Open interval `(lo, hi)` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo < x && x < self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Distance from `x` to the nearer endpoint.
    pub fn boundary_distance(&self, x: f64) -> f64 {
        (x - self.lo).abs().min((x - self.hi).abs())
    }
}

/// Overlap of two stacked blocks; touching at a point counts as no contact.
pub fn contact_interval(lower: &Block, upper: &Block) -> Option<Interval> {
    let lo = lower.left().max(upper.left());
    let hi = lower.right().min(upper.right());
    (hi > lo).then_some(Interval { lo, hi })
}

/// Mass-weighted mean position of blocks `i..` (everything above interface `i`).
pub fn com_above(blocks: &[Block], i: usize) -> f64 {
    assert!(i >= 1 && i < blocks.len(), "interface {i} out of range");
    let above = &blocks[i..];
    let m: f64 = above.iter().map(Block::mass).sum();
    above.iter().map(|b| b.mass() * b.center_x).sum::<f64>() / m
}

fn contacts(blocks: &[Block]) -> Result<Vec<Interval>> {
    if blocks.len() < 2 {
        return Err(Error::InvalidInput("a tower needs at least two blocks".into()));
    }
    (1..blocks.len())
        .map(|i| {
            contact_interval(&blocks[i - 1], &blocks[i])
                .ok_or_else(|| Error::InvalidInput(format!("interface {i} has no contact")))
        })
        .collect()
}

/// Per-interface global violations, bottom interface first.
pub fn global_violations(blocks: &[Block]) -> Result<Vec<bool>> {
    Ok(contacts(blocks)?
        .iter()
        .enumerate()
        .map(|(k, c)| !c.contains(com_above(blocks, k + 1)))
        .collect())
}

/// Per-interface local violations, bottom interface first.
pub fn local_violations(blocks: &[Block]) -> Result<Vec<bool>> {
    Ok(contacts(blocks)?
        .iter()
        .enumerate()
        .map(|(k, c)| !c.contains(blocks[k + 1].center_x))
        .collect())
}

/// Smallest distance of any global or local centre to its contact boundary,
/// relative to that contact's width.
pub fn relative_margin(blocks: &[Block]) -> Result<f64> {
    let cs = contacts(blocks)?;
    let mut m = f64::INFINITY;
    for (k, c) in cs.iter().enumerate() {
        let g = c.boundary_distance(com_above(blocks, k + 1));
        let l = c.boundary_distance(blocks[k + 1].center_x);
        m = m.min(g.min(l) / c.width());
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    A,
    B,
    C,
    D,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::A, Category::B, Category::C, Category::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_char(self) -> char {
        ['A', 'B', 'C', 'D'][self.index()]
    }

    /// Whether global and local cues agree for this category.
    pub fn subset(self) -> Subset {
        match self {
            Category::A | Category::D => Subset::Easy,
            Category::B | Category::C => Subset::Hard,
        }
    }

    pub fn labels(self) -> (bool, bool) {
        match self {
            Category::A => (false, false),
            Category::B => (true, false),
            Category::C => (false, true),
            Category::D => (true, true),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Category::A),
            "B" => Ok(Category::B),
            "C" => Ok(Category::C),
            "D" => Ok(Category::D),
            _ => Err(Error::InvalidInput(format!("unknown category {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Easy,
    Hard,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Easy => "easy",
            Subset::Hard => "hard",
        }
    }
}

/// Maps violation patterns to a category; `None` when both cues fire but the
/// lowest global violation is not also a local one.
pub fn categorize(global: &[bool], local: &[bool]) -> Option<Category> {
    let y_g = global.iter().any(|v| *v);
    let y_l = local.iter().any(|v| *v);
    match (y_g, y_l) {
        (false, false) => Some(Category::A),
        (true, false) => Some(Category::B),
        (false, true) => Some(Category::C),
        (true, true) => {
            let k = global.iter().position(|v| *v)?;
            local[k].then_some(Category::D)
        }
    }
}

/// 0 for a globally stable tower, else the lowest violated interface (1-indexed).
pub fn violation_interface(global: &[bool]) -> usize {
    global.iter().position(|v| *v).map_or(0, |k| k + 1)
}

/// A labelled tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerScenario {
    pub blocks: Vec<Block>,
    pub global_violations: Vec<bool>,
    pub local_violations: Vec<bool>,
    pub category: Category,
    pub violation_class: usize,
}

impl TowerScenario {
    /// Labels `blocks`; fails for missing contacts and for rejected patterns.
    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self> {
        let global_violations = global_violations(&blocks)?;
        let local_violations = local_violations(&blocks)?;
        let category = categorize(&global_violations, &local_violations).ok_or_else(|| {
            Error::InvalidInput("global and local violations sit at different interfaces".into())
        })?;
        let violation_class = violation_interface(&global_violations);
        Ok(Self {
            blocks,
            global_violations,
            local_violations,
            category,
            violation_class,
        })
    }

    pub fn y_g(&self) -> bool {
        self.global_violations.iter().any(|v| *v)
    }

    pub fn y_l(&self) -> bool {
        self.local_violations.iter().any(|v| *v)
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }
}
