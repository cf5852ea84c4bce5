use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::SparseLayout;
use crate::{Error, Result};

/// Connectivity of a sparse `[out_dim × in_dim]` matrix with `n_non_zero` entries.
///
/// Every input column is used at least once and every output row receives
/// exactly `n_non_zero / out_dim` distinct columns. Columns are dealt in
/// shuffled passes over `0..in_dim`; the first pass covers all of them.
pub fn build_sparse_pattern(in_dim: usize, out_dim: usize, n_non_zero: usize, seed: u64) -> Result<SparseLayout> {
    if in_dim == 0 || out_dim == 0 || n_non_zero == 0 {
        return Err(Error::Config(format!(
            "sparse connector dimensions must be positive (in_dim {in_dim}, out_dim {out_dim}, n_non_zero {n_non_zero})"
        )));
    }
    if n_non_zero % out_dim != 0 {
        return Err(Error::Config(format!(
            "n_non_zero {n_non_zero} is not a multiple of out_dim {out_dim}"
        )));
    }
    if n_non_zero < in_dim {
        return Err(Error::Config(format!(
            "n_non_zero {n_non_zero} is smaller than in_dim {in_dim}"
        )));
    }
    let per_row = n_non_zero / out_dim;
    if per_row > in_dim {
        return Err(Error::Config(format!(
            "n_non_zero {n_non_zero} needs {per_row} distinct inputs per output but in_dim is {in_dim}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<usize> = Vec::with_capacity(n_non_zero);
    while cols.len() < n_non_zero {
        let mut pass: Vec<usize> = (0..in_dim).collect();
        pass.shuffle(&mut rng);
        // the row straddling the pass boundary must not repeat a column
        let filled = cols.len() % per_row;
        if filled > 0 {
            let open: HashSet<usize> = cols[cols.len() - filled..].iter().copied().collect();
            let need = per_row - filled;
            let (mut head, mut tail): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
            for c in pass {
                if head.len() < need && !open.contains(&c) {
                    head.push(c);
                } else {
                    tail.push(c);
                }
            }
            head.extend(tail);
            pass = head;
        }
        let take = (n_non_zero - cols.len()).min(in_dim);
        cols.extend_from_slice(&pass[..take]);
    }
    let rows = (0..n_non_zero).map(|k| k / per_row).collect();
    Ok(SparseLayout {
        rows,
        cols,
        out_dim,
        in_dim,
    })
}
