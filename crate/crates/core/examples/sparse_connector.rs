//! Builds sparse connectivity patterns and shows the per-row and per-column counts.
//!
//! cargo run --release --example sparse_connector -- [in_dim] [out_dim] [n_non_zero]

use stethlab::stethoscope::{build_sparse_pattern, default_non_zero};

fn main() -> stethlab::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let in_dim = args.next().flatten().unwrap_or(300);
    let out_dim = args.next().flatten().unwrap_or(64);
    let nnz = args.next().flatten().unwrap_or_else(|| default_non_zero(in_dim, out_dim));
    let layout = build_sparse_pattern(in_dim, out_dim, nnz, 0)?;
    let mut per_row = vec![0usize; out_dim];
    let mut per_col = vec![0usize; in_dim];
    for (&r, &c) in layout.rows.iter().zip(&layout.cols) {
        per_row[r] += 1;
        per_col[c] += 1;
    }
    println!("{in_dim} -> {out_dim} with {nnz} entries");
    println!("entries per output: {:?}", per_row.iter().min().zip(per_row.iter().max()));
    println!("uses per input: {:?}", per_col.iter().min().zip(per_col.iter().max()));
    match build_sparse_pattern(6, 3, 7, 0) {
        Ok(_) => println!("(6, 3, 7) unexpectedly accepted"),
        Err(e) => println!("(6, 3, 7) rejected: {e}"),
    }
    Ok(())
}
