//! Renders accuracy-vs-λ charts from sweep CSVs given on the command line.
//!
//! cargo run --release --example plot_sweep -- <out_dir> <sweep.csv>...

use std::path::PathBuf;

use stethlab::exp::emit_plots;

fn main() -> stethlab::Result<()> {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let Some(out) = args.next() else {
        eprintln!("usage: plot_sweep <out_dir> <sweep.csv>...");
        std::process::exit(2);
    };
    let csvs: Vec<PathBuf> = args.collect();
    for p in emit_plots(&csvs, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
