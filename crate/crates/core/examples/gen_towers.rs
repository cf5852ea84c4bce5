//! Generates a tower dataset, saves it, reloads it and prints category statistics.
//!
//! cargo run --release --example gen_towers -- [out_dir] [per_category]

use std::path::PathBuf;

use stethlab::towers::{build_dataset, Category, DatasetConfig, Split, TowerDataset};

fn main() -> stethlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("towers"), PathBuf::from);
    let per_category = args.next().and_then(|a| a.parse().ok()).unwrap_or(50);
    let ds = build_dataset(&DatasetConfig {
        per_category,
        ..DatasetConfig::default()
    })?;
    ds.save(&out)?;
    let back = TowerDataset::load(&out)?;
    assert_eq!(back, ds);
    println!("{} towers in {}", ds.len(), out.display());
    for c in Category::ALL {
        let of = |split| ds.records.iter().filter(|r| r.category == c && r.split == split).count();
        let classes: std::collections::BTreeSet<usize> =
            ds.records.iter().filter(|r| r.category == c).map(|r| r.violation_class).collect();
        println!(
            "{c}: {} train, {} test, labels (y_G, y_L) = {:?}, violation classes {classes:?}",
            of(Split::Train),
            of(Split::Test),
            c.labels()
        );
    }
    Ok(())
}
