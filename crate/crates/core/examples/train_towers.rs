//! Trains the tower CNN on a small generated dataset and prints per-epoch test metrics.
//!
//! cargo run --release --example train_towers -- [per_category] [epochs]

use std::time::Instant;

use stethlab::exp::{train_with, DatasetSpec, ExperimentConfig, ExperimentData, SubsetFilter};
use stethlab::towers::DatasetConfig;

fn main() -> stethlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let per_category = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let cfg = ExperimentConfig {
        epochs,
        eval_train: false,
        dataset: DatasetSpec::Towers {
            path: None,
            generate: DatasetConfig {
                per_category,
                ..DatasetConfig::default()
            },
            subset: SubsetFilter::All,
        },
        ..ExperimentConfig::default()
    };
    let t = Instant::now();
    let data = ExperimentData::load(&cfg.dataset)?;
    println!("generated {} towers in {:.1?}", data.len(), t.elapsed());
    let t = Instant::now();
    let outcome = train_with(&cfg, &data, |s| {
        println!("epoch {} done after {:.1?}", s.completed_epochs(), t.elapsed());
    })?;
    for r in &outcome.records {
        println!(
            "epoch {} acc {:.3} A {:.3?} B {:.3?} C {:.3?} D {:.3?} loss {:.4}",
            r.epoch, r.acc, r.acc_by_category[0], r.acc_by_category[1], r.acc_by_category[2], r.acc_by_category[3], r.loss_main
        );
    }
    Ok(())
}
