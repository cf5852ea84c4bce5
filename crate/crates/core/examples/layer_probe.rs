//! Trains the tower network, then fits analytic probes on several layers for
//! all three tower tasks.
//!
//! cargo run --release --example layer_probe -- [per_category] [epochs]

use stethlab::exp::{per_layer_probe, train, DatasetSpec, ExperimentConfig, ExperimentData, ProbeSpec, SubsetFilter, Task};
use stethlab::towers::DatasetConfig;

fn main() -> stethlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let per_category = args.next().and_then(|a| a.parse().ok()).unwrap_or(150);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);
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
        probe: ProbeSpec {
            epochs: 5,
            ..ProbeSpec::default()
        },
        ..ExperimentConfig::default()
    };
    let data = ExperimentData::load(&cfg.dataset)?;
    let run = train(&cfg, &data)?;
    let results = per_layer_probe(&cfg, &data, &run.model, &cfg.probe.layers, &Task::TOWER_TASKS)?;
    for r in &results {
        println!("{:<11} {:<15} {:.3}", r.layer, r.task.as_str(), r.final_acc());
    }
    Ok(())
}
