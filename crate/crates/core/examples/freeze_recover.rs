//! Adversarial tower training, then a θ-freeze while the stethoscope keeps
//! learning next to a fresh analytic head.
//!
//! cargo run --release --example freeze_recover -- [per_category] [epochs] [freeze_epoch]

use stethlab::exp::{
    freeze_recovery, DatasetSpec, ExperimentConfig, ExperimentData, Phase, StethoscopeSpec, SubsetFilter, Task,
};
use stethlab::towers::DatasetConfig;

fn main() -> stethlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let per_category = args.next().and_then(|a| a.parse().ok()).unwrap_or(150);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(6);
    let freeze_epoch = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let cfg = ExperimentConfig {
        epochs,
        freeze_epoch: Some(freeze_epoch),
        dataset: DatasetSpec::Towers {
            path: None,
            generate: DatasetConfig {
                per_category,
                ..DatasetConfig::default()
            },
            subset: SubsetFilter::Easy,
        },
        stethoscope: Some(StethoscopeSpec {
            subset: Some(SubsetFilter::All),
            ..StethoscopeSpec::new(Task::LocalBinary, -4.0)
        }),
        ..ExperimentConfig::default()
    };
    let data = ExperimentData::load(&cfg.dataset)?;
    let out = freeze_recovery(&cfg, &data)?;
    for r in &out.rows {
        let phase = match r.phase {
            Phase::Joint => "joint ",
            Phase::Frozen => "frozen",
        };
        let base = r.baseline_acc.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        println!("epoch {:>2} {phase} stethoscope {:.3} baseline {base}", r.epoch, r.steth_acc);
    }
    Ok(())
}
