//! Hard-trained tower network with an auxiliary violation-interface head,
//! comparing λ = 0 with positive weights.
//!
//! cargo run --release --example auxiliary_sweep -- [per_category] [epochs]

use stethlab::exp::{lambda_sweep, DatasetSpec, ExperimentConfig, ExperimentData, StethoscopeSpec, SubsetFilter, Task};
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
            subset: SubsetFilter::Hard,
        },
        stethoscope: Some(StethoscopeSpec::new(Task::ViolationNway, 0.0)),
        ..ExperimentConfig::default()
    };
    let data = ExperimentData::load(&cfg.dataset)?;
    let result = lambda_sweep(&cfg, &data, &[0.0, 2.0, 256.0], 1, |_| {})?;
    for c in &result.cells {
        match &c.metrics {
            Some(m) => println!(
                "lambda {:>5}: hard {:.3} category mean {:.3} violation head {:.3}",
                c.lambda,
                m.acc_hard.unwrap_or(f64::NAN),
                m.category_mean.unwrap_or(f64::NAN),
                m.steth_acc.unwrap_or(f64::NAN)
            ),
            None => println!("lambda {}: {}", c.lambda, c.error.as_deref().unwrap_or("no metrics")),
        }
    }
    Ok(())
}
