//! Easy-trained tower network with an adversarial local-stability stethoscope
//! that sees all categories, swept over λ. Writes sweep CSVs and a chart.
//!
//! cargo run --release --example adversarial_sweep -- [out_dir] [per_category] [epochs]

use std::path::PathBuf;

use stethlab::exp::{
    emit_plots, lambda_sweep, DatasetSpec, ExperimentConfig, ExperimentData, StethoscopeSpec, SubsetFilter, Task,
    SWEEP_FILE,
};
use stethlab::towers::DatasetConfig;

fn main() -> stethlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("adversarial"), PathBuf::from);
    let per_category = args.next().and_then(|a| a.parse().ok()).unwrap_or(150);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);
    let cfg = ExperimentConfig {
        epochs,
        eval_train: false,
        output_dir: Some(out.clone()),
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
            ..StethoscopeSpec::new(Task::LocalBinary, 0.0)
        }),
        ..ExperimentConfig::default()
    };
    let data = ExperimentData::load(&cfg.dataset)?;
    let result = lambda_sweep(&cfg, &data, &[0.0, -1.0, -4.0], 1, |c| {
        println!("lambda {} done: {:?}", c.lambda, c.status);
    })?;
    for s in &result.summary {
        let m = |v: Option<stethlab::exp::Spread>| v.map_or(f64::NAN, |v| v.mean);
        println!(
            "lambda {:>4}: easy {:.3} hard {:.3} stethoscope {:.3}",
            s.lambda,
            m(s.acc_easy),
            m(s.acc_hard),
            m(s.steth_acc)
        );
    }
    for p in emit_plots(&[out.join(SWEEP_FILE)], &out)? {
        println!("chart: {}", p.display());
    }
    Ok(())
}
