//! Builds both hinted digit datasets and trains the one-hot hint model with and
//! without an adversarial stethoscope on the hint encoding.
//!
//! cargo run --release --example mnist_hints -- [epochs] [lambda]

use stethlab::exp::{train, ExperimentConfig, ExperimentData};
use stethlab::mnist::HintVariant;

fn main() -> stethlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let lambda: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(-2.0);

    let pixel = ExperimentData::load(&ExperimentConfig::mnist(HintVariant::PixelHint).dataset)?;
    let m = pixel.mnist().expect("digit dataset");
    println!("pixel hints: {} digits, first hint classes {:?}", m.len(), (0..5).map(|i| m.hints[i]).collect::<Vec<_>>());

    let base = ExperimentConfig {
        epochs,
        eval_train: false,
        ..ExperimentConfig::mnist(HintVariant::OnehotHint)
    };
    let data = ExperimentData::load(&base.dataset)?;
    for l in [0.0, lambda] {
        let cfg = stethlab::exp::with_lambda(&base, l)?;
        let out = train(&cfg, &data)?;
        let m = out.final_metrics().expect("at least one epoch");
        println!(
            "lambda {l:>5}: digit accuracy {:.4}, hint agreement {:.4}, stethoscope {:.4}",
            m.acc,
            m.hint_acc.unwrap_or(f64::NAN),
            m.steth_acc.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
