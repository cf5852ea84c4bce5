use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stethlab::exp::{
    emit_plots, freeze_recovery, lambda_sweep, per_layer_probe, run_experiment, train, write_probe_csv, DatasetSpec,
    ExperimentConfig, ExperimentData, Model, StethoscopeSpec, SubsetFilter, Task, PROBE_FILE,
};
use stethlab::mnist::{bundled_paths, build_hinted_dataset, load_idx, HintConfig, HintVariant};
use stethlab::stethoscope::Lambda;
use stethlab::towers::{build_dataset, DatasetConfig};
use stethlab::{Error, Result};

#[derive(Parser)]
#[command(name = "stethlab", version, about = "Stethoscope experiments on block towers and hinted digits")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags below override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stethoscope weight; repeat for sweeps.
    #[arg(long = "lambda", global = true, allow_negative_numbers = true)]
    lambdas: Vec<f64>,
    /// Tower categories that train the main network.
    #[arg(long, global = true)]
    subset: Option<SubsetFilter>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Stethoscope task; adds a stethoscope section when the config has none.
    #[arg(long, global = true)]
    task: Option<Task>,
    /// Tower categories that train the stethoscope.
    #[arg(long, global = true)]
    steth_subset: Option<SubsetFilter>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a tower dataset directory.
    GenTowers {
        #[arg(long, default_value_t = 1000)]
        per_category: usize,
        #[arg(long, default_value_t = 48)]
        image_size: usize,
    },
    /// Build a hinted digit dataset directory.
    PrepMnist {
        #[arg(long, default_value = "onehot_hint", value_parser = parse_variant)]
        variant: HintVariant,
        #[arg(long, default_value_t = 1.0)]
        q_h: f64,
        /// IDX image file (gzip allowed); defaults to the bundled subset.
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
    },
    /// Train one run.
    Train,
    /// Train every (lambda, repeat) cell.
    Sweep {
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Train the main network, then fit analytic probes per layer and task.
    Probe {
        /// Comma-separated layer names; defaults to the config's probe layers.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        /// Restore the main network from a checkpoint instead of training it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Adversarial training, then freeze the main network and retrain the stethoscope.
    FreezeRecover {
        #[arg(long)]
        freeze_epoch: Option<usize>,
    },
    /// Render accuracy-vs-lambda charts from sweep CSVs.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<HintVariant, String> {
    match s {
        "onehot_hint" => Ok(HintVariant::OnehotHint),
        "pixel_hint" => Ok(HintVariant::PixelHint),
        _ => Err(format!("unknown variant {s:?}; expected onehot_hint or pixel_hint")),
    }
}

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = common.epochs {
        cfg.epochs = e;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(sub) = common.subset {
        match &mut cfg.dataset {
            DatasetSpec::Towers { subset, .. } => *subset = sub,
            DatasetSpec::Mnist { .. } => return Err(Error::Config("--subset applies to tower datasets".into())),
        }
    }
    if let Some(task) = common.task {
        match &mut cfg.stethoscope {
            Some(s) => s.task = task,
            None => cfg.stethoscope = Some(StethoscopeSpec::new(task, 0.0)),
        }
    }
    if let Some(sub) = common.steth_subset {
        cfg.stethoscope
            .as_mut()
            .ok_or_else(|| Error::Config("--steth-subset needs a stethoscope".into()))?
            .subset = Some(sub);
    }
    Ok(cfg)
}

fn single_lambda(cfg: &mut ExperimentConfig, lambdas: &[f64]) -> Result<()> {
    match lambdas {
        [] => Ok(()),
        [l] => {
            cfg.stethoscope
                .as_mut()
                .ok_or_else(|| Error::Config("--lambda needs a stethoscope (set --task or a config section)".into()))?
                .lambda = Lambda(*l);
            Ok(())
        }
        _ => Err(Error::Config("this command takes a single --lambda".into())),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::GenTowers {
            per_category,
            image_size,
        } => {
            let out = common.out.clone().ok_or_else(|| Error::Config("gen-towers needs --out".into()))?;
            let mut gen = match base_config(common)?.dataset {
                DatasetSpec::Towers { generate, .. } if common.config.is_some() => generate,
                _ => DatasetConfig {
                    per_category,
                    image_size,
                    ..DatasetConfig::default()
                },
            };
            if let Some(s) = common.seed {
                gen.seed = s;
            }
            let ds = build_dataset(&gen)?;
            ds.save(&out)?;
            println!("wrote {} towers to {}", ds.len(), out.display());
        }
        Command::PrepMnist {
            variant,
            q_h,
            images,
            labels,
        } => {
            let out = common.out.clone().ok_or_else(|| Error::Config("prep-mnist needs --out".into()))?;
            let (bi, bl) = bundled_paths();
            let idx = load_idx(&images.unwrap_or(bi), &labels.unwrap_or(bl))?;
            let cfg = HintConfig {
                variant,
                q_h,
                seed: common.seed.unwrap_or(0),
                ..HintConfig::default()
            };
            let ds = build_hinted_dataset(&idx, &cfg)?;
            ds.save(&out)?;
            println!("wrote {} hinted digits to {}", ds.len(), out.display());
        }
        Command::Train => {
            let mut cfg = base_config(common)?;
            single_lambda(&mut cfg, &common.lambdas)?;
            let out = run_experiment(&cfg)?;
            for r in &out.records {
                println!(
                    "epoch {:>3} {:<5} acc {:.4} A {} B {} C {} D {} steth {} loss {:.4}",
                    r.epoch,
                    stethlab::exp::split_name(r.split),
                    r.acc,
                    fmt_opt(r.acc_by_category[0]),
                    fmt_opt(r.acc_by_category[1]),
                    fmt_opt(r.acc_by_category[2]),
                    fmt_opt(r.acc_by_category[3]),
                    fmt_opt(r.steth_acc),
                    r.loss_main
                );
            }
            if let Some(m) = out.final_metrics() {
                println!(
                    "final: acc {:.4} easy {} hard {} steth {} hint {}",
                    m.acc,
                    fmt_opt(m.acc_easy),
                    fmt_opt(m.acc_hard),
                    fmt_opt(m.steth_acc),
                    fmt_opt(m.hint_acc)
                );
            }
            if let Some(e) = out.diverged_at {
                println!("diverged at epoch {e}; kept the last good parameters");
            }
        }
        Command::Sweep { repeats } => {
            let cfg = base_config(common)?;
            let lambdas = if common.lambdas.is_empty() {
                vec![cfg.stethoscope.as_ref().map_or(0.0, |s| s.lambda.0)]
            } else {
                common.lambdas.clone()
            };
            let data = ExperimentData::load(&cfg.dataset)?;
            let res = lambda_sweep(&cfg, &data, &lambdas, repeats, |c| {
                let m = c.metrics.as_ref();
                println!(
                    "lambda {:>6} repeat {} {:?} acc {} easy {} hard {} steth {} hint {}",
                    c.lambda,
                    c.repeat,
                    c.status,
                    fmt_opt(m.map(|m| m.acc)),
                    fmt_opt(m.and_then(|m| m.acc_easy)),
                    fmt_opt(m.and_then(|m| m.acc_hard)),
                    fmt_opt(m.and_then(|m| m.steth_acc)),
                    fmt_opt(m.and_then(|m| m.hint_acc)),
                );
                if let Some(e) = &c.error {
                    println!("  error: {e}");
                }
            })?;
            for s in &res.summary {
                let f = |v: Option<stethlab::exp::Spread>| v.map_or("-".into(), |v| format!("{:.4}±{:.4}", v.mean, v.std));
                println!(
                    "lambda {:>6}: acc {} easy {} hard {} steth {} hint {} ({} failed)",
                    s.lambda,
                    f(s.acc),
                    f(s.acc_easy),
                    f(s.acc_hard),
                    f(s.steth_acc),
                    f(s.hint_acc),
                    s.failed
                );
            }
        }
        Command::Probe { layers, checkpoint } => {
            let cfg = base_config(common)?;
            let data = ExperimentData::load(&cfg.dataset)?;
            let model = match checkpoint {
                Some(p) => {
                    let mut m = Model::build(&cfg, &data)?;
                    m.load_checkpoint(&p)?;
                    m
                }
                None => train(&cfg, &data)?.model,
            };
            let layers = if layers.is_empty() { cfg.probe.layers.clone() } else { layers };
            let results = per_layer_probe(&cfg, &data, &model, &layers, &cfg.probe.tasks)?;
            for r in &results {
                println!("{:<12} {:<16} test acc {:.4}", r.layer, r.task.as_str(), r.final_acc());
            }
            if let Some(dir) = &cfg.output_dir {
                std::fs::create_dir_all(dir).map_err(|source| Error::Io {
                    path: dir.clone(),
                    source,
                })?;
                write_probe_csv(&dir.join(PROBE_FILE), &results)?;
            }
        }
        Command::FreezeRecover { freeze_epoch } => {
            let mut cfg = base_config(common)?;
            single_lambda(&mut cfg, &common.lambdas)?;
            if freeze_epoch.is_some() {
                cfg.freeze_epoch = freeze_epoch;
            }
            let data = ExperimentData::load(&cfg.dataset)?;
            let out = freeze_recovery(&cfg, &data)?;
            for r in &out.rows {
                println!(
                    "epoch {:>3} {:?} steth {:.4} baseline {} theta {:016x}",
                    r.epoch,
                    r.phase,
                    r.steth_acc,
                    fmt_opt(r.baseline_acc),
                    r.theta_checksum
                );
            }
        }
        Command::Plot { csv } => {
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            for p in emit_plots(&csv, &out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
