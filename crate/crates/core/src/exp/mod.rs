//! Experiment orchestration: configs, training runs, λ sweeps, layer probes,
//! freeze-and-recover diagnostics, metrics CSVs and plots.

mod config;
mod data;
mod metrics;
mod plot;
mod probe;
mod sweep;
mod tower_net;
mod train;


pub use config::{DatasetSpec, ExperimentConfig, ModelSpec, ProbeSpec, StethoscopeSpec, SubsetFilter, Task};
pub use data::ExperimentData;
pub use metrics::{
    aggregation_gap, pearson, read_metrics_csv, split_name, write_metrics_csv, Correlation, MetricsRecord, MetricsRow,
    METRICS_HEADER,
};
pub use plot::{emit_plots, read_sweep_series, render_svg, Series};
pub use probe::{
    freeze_recovery, per_layer_probe, write_freeze_outputs, write_probe_csv, FreezeOutcome, FreezeRow, Phase,
    ProbeResult, FREEZE_FILE, PROBE_FILE,
};
pub use sweep::{
    cell_seed, lambda_sweep, summarize, write_sweep, CellStatus, LambdaSummary, Spread, SweepCell, SweepResult,
    SWEEP_FILE, SWEEP_HEADER, SWEEP_SUMMARY_FILE,
};
pub use tower_net::TowerNet;
pub use train::{
    config_hash, default_attach_layer, run_experiment, task_loss, train, train_with, with_lambda, write_run_outputs,
    FinalMetrics, Model, RunManifest, RunOutcome, Session, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE,
    RUN_MANIFEST_FILE,
};
