//! End-to-end orchestration: configuration, the staged pipeline, the
//! patch-size × cluster-count sweep and graph export.

mod config;
mod export;
mod pipeline;
mod sweep;

pub use config::{DataSource, RunConfig, SynthSpec, CONFIG_KEYS};
pub use export::{export_graphs, ExportFormat};
pub use pipeline::{
    build_graphs, eval_run, fit_classifier, fit_clusters, fit_encoder, load_datasets, metrics_json,
    patch_grids, read_graphs_jsonl, run_in_memory, run_pipeline, split_metrics, write_graphs_jsonl,
    Manifest, RunDir, RunOutcome, SplitMetrics, StageSeeds,
};
pub use sweep::{run_sweep, SweepGrid, SweepRow, SWEEP_HEADER};

#[cfg(test)]
mod tests;
