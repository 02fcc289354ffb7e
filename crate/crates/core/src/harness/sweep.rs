use std::path::Path;
use std::time::Instant;

use super::config::RunConfig;
use super::pipeline::run_in_memory;
use crate::dataio::Split;
use crate::error::{Error, Result};

/// Patch-size × cluster-count grid around a base configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub patch_sizes: Vec<usize>,
    pub clusters: Vec<usize>,
    pub reps: usize,
    pub base: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub patch_size: usize,
    pub clusters: usize,
    pub rep: usize,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub runtime_s: Option<f64>,
    pub error: Option<String>,
}

pub const SWEEP_HEADER: [&str; 7] = [
    "patch_size",
    "clusters",
    "rep",
    "val_acc",
    "test_acc",
    "runtime_s",
    "error",
];

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.patch_sizes.is_empty() || self.clusters.is_empty() || self.reps == 0 {
            return Err(Error::config("sweep axes and repetitions must be nonempty"));
        }
        for cell in self.cells() {
            cell.1.validate()?;
        }
        Ok(())
    }

    /// Every `(row template, config)` in row-major `(patch, clusters, rep)`
    /// order; cell `k` is seeded with `base.seed + k`.
    pub fn cells(&self) -> Vec<(SweepRow, RunConfig)> {
        let mut out = Vec::new();
        for &p in &self.patch_sizes {
            for &c in &self.clusters {
                for rep in 0..self.reps {
                    let index = out.len() as u64;
                    let cfg = RunConfig {
                        patch_size: p,
                        clusters: c,
                        seed: self.base.seed.wrapping_add(index),
                        ..self.base.clone()
                    };
                    let row = SweepRow {
                        patch_size: p,
                        clusters: c,
                        rep,
                        val_acc: None,
                        test_acc: None,
                        runtime_s: None,
                        error: None,
                    };
                    out.push((row, cfg));
                }
            }
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runs every cell, appending one CSV row per cell and flushing after each.
/// A failing cell is recorded in the `error` column and the sweep goes on.
pub fn run_sweep(grid: &SweepGrid, csv_path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    if grid.patch_sizes.is_empty() || grid.clusters.is_empty() || grid.reps == 0 {
        return Err(Error::config("sweep axes and repetitions must be nonempty"));
    }
    let path = csv_path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    w.flush().map_err(|e| Error::io(path, e))?;

    let mut rows = Vec::new();
    for (mut row, cfg) in grid.cells() {
        let started = Instant::now();
        match run_in_memory(&cfg) {
            Ok(o) => {
                row.val_acc = o.metric(Split::Val).map(|m| m.accuracy);
                row.test_acc = o.metric(Split::Test).map(|m| m.accuracy);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        if grid.base.timing {
            row.runtime_s = Some(started.elapsed().as_secs_f64());
        }
        w.write_record([
            row.patch_size.to_string(),
            row.clusters.to_string(),
            row.rep.to_string(),
            opt(row.val_acc),
            opt(row.test_acc),
            opt(row.runtime_s),
            row.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
        w.flush().map_err(|e| Error::io(path, e))?;
        rows.push(row);
    }
    Ok(rows)
}
