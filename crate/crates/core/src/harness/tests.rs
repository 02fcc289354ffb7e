use super::*;
use crate::dataio::Split;
use crate::error::Error;

fn tiny(out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::from_kv(
        "dataset = synth:train=20,val=8,test=12,side=16,noise=20\n\
         patch_size = 4\nclusters = 4\nembed_dim = 4\nhidden_dim = 8\nae_epochs = 3\n\
         inner_dim = 8\nmlp_depth = 2\nepochs = 3\nbatch_size = 8\nlr = 0.01\nseed = 5\n",
    )
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

#[test]
fn synthetic_splits_have_requested_sizes() {
    let cfg = tiny(std::path::Path::new("unused"));
    let data = load_datasets(&cfg).unwrap();
    let sizes: Vec<usize> = data.iter().map(|d| d.len()).collect();
    assert_eq!(sizes, vec![20, 8, 12]);
    for d in &data {
        assert_eq!(d.class_counts(), vec![d.len() / 2; 2]);
    }
    assert_eq!(data[2].split, Split::Test);
}

#[test]
fn run_writes_artifacts_and_eval_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let outcome = run_pipeline(&cfg).unwrap();
    let rd = RunDir::new(dir.path());
    for p in [rd.config(), rd.manifest(), rd.encoder(), rd.centroids(), rd.model(), rd.metrics(), rd.timing()] {
        assert!(p.exists(), "{}", p.display());
    }
    assert_eq!(read_graphs_jsonl(&rd.graphs(Split::Test)).unwrap(), outcome.graphs[2]);
    let stored: Vec<SplitMetrics> =
        serde_json::from_str(&std::fs::read_to_string(rd.metrics()).unwrap()).unwrap();
    assert_eq!(stored, outcome.metrics);
    assert!(stored.iter().all(|m| m.runtime_s.is_none()));
    assert_eq!(eval_run(dir.path()).unwrap(), stored);
}

#[test]
fn identical_runs_write_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&tiny(a.path())).unwrap();
    run_pipeline(&tiny(b.path())).unwrap();
    for f in ["metrics.json", "model.bin", "encoder.bin", "centroids.bin", "manifest.json", "config.txt"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn timing_fills_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.timing = true;
    let o = run_in_memory(&cfg).unwrap();
    assert!(o.metrics.iter().all(|m| m.runtime_s.is_some()));
}

#[test]
fn stage_errors_are_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.patch_size = 16;
    let err = run_in_memory(&cfg).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage: "config", .. }), "{err}");
    assert!(err.to_string().contains("at least 4"));

    cfg.patch_size = 4;
    cfg.dataset = DataSource::Npz(dir.path().join("missing.npz"));
    let err = run_in_memory(&cfg).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage: "data", .. }), "{err}");

    // more clusters than distinct patch embeddings
    cfg.dataset = "synth:train=4,val=2,test=2,side=8,noise=0".parse().unwrap();
    cfg.clusters = 200;
    let err = run_in_memory(&cfg).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage: "clustering", .. }), "{err}");
}

#[test]
fn sweep_rows_are_row_major_and_stable() {
    let dir = tempfile::tempdir().unwrap();
    let grid = SweepGrid {
        patch_sizes: vec![4, 8],
        clusters: vec![3, 4],
        reps: 1,
        base: tiny(dir.path()),
    };
    let csv_a = dir.path().join("a.csv");
    let rows = run_sweep(&grid, &csv_a).unwrap();
    let order: Vec<(usize, usize)> = rows.iter().map(|r| (r.patch_size, r.clusters)).collect();
    assert_eq!(order, vec![(4, 3), (4, 4), (8, 3), (8, 4)]);
    let text = std::fs::read_to_string(&csv_a).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert_eq!(text.lines().next().unwrap(), SWEEP_HEADER.join(","));

    let csv_b = dir.path().join("b.csv");
    run_sweep(&grid, &csv_b).unwrap();
    assert_eq!(std::fs::read(&csv_a).unwrap(), std::fs::read(&csv_b).unwrap());
}

#[test]
fn failing_cell_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let grid = SweepGrid {
        patch_sizes: vec![16, 4],
        clusters: vec![3],
        reps: 1,
        base: tiny(dir.path()),
    };
    let rows = run_sweep(&grid, dir.path().join("s.csv")).unwrap();
    assert!(rows[0].error.as_deref().unwrap().contains("at least 4"));
    assert!(rows[1].error.is_none() && rows[1].test_acc.is_some());
}

#[test]
fn cell_seeds_follow_index() {
    let grid = SweepGrid {
        patch_sizes: vec![4, 7],
        clusters: vec![4, 8],
        reps: 2,
        base: RunConfig {
            seed: 100,
            ..RunConfig::default()
        },
    };
    let seeds: Vec<u64> = grid.cells().iter().map(|c| c.1.seed).collect();
    assert_eq!(seeds, (100..108).collect::<Vec<_>>());
    assert_eq!(grid.cells()[3].0.rep, 1);
}

#[test]
fn export_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in_memory(&tiny(dir.path())).unwrap();
    let three = &o.graphs[2][..3];
    let dot = export_graphs(three, ExportFormat::Dot, dir.path().join("dot")).unwrap();
    assert_eq!(dot.len(), 3);
    assert!(std::fs::read_to_string(&dot[0]).unwrap().starts_with("digraph"));
    let jl = export_graphs(three, ExportFormat::JsonLines, dir.path().join("jl")).unwrap();
    assert_eq!(std::fs::read_to_string(&jl[0]).unwrap().lines().count(), 3);
    assert!(export_graphs(&[], ExportFormat::Dot, dir.path().join("none")).unwrap().is_empty());
}

#[test]
fn npz_source_runs_like_synthetic() {
    let dir = tempfile::tempdir().unwrap();
    let synth = tiny(dir.path());
    let data = load_datasets(&synth).unwrap();
    let archive = dir.path().join("data.npz");
    crate::dataio::write_npz_dataset(&archive, &data).unwrap();
    let from_npz = RunConfig {
        dataset: DataSource::Npz(archive),
        ..synth.clone()
    };
    let a = run_in_memory(&synth).unwrap();
    let b = run_in_memory(&from_npz).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.model, b.model);
}
