use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ipac_core::clustering::ClusterModel;
use ipac_core::dataio::{write_npz_dataset, Split};
use ipac_core::encoder::AutoencoderModel;
use ipac_core::harness::{
    build_graphs, eval_run, export_graphs, fit_classifier, fit_clusters, fit_encoder, load_datasets,
    metrics_json, patch_grids, read_graphs_jsonl, run_pipeline, run_sweep, split_metrics,
    write_graphs_jsonl, ExportFormat, RunConfig, RunDir, SweepGrid,
};
use ipac_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ipac", version, about = "Classify images through patch-cluster graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load or generate the dataset and write it to <out>/data.npz.
    Prepare,
    /// Train the patch autoencoder.
    TrainEncoder,
    /// Fit the cluster vocabulary on training-patch embeddings.
    FitClusters,
    /// Build one graph per image for every split.
    BuildGraphs,
    /// Train the GNN classifier on previously built graphs.
    Train,
    /// Evaluate a run directory from its persisted artifacts.
    Eval,
    /// Run every stage and persist all artifacts.
    Run,
    /// Grid over patch sizes and cluster counts, one CSV row per cell.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "4,7,14")]
        patch_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        cluster_counts: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        /// Defaults to <out>/sweep.csv.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a run's graphs as Graphviz files or JSON lines.
    Export {
        #[arg(long, default_value = "dot")]
        format: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to <out>/export.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// Key = value configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// NPZ archive path, `synth`, or `synth:train=..,val=..,test=..,side=..,noise=..`.
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    patch_size: Option<usize>,
    #[arg(long, global = true)]
    clusters: Option<usize>,
    #[arg(long, global = true, value_parser = ["4", "8"])]
    connectivity: Option<String>,
    #[arg(long, global = true, value_parser = ["edgeconv", "gcnconv", "sageconv"])]
    layer_type: Option<String>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    inner_dim: Option<usize>,
    #[arg(long, global = true)]
    dropout: Option<f64>,
    #[arg(long, global = true)]
    mlp_depth: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Record wall-clock times in metrics and sweep rows.
    #[arg(long, global = true)]
    timing: bool,
}

impl Flags {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut put = |k: &'static str, val: Option<String>| {
            if let Some(val) = val {
                v.push((k, val));
            }
        };
        put("dataset", self.dataset.clone());
        put("patch_size", self.patch_size.map(|x| x.to_string()));
        put("clusters", self.clusters.map(|x| x.to_string()));
        put("connectivity", self.connectivity.clone());
        put("layer_type", self.layer_type.clone());
        put("layers", self.layers.map(|x| x.to_string()));
        put("inner_dim", self.inner_dim.map(|x| x.to_string()));
        put("dropout", self.dropout.map(|x| x.to_string()));
        put("mlp_depth", self.mlp_depth.map(|x| x.to_string()));
        put("epochs", self.epochs.map(|x| x.to_string()));
        put("lr", self.lr.map(|x| x.to_string()));
        put("seed", self.seed.map(|x| x.to_string()));
        put("timing", self.timing.then(|| "true".to_string()));
        v
    }

    /// Base config (file, else the run directory's own config when
    /// `reuse_dir`, else defaults) with flags applied on top.
    fn resolve(&self, reuse_dir: bool) -> Result<RunConfig> {
        let out = self.out.clone().unwrap_or_else(|| RunConfig::default().out);
        let existing = RunDir::new(&out).config();
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None if reuse_dir && existing.exists() => RunConfig::load(&existing)?,
            None => RunConfig::default(),
        };
        for (k, v) in self.overrides() {
            cfg.set(k, &v)?;
        }
        cfg.out = out;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn save_config(cfg: &RunConfig) -> Result<RunDir> {
    let dir = RunDir::new(&cfg.out);
    dir.create()?;
    write(&dir.config(), &cfg.to_kv())?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn require(path: PathBuf, producer: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Config(format!(
            "{} not found; run `ipac {producer}` first",
            path.display()
        )))
    }
}

fn print_metrics(metrics: &[ipac_core::harness::SplitMetrics]) {
    for m in metrics {
        println!(
            "{:<5} accuracy {:.4}  auc {:.4}",
            m.split.name(),
            m.accuracy,
            m.auc
        );
    }
}

fn execute(cli: Cli) -> Result<()> {
    let flags = &cli.flags;
    match cli.command {
        Command::Prepare => {
            let cfg = flags.resolve(false)?;
            let data = load_datasets(&cfg)?;
            let dir = save_config(&cfg)?;
            write_npz_dataset(dir.data(), &data)?;
            for d in &data {
                println!("{:<5} {} images {:?}", d.split.name(), d.len(), d.class_counts());
            }
            println!("wrote {}", dir.data().display());
        }
        Command::TrainEncoder => {
            let cfg = flags.resolve(true)?;
            let data = load_datasets(&cfg)?;
            let grids = patch_grids(&data[0], cfg.patch_size)?;
            let fit = fit_encoder(&cfg, &grids)?;
            let dir = save_config(&cfg)?;
            fit.model.save(dir.encoder())?;
            let first = fit.epoch_mse.first().copied().unwrap_or(f64::NAN);
            let last = fit.epoch_mse.last().copied().unwrap_or(f64::NAN);
            println!("encoder mse {first:.6} -> {last:.6}");
        }
        Command::FitClusters => {
            let cfg = flags.resolve(true)?;
            let dir = RunDir::new(&cfg.out);
            let encoder = AutoencoderModel::load(require(dir.encoder(), "train-encoder")?)?;
            let data = load_datasets(&cfg)?;
            let grids = patch_grids(&data[0], cfg.patch_size)?;
            let fit = fit_clusters(&cfg, &encoder, &grids)?;
            fit.model.save(dir.centroids())?;
            println!(
                "k-means: {} clusters, {} iterations, inertia {:.6}",
                fit.model.k(),
                fit.iterations,
                fit.model.inertia
            );
        }
        Command::BuildGraphs => {
            let cfg = flags.resolve(true)?;
            let dir = RunDir::new(&cfg.out);
            let encoder = AutoencoderModel::load(require(dir.encoder(), "train-encoder")?)?;
            let clusters = ClusterModel::load(require(dir.centroids(), "fit-clusters")?)?;
            for d in load_datasets(&cfg)? {
                let grids = patch_grids(&d, cfg.patch_size)?;
                let graphs = build_graphs(&cfg, &encoder, &clusters, &grids, &d.labels)?;
                write_graphs_jsonl(&dir.graphs(d.split), &graphs)?;
                println!("{:<5} {} graphs", d.split.name(), graphs.len());
            }
        }
        Command::Train => {
            let cfg = flags.resolve(true)?;
            let dir = RunDir::new(&cfg.out);
            let train = read_graphs_jsonl(&require(dir.graphs(Split::Train), "build-graphs")?)?;
            let val = read_graphs_jsonl(&require(dir.graphs(Split::Val), "build-graphs")?)?;
            let num_classes = train
                .iter()
                .chain(&val)
                .filter_map(|g| g.label)
                .max()
                .map_or(0, |m| m + 1);
            let fit = fit_classifier(&cfg, &train, &val, num_classes)?;
            fit.model.save(dir.model())?;
            println!(
                "loss {:.4} -> {:.4}, best epoch {}",
                fit.epoch_loss.first().copied().unwrap_or(f64::NAN),
                fit.epoch_loss.last().copied().unwrap_or(f64::NAN),
                fit.best_epoch
            );
            let mut metrics = Vec::new();
            for (split, gs) in [(Split::Train, &train), (Split::Val, &val)] {
                if !gs.is_empty() {
                    metrics.push(split_metrics(&fit.model, gs, split)?);
                }
            }
            print_metrics(&metrics);
        }
        Command::Eval => {
            let dir = RunDir::new(flags.out.clone().unwrap_or_else(|| RunConfig::default().out));
            require(dir.model(), "train")?;
            let metrics = eval_run(dir.path())?;
            write(&dir.metrics(), &metrics_json(&metrics)?)?;
            print_metrics(&metrics);
        }
        Command::Run => {
            let cfg = flags.resolve(false)?;
            let outcome = run_pipeline(&cfg)?;
            print_metrics(&outcome.metrics);
            println!("artifacts in {}", cfg.out.display());
        }
        Command::Sweep {
            patch_sizes,
            cluster_counts,
            reps,
            csv,
        } => {
            let base = flags.resolve(false)?;
            let csv = csv.unwrap_or_else(|| base.out.join("sweep.csv"));
            let grid = SweepGrid {
                patch_sizes,
                clusters: cluster_counts,
                reps,
                base,
            };
            let rows = run_sweep(&grid, &csv)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} cells ({failed} failed) -> {}", rows.len(), csv.display());
        }
        Command::Export { format, split, dest } => {
            let format: ExportFormat = format.parse()?;
            let split = Split::ALL
                .into_iter()
                .find(|s| s.name() == split)
                .ok_or_else(|| Error::Config(format!("unknown split `{split}`")))?;
            let dir = RunDir::new(flags.out.clone().unwrap_or_else(|| RunConfig::default().out));
            let graphs = read_graphs_jsonl(&require(dir.graphs(split), "build-graphs")?)?;
            let dest = dest.unwrap_or_else(|| dir.path().join("export"));
            let files = export_graphs(&graphs, format, &dest)?;
            println!("{} graphs -> {} file(s) in {}", graphs.len(), files.len(), dest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        std::fs::write(&file, "clusters = 4\nseed = 3\n").unwrap();
        let cli = Cli::parse_from([
            "ipac",
            "run",
            "--config",
            file.to_str().unwrap(),
            "--seed",
            "11",
            "--layer-type",
            "sageconv",
        ]);
        let cfg = cli.flags.resolve(false).unwrap();
        assert_eq!((cfg.clusters, cfg.seed), (4, 11));
        assert_eq!(cfg.gnn.layer_type.name(), "sageconv");
    }

    #[test]
    fn rejects_bad_connectivity() {
        assert!(Cli::try_parse_from(["ipac", "run", "--connectivity", "6"]).is_err());
    }
}
