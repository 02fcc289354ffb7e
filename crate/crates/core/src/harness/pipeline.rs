use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, RunConfig};
use crate::clustering::{fit_kmeans, ClusterModel, KMeansFit};
use crate::dataio::{load_npz_dataset, normalize, stratified_split, synth_textures, Dataset, Split};
use crate::encoder::{train_autoencoder, AutoencoderConfig, AutoencoderFit, AutoencoderModel, PatchEncoder};
use crate::error::{Error, Result, StageContext};
use crate::gnn::{evaluate, train_classifier, ClassifierFit, GnnConfig, GnnModel};
use crate::graphbuild::{build_graph, label_patches, ImageGraph};
use crate::patching::{partition, PatchGrid};
use crate::seed::{self, Stage};

/// Files a run directory holds.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        RunDir(path.into())
    }

    pub fn path(&self) -> &Path {
        &self.0
    }

    pub fn config(&self) -> PathBuf {
        self.0.join("config.txt")
    }

    pub fn manifest(&self) -> PathBuf {
        self.0.join("manifest.json")
    }

    pub fn encoder(&self) -> PathBuf {
        self.0.join("encoder.bin")
    }

    pub fn centroids(&self) -> PathBuf {
        self.0.join("centroids.bin")
    }

    pub fn model(&self) -> PathBuf {
        self.0.join("model.bin")
    }

    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.json")
    }

    pub fn timing(&self) -> PathBuf {
        self.0.join("timing.json")
    }

    pub fn data(&self) -> PathBuf {
        self.0.join("data.npz")
    }

    pub fn graphs(&self, split: Split) -> PathBuf {
        self.0.join(format!("graphs_{}.jsonl", split.name()))
    }

    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.0).map_err(|e| Error::io(&self.0, e))
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Metrics for one split as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Split,
    pub accuracy: f64,
    pub auc: f64,
    pub confusion: Vec<Vec<usize>>,
    /// Wall-clock seconds of the whole run; `null` unless timing is enabled.
    pub runtime_s: Option<f64>,
}

/// Stage seeds fanned out from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub data: u64,
    pub split: u64,
    pub encoder: u64,
    pub clustering: u64,
    pub classifier: u64,
}

impl StageSeeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            data: seed::derive(base, Stage::Data),
            split: seed::derive(base, Stage::Split),
            encoder: seed::derive(base, Stage::Encoder),
            clustering: seed::derive(base, Stage::Clustering),
            classifier: seed::derive(base, Stage::Classifier),
        }
    }
}

/// Loads (or generates) the train/val/test splits.
pub fn load_datasets(cfg: &RunConfig) -> Result<[Dataset; 3]> {
    let seeds = StageSeeds::from_base(cfg.seed);
    match &cfg.dataset {
        DataSource::Npz(path) => load_npz_dataset(path),
        DataSource::Synth(s) => {
            let total = s.train + s.val + s.test;
            let all = synth_textures(total / 2, s.side, s.noise, seeds.data)?;
            let t = total as f64;
            let fractions = [s.train as f64 / t, s.val as f64 / t, 1.0 - (s.train + s.val) as f64 / t];
            let parts = stratified_split(&all, &fractions, seeds.split)?;
            let mut it = parts.into_iter().zip(Split::ALL).map(|(d, sp)| d.with_split(sp));
            Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
        }
    }
}

/// Normalizes and partitions every image of `d`.
pub fn patch_grids(d: &Dataset, patch_size: usize) -> Result<Vec<PatchGrid>> {
    normalize(d).par_iter().map(|img| partition(img, patch_size)).collect()
}

fn encoder_config(cfg: &RunConfig) -> AutoencoderConfig {
    AutoencoderConfig {
        seed: StageSeeds::from_base(cfg.seed).encoder,
        ..cfg.encoder.clone()
    }
}

/// Trains the autoencoder on every training patch.
pub fn fit_encoder(cfg: &RunConfig, train: &[PatchGrid]) -> Result<AutoencoderFit> {
    let patches: Vec<Vec<f64>> = train.iter().flat_map(|g| g.patches.iter().cloned()).collect();
    train_autoencoder(&patches, &encoder_config(cfg))
}

/// Fits the cluster vocabulary on the embeddings of every training patch.
pub fn fit_clusters(cfg: &RunConfig, encoder: &AutoencoderModel, train: &[PatchGrid]) -> Result<KMeansFit> {
    let embeddings = train
        .par_iter()
        .map(|g| encoder.encode_batch(&g.patches))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    fit_kmeans(
        &embeddings,
        cfg.clusters,
        StageSeeds::from_base(cfg.seed).clustering,
        cfg.kmeans,
    )
}

/// One labelled graph per image.
pub fn build_graphs(
    cfg: &RunConfig,
    encoder: &AutoencoderModel,
    clusters: &ClusterModel,
    grids: &[PatchGrid],
    labels: &[usize],
) -> Result<Vec<ImageGraph>> {
    grids
        .par_iter()
        .zip(labels)
        .map(|(grid, &y)| {
            let (assigned, embeddings) = label_patches(grid, encoder, clusters)?;
            Ok(build_graph(&assigned, &embeddings, grid.shape, clusters.k(), cfg.connectivity)?.with_label(y))
        })
        .collect()
}

fn classifier_config(cfg: &RunConfig) -> GnnConfig {
    GnnConfig {
        seed: StageSeeds::from_base(cfg.seed).classifier,
        ..cfg.gnn.clone()
    }
}

pub fn fit_classifier(
    cfg: &RunConfig,
    train: &[ImageGraph],
    val: &[ImageGraph],
    num_classes: usize,
) -> Result<ClassifierFit> {
    train_classifier(train, val, num_classes, &classifier_config(cfg))
}

pub fn split_metrics(model: &GnnModel, graphs: &[ImageGraph], split: Split) -> Result<SplitMetrics> {
    let m = evaluate(model, graphs)?;
    Ok(SplitMetrics {
        split,
        accuracy: m.accuracy,
        auc: m.auc,
        confusion: m.confusion,
        runtime_s: None,
    })
}

/// Serialized run record next to the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: String,
    pub seeds: StageSeeds,
    pub num_classes: usize,
    pub split_sizes: [usize; 3],
    pub patch_dim: usize,
    pub grid: [usize; 2],
    pub checkpoint: String,
    pub encoder_epoch_mse: Vec<f64>,
    pub kmeans_iterations: usize,
    pub kmeans_inertia: f64,
    pub classifier_epoch_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
}

/// In-memory result of a full run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub encoder: AutoencoderModel,
    pub clusters: ClusterModel,
    pub model: GnnModel,
    pub graphs: [Vec<ImageGraph>; 3],
    pub metrics: Vec<SplitMetrics>,
    pub manifest: Manifest,
    /// `(stage, seconds)` in execution order.
    pub stage_times: Vec<(&'static str, f64)>,
    pub runtime_s: f64,
}

impl RunOutcome {
    pub fn metric(&self, split: Split) -> Option<&SplitMetrics> {
        self.metrics.iter().find(|m| m.split == split)
    }
}

const CHECKPOINT_RULE: &str = "fixed epochs; parameters from the epoch with the best validation accuracy (earliest on ties)";

/// Runs every stage without touching the filesystem (except to read an
/// NPZ dataset).
pub fn run_in_memory(cfg: &RunConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    let mut stage_times = Vec::new();
    let mut lap = {
        let mut t = Instant::now();
        move |name: &'static str, times: &mut Vec<(&'static str, f64)>| {
            times.push((name, t.elapsed().as_secs_f64()));
            t = Instant::now();
        }
    };

    cfg.validate().stage("config")?;
    let data = load_datasets(cfg).stage("data")?;
    let num_classes = data[0].num_classes.max(data[1].num_classes).max(data[2].num_classes);
    lap("data", &mut stage_times);

    let grids: Vec<Vec<PatchGrid>> = data
        .iter()
        .map(|d| patch_grids(d, cfg.patch_size))
        .collect::<Result<_>>()
        .stage("patching")?;
    lap("patching", &mut stage_times);

    let ae = fit_encoder(cfg, &grids[0]).stage("encoder")?;
    lap("encoder", &mut stage_times);

    let km = fit_clusters(cfg, &ae.model, &grids[0]).stage("clustering")?;
    lap("clustering", &mut stage_times);

    let graphs: Vec<Vec<ImageGraph>> = grids
        .iter()
        .zip(&data)
        .map(|(g, d)| build_graphs(cfg, &ae.model, &km.model, g, &d.labels))
        .collect::<Result<_>>()
        .stage("graphs")?;
    lap("graphs", &mut stage_times);

    let fit = fit_classifier(cfg, &graphs[0], &graphs[1], num_classes).stage("classifier")?;
    lap("classifier", &mut stage_times);

    let mut metrics = Vec::new();
    for (split, gs) in Split::ALL.into_iter().zip(&graphs) {
        if !gs.is_empty() {
            metrics.push(split_metrics(&fit.model, gs, split).stage("evaluate")?);
        }
    }
    lap("evaluate", &mut stage_times);
    let runtime_s = started.elapsed().as_secs_f64();
    if cfg.timing {
        metrics.iter_mut().for_each(|m| m.runtime_s = Some(runtime_s));
    }

    let first = &grids[0][0];
    let manifest = Manifest {
        config: cfg.to_kv(),
        seeds: StageSeeds::from_base(cfg.seed),
        num_classes,
        split_sizes: [data[0].len(), data[1].len(), data[2].len()],
        patch_dim: first.patch_dim(),
        grid: [first.shape.rows, first.shape.cols],
        checkpoint: CHECKPOINT_RULE.into(),
        encoder_epoch_mse: ae.epoch_mse,
        kmeans_iterations: km.iterations,
        kmeans_inertia: km.model.inertia,
        classifier_epoch_loss: fit.epoch_loss,
        val_accuracy: fit.val_accuracy,
        best_epoch: fit.best_epoch,
    };
    let mut graphs = graphs.into_iter();
    Ok(RunOutcome {
        encoder: ae.model,
        clusters: km.model,
        model: fit.model,
        graphs: [graphs.next().unwrap(), graphs.next().unwrap(), graphs.next().unwrap()],
        metrics,
        manifest,
        stage_times,
        runtime_s,
    })
}

pub fn metrics_json(metrics: &[SplitMetrics]) -> Result<String> {
    Ok(serde_json::to_string_pretty(metrics)? + "\n")
}

pub fn write_graphs_jsonl(path: &Path, graphs: &[ImageGraph]) -> Result<()> {
    let mut text = String::new();
    for g in graphs {
        text.push_str(&g.to_json()?);
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_graphs_jsonl(path: &Path) -> Result<Vec<ImageGraph>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(ImageGraph::from_json)
        .collect()
}

/// Full pipeline plus artifacts in `cfg.out`: `config.txt`,
/// `manifest.json`, `encoder.bin`, `centroids.bin`, `model.bin`,
/// `metrics.json`, `graphs_<split>.jsonl` and `timing.json` (the only file
/// that differs between identical runs).
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome> {
    let outcome = run_in_memory(cfg)?;
    persist_outcome(cfg, &outcome).stage("persist")?;
    Ok(outcome)
}

fn persist_outcome(cfg: &RunConfig, o: &RunOutcome) -> Result<()> {
    let dir = RunDir::new(&cfg.out);
    dir.create()?;
    write_text(&dir.config(), &cfg.to_kv())?;
    write_text(&dir.manifest(), &(serde_json::to_string_pretty(&o.manifest)? + "\n"))?;
    o.encoder.save(dir.encoder())?;
    o.clusters.save(dir.centroids())?;
    o.model.save(dir.model())?;
    write_text(&dir.metrics(), &metrics_json(&o.metrics)?)?;
    for (split, gs) in Split::ALL.into_iter().zip(&o.graphs) {
        write_graphs_jsonl(&dir.graphs(split), gs)?;
    }
    write_text(&dir.timing(), &timing_json(&o.stage_times, o.runtime_s)?)?;
    Ok(())
}

pub(crate) fn timing_json(stages: &[(&'static str, f64)], total: f64) -> Result<String> {
    let stages: serde_json::Map<String, serde_json::Value> = stages
        .iter()
        .map(|(k, v)| (k.to_string(), serde_json::Value::from(*v)))
        .collect();
    Ok(serde_json::to_string_pretty(&serde_json::json!({"stages": stages, "total_s": total}))? + "\n")
}

/// Re-evaluates a finished run from its persisted artifacts, rebuilding
/// graphs from the dataset named in `config.txt`.
pub fn eval_run(dir: impl AsRef<Path>) -> Result<Vec<SplitMetrics>> {
    let dir = RunDir::new(dir.as_ref());
    let cfg = RunConfig::load(dir.config()).stage("config")?;
    let encoder = AutoencoderModel::load(dir.encoder()).stage("encoder")?;
    let clusters = ClusterModel::load(dir.centroids()).stage("clustering")?;
    let model = GnnModel::load(dir.model()).stage("classifier")?;
    let data = load_datasets(&cfg).stage("data")?;
    let mut metrics = Vec::new();
    for d in &data {
        if d.is_empty() {
            continue;
        }
        let grids = patch_grids(d, cfg.patch_size).stage("patching")?;
        let graphs = build_graphs(&cfg, &encoder, &clusters, &grids, &d.labels).stage("graphs")?;
        metrics.push(split_metrics(&model, &graphs, d.split).stage("evaluate")?);
    }
    Ok(metrics)
}
