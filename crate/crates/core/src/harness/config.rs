use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::clustering::KMeansConfig;
use crate::encoder::{Activation, AutoencoderConfig};
use crate::error::{Error, Result};
use crate::gnn::GnnConfig;
use crate::patching::{grid_shape, Connectivity};

/// Parameters of the generated stripes-vs-checkerboard dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub side: usize,
    /// Gaussian noise standard deviation in 8-bit units.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train: 200,
            val: 50,
            test: 100,
            side: 28,
            noise: 32.0,
        }
    }
}

/// Where images come from: an NPZ archive or the synthetic generator.
///
/// Text form is a path, `synth`, or `synth:train=200,val=50,test=100,side=28,noise=32`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Npz(PathBuf),
    Synth(SynthSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthSpec::default())
    }
}

impl DataSource {
    /// Image side length when it is known without loading anything.
    pub fn known_side(&self) -> Option<usize> {
        match self {
            DataSource::Synth(s) => Some(s.side),
            DataSource::Npz(_) => None,
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let Some(rest) = s.strip_prefix("synth") else {
            if s.is_empty() {
                return Err(Error::config("empty dataset"));
            }
            return Ok(DataSource::Npz(PathBuf::from(s)));
        };
        let mut spec = SynthSpec::default();
        let rest = match rest.strip_prefix(':') {
            Some(r) => r,
            None if rest.is_empty() => "",
            // a file that merely starts with "synth"
            None => return Ok(DataSource::Npz(PathBuf::from(s))),
        };
        for item in rest.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad synth option `{item}`")))?;
            let count = || parse_num::<usize>(k, v);
            match k.trim() {
                "train" => spec.train = count()?,
                "val" => spec.val = count()?,
                "test" => spec.test = count()?,
                "side" => spec.side = count()?,
                "noise" => spec.noise = parse_num(k, v)?,
                other => return Err(Error::config(format!("unknown synth option `{other}`"))),
            }
        }
        Ok(DataSource::Synth(spec))
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Npz(p) => write!(f, "{}", p.display()),
            DataSource::Synth(s) => write!(
                f,
                "synth:train={},val={},test={},side={},noise={}",
                s.train, s.val, s.test, s.side, s.noise
            ),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{}` for `{}`", value.trim(), key.trim())))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(Error::config(format!("invalid value `{v}` for `{key}`"))),
    }
}

/// Everything one pipeline run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DataSource,
    pub patch_size: usize,
    pub connectivity: Connectivity,
    pub encoder: AutoencoderConfig,
    pub clusters: usize,
    pub kmeans: KMeansConfig,
    pub gnn: GnnConfig,
    pub seed: u64,
    pub out: PathBuf,
    /// Record wall-clock times in metrics and sweep output (makes them
    /// differ between otherwise identical runs).
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DataSource::default(),
            patch_size: 7,
            connectivity: Connectivity::Four,
            encoder: AutoencoderConfig::default(),
            clusters: 8,
            kmeans: KMeansConfig::default(),
            gnn: GnnConfig::default(),
            seed: 0,
            out: PathBuf::from("runs/default"),
            timing: false,
        }
    }
}

/// Keys accepted by [`RunConfig::set`], in the order [`RunConfig::to_kv`] writes them.
pub const CONFIG_KEYS: [&str; 22] = [
    "dataset",
    "patch_size",
    "connectivity",
    "clusters",
    "embed_dim",
    "hidden_dim",
    "ae_activation",
    "ae_epochs",
    "ae_batch_size",
    "ae_lr",
    "kmeans_max_iter",
    "kmeans_tol",
    "layer_type",
    "layers",
    "inner_dim",
    "dropout",
    "mlp_depth",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "timing",
];

impl RunConfig {
    /// Sets one key; `out` is accepted too but never written by [`to_kv`](Self::to_kv).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = v.parse()?,
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "connectivity" => self.connectivity = Connectivity::from_count(parse_num(key, v)?)?,
            "clusters" => self.clusters = parse_num(key, v)?,
            "embed_dim" => self.encoder.embed_dim = parse_num(key, v)?,
            "hidden_dim" => self.encoder.hidden_dim = parse_num(key, v)?,
            "ae_activation" => {
                self.encoder.activation = match v {
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    _ => return Err(Error::config(format!("unknown activation `{v}`"))),
                }
            }
            "ae_epochs" => self.encoder.epochs = parse_num(key, v)?,
            "ae_batch_size" => self.encoder.batch_size = parse_num(key, v)?,
            "ae_lr" => self.encoder.lr = parse_num(key, v)?,
            "kmeans_max_iter" => self.kmeans.max_iter = parse_num(key, v)?,
            "kmeans_tol" => self.kmeans.tol = parse_num(key, v)?,
            "layer_type" => self.gnn.layer_type = v.parse()?,
            "layers" => self.gnn.num_layers = parse_num(key, v)?,
            "inner_dim" => self.gnn.inner_dim = parse_num(key, v)?,
            "dropout" => self.gnn.dropout = parse_num(key, v)?,
            "mlp_depth" => self.gnn.mlp_depth = parse_num(key, v)?,
            "epochs" => self.gnn.epochs = parse_num(key, v)?,
            "batch_size" => self.gnn.batch_size = parse_num(key, v)?,
            "lr" => self.gnn.lr = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "timing" => self.timing = parse_bool(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "dataset" => self.dataset.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "connectivity" => self.connectivity.count().to_string(),
            "clusters" => self.clusters.to_string(),
            "embed_dim" => self.encoder.embed_dim.to_string(),
            "hidden_dim" => self.encoder.hidden_dim.to_string(),
            "ae_activation" => match self.encoder.activation {
                Activation::Relu => "relu".into(),
                Activation::Identity => "identity".into(),
            },
            "ae_epochs" => self.encoder.epochs.to_string(),
            "ae_batch_size" => self.encoder.batch_size.to_string(),
            "ae_lr" => self.encoder.lr.to_string(),
            "kmeans_max_iter" => self.kmeans.max_iter.to_string(),
            "kmeans_tol" => self.kmeans.tol.to_string(),
            "layer_type" => self.gnn.layer_type.to_string(),
            "layers" => self.gnn.num_layers.to_string(),
            "inner_dim" => self.gnn.inner_dim.to_string(),
            "dropout" => self.gnn.dropout.to_string(),
            "mlp_depth" => self.gnn.mlp_depth.to_string(),
            "epochs" => self.gnn.epochs.to_string(),
            "batch_size" => self.gnn.batch_size.to_string(),
            "lr" => self.gnn.lr.to_string(),
            "seed" => self.seed.to_string(),
            "timing" => self.timing.to_string(),
            "out" => self.out.display().to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    /// Every key except `out`, one `key = value` line each.
    pub fn to_kv(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::config(format!("clusters must be >= 2, got {}", self.clusters)));
        }
        if let Some(side) = self.dataset.known_side() {
            grid_shape(side, side, self.patch_size)?;
        } else if self.patch_size == 0 {
            return Err(Error::config("patch size must be at least 1"));
        }
        if let DataSource::Synth(s) = &self.dataset {
            for (name, n) in [("train", s.train), ("val", s.val), ("test", s.test)] {
                if n % 2 != 0 || n == 0 {
                    return Err(Error::config(format!(
                        "synthetic {name} size must be a positive even number, got {n}"
                    )));
                }
            }
        }
        if self.encoder.embed_dim == 0 || self.encoder.hidden_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.encoder.batch_size == 0 || !(self.encoder.lr > 0.0) {
            return Err(Error::config("encoder batch size and learning rate must be positive"));
        }
        self.gnn.validate()
    }
}
