use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{classification_metrics, GnnModel, LayerType, Metrics};
use crate::error::{Error, Result};
use crate::graphbuild::ImageGraph;
use crate::numerics::{adam_step, AdamConfig, AdamState};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub layer_type: LayerType,
    pub num_layers: usize,
    pub inner_dim: usize,
    pub dropout: f64,
    pub mlp_depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            layer_type: LayerType::EdgeConv,
            num_layers: 2,
            inner_dim: 128,
            dropout: 0.1,
            mlp_depth: 4,
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("layers must be at least 1"));
        }
        if self.inner_dim == 0 {
            return Err(Error::config("inner_dim must be positive"));
        }
        if self.mlp_depth == 0 {
            return Err(Error::config("mlp_depth must be at least 1"));
        }
        if !(0.0..=0.8).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 0.8]", self.dropout)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierFit {
    /// Parameters from the epoch with the best validation accuracy (the
    /// final epoch when no validation graphs were given).
    pub model: GnnModel,
    pub epoch_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
}

fn labels_of(graphs: &[ImageGraph], what: &str) -> Result<Vec<usize>> {
    graphs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            g.label
                .ok_or_else(|| Error::config(format!("{what} graph {i} has no label")))
        })
        .collect()
}

/// Minibatch Adam on cross-entropy for a fixed number of epochs, keeping the
/// parameters with the best validation accuracy (earliest on ties).
pub fn train_classifier(
    train: &[ImageGraph],
    val: &[ImageGraph],
    num_classes: usize,
    cfg: &GnnConfig,
) -> Result<ClassifierFit> {
    cfg.validate()?;
    let labels = labels_of(train, "training")?;
    labels_of(val, "validation")?;
    let mut seen = vec![false; num_classes];
    for &y in &labels {
        *seen
            .get_mut(y)
            .ok_or_else(|| Error::Domain(format!("label {y} >= {num_classes} classes")))? = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::config("training set must contain at least two classes"));
    }
    let input_dim = train[0].feature_dim();

    let mut model = GnnModel::new(
        input_dim,
        num_classes,
        cfg.layer_type,
        cfg.num_layers,
        cfg.inner_dim,
        cfg.mlp_depth,
        cfg.dropout,
        cfg.seed,
    )?;
    let mut params = model.param_set();
    let mut adam = AdamState::new(&params, AdamConfig::with_lr(cfg.lr));
    let mut rng = seed::rng(seed::splitmix64(cfg.seed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut val_accuracy = Vec::new();
    let mut best: Option<(f64, usize, GnnModel)> = None;
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
            let dropout_seeds = (cfg.dropout > 0.0).then_some(seeds.as_slice());
            let (loss, grads) = model.batch_gradient(&batch, dropout_seeds)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("classifier loss diverged at epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            grads.accumulate_into(&mut params)?;
            adam_step(&mut params, &mut adam)?;
            model.load_param_set(&params)?;
        }
        epoch_loss.push(total / train.len() as f64);

        if !val.is_empty() {
            let acc = evaluate(&model, val)?.accuracy;
            val_accuracy.push(acc);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.clone()));
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, cfg.epochs.saturating_sub(1)),
    };
    Ok(ClassifierFit {
        model,
        epoch_loss,
        val_accuracy,
        best_epoch,
    })
}

/// Accuracy, macro AUC and confusion matrix over labelled graphs.
pub fn evaluate(model: &GnnModel, graphs: &[ImageGraph]) -> Result<Metrics> {
    use rayon::prelude::*;
    let labels = labels_of(graphs, "evaluation")?;
    let probs: Vec<Vec<f64>> = graphs
        .par_iter()
        .map(|g| model.predict(g))
        .collect::<Result<_>>()?;
    let nc = model.num_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= nc) {
        return Err(Error::Domain(format!("label {y} >= {nc} classes")));
    }
    Ok(classification_metrics(&probs, &labels, nc))
}
