//! Fully-connected patch autoencoder.
//!
//! The encoder is `input → hidden (act) → embed (linear)` and the decoder
//! mirrors it, `embed → hidden (act) → input (linear)`. Training minimizes
//! the per-patch squared reconstruction error averaged over the batch.
//! Anything that maps a patch to a fixed-size vector can stand in for it
//! through [`PatchEncoder`].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{adam_step, matmul, matmul_nt, matmul_tn, AdamConfig, AdamState, Matrix, ParamId, ParamSet};
use crate::persist::{self, BinReader, BinWriter};
use crate::seed;

const MAGIC: &[u8; 8] = b"IPAC-AE1";

/// Compressed representation of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl std::ops::Deref for Embedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Maps flattened patches to embeddings.
pub trait PatchEncoder: Send + Sync {
    fn input_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn encode_batch(&self, patches: &[Vec<f64>]) -> Result<Vec<Embedding>>;

    fn encode(&self, patch: &[f64]) -> Result<Embedding> {
        let mut out = self.encode_batch(&[patch.to_vec()])?;
        Ok(out.pop().expect("one patch in, one embedding out"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn code(self) -> u64 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u64) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            _ => Err(Error::format(format!("unknown activation code {c}"))),
        }
    }

    fn apply(self, m: &mut Matrix) {
        if self == Activation::Relu {
            m.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }

    /// Masks `grad` by the derivative evaluated at the activation output.
    fn backward(self, activated: &Matrix, grad: &mut Matrix) {
        if self == Activation::Relu {
            for (g, a) in grad.data_mut().iter_mut().zip(activated.data()) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub activation: Activation,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    input_dim: usize,
    hidden_dim: usize,
    embed_dim: usize,
    activation: Activation,
    params: ParamSet,
    // enc_w1, enc_b1, enc_w2, enc_b2, dec_w1, dec_b1, dec_w2, dec_b2
    ids: [ParamId; 8],
}

struct Cache {
    input: Matrix,
    hidden_enc: Matrix,
    embed: Matrix,
    hidden_dec: Matrix,
    output: Matrix,
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = matmul_nt(x, w)?;
    let bias = b.data();
    for r in 0..out.rows() {
        for (o, bv) in out.row_mut(r).iter_mut().zip(bias) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Gradients of an affine map given the upstream gradient `dz`.
fn affine_backward(x: &Matrix, w: &Matrix, dz: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let dw = matmul_tn(dz, x)?;
    let mut db = vec![0.0; dz.cols()];
    for r in 0..dz.rows() {
        for (acc, g) in db.iter_mut().zip(dz.row(r)) {
            *acc += g;
        }
    }
    let dx = matmul(dz, w)?;
    Ok((dw, Matrix::column(db), dx))
}

impl AutoencoderModel {
    /// Randomly initialized model (Glorot-uniform weights, zero biases).
    pub fn new(input_dim: usize, cfg: &AutoencoderConfig) -> Result<Self> {
        if input_dim == 0 || cfg.embed_dim == 0 || cfg.hidden_dim == 0 {
            return Err(Error::config("autoencoder dimensions must be positive"));
        }
        let mut rng = seed::rng(cfg.seed);
        let mut glorot = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
            Matrix::from_vec(rows, cols, data).expect("sized above")
        };
        let (i, h, e) = (input_dim, cfg.hidden_dim, cfg.embed_dim);
        let layers = [
            ("enc_w1", glorot(h, i)),
            ("enc_b1", Matrix::zeros(h, 1)),
            ("enc_w2", glorot(e, h)),
            ("enc_b2", Matrix::zeros(e, 1)),
            ("dec_w1", glorot(h, e)),
            ("dec_b1", Matrix::zeros(h, 1)),
            ("dec_w2", glorot(i, h)),
            ("dec_b2", Matrix::zeros(i, 1)),
        ];
        Self::assemble(i, h, e, cfg.activation, layers)
    }

    fn assemble(
        input_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        activation: Activation,
        layers: [(&str, Matrix); 8],
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut ids = [ParamId(0); 8];
        for (slot, (name, value)) in ids.iter_mut().zip(layers) {
            *slot = params.add(name, value)?;
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            embed_dim,
            activation,
            params,
            ids,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn w(&self, k: usize) -> &Matrix {
        self.params.value(self.ids[k])
    }

    fn check_rows(&self, patches: &[Vec<f64>]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(patches.len() * self.input_dim);
        for p in patches {
            if p.len() != self.input_dim {
                return Err(Error::shape(format!(
                    "patch has {} values, encoder expects {}",
                    p.len(),
                    self.input_dim
                )));
            }
            data.extend_from_slice(p);
        }
        Matrix::from_vec(patches.len(), self.input_dim, data)
    }

    fn encode_matrix(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut h = affine(x, self.w(0), self.w(1))?;
        self.activation.apply(&mut h);
        let z = affine(&h, self.w(2), self.w(3))?;
        Ok((h, z))
    }

    fn forward(&self, x: Matrix) -> Result<Cache> {
        let (hidden_enc, embed) = self.encode_matrix(&x)?;
        let mut hidden_dec = affine(&embed, self.w(4), self.w(5))?;
        self.activation.apply(&mut hidden_dec);
        let output = affine(&hidden_dec, self.w(6), self.w(7))?;
        Ok(Cache {
            input: x,
            hidden_enc,
            embed,
            hidden_dec,
            output,
        })
    }

    /// Decoder applied to the encoder output, `g(f(x))`.
    pub fn reconstruct(&self, patch: &[f64]) -> Result<Vec<f64>> {
        let x = self.check_rows(&[patch.to_vec()])?;
        Ok(self.forward(x)?.output.into_data())
    }

    /// Mean over patches of the squared reconstruction error.
    pub fn mse(&self, patches: &[Vec<f64>]) -> Result<f64> {
        if patches.is_empty() {
            return Err(Error::config("mse of an empty patch set"));
        }
        let x = self.check_rows(patches)?;
        let cache = self.forward(x)?;
        Ok(sq_error(&cache.output, &cache.input) / patches.len() as f64)
    }

    /// Batch loss with gradients accumulated into the parameter set.
    pub fn loss_and_grad(&mut self, patches: &[Vec<f64>]) -> Result<f64> {
        let x = self.check_rows(patches)?;
        let n = patches.len() as f64;
        let c = self.forward(x)?;
        let loss = sq_error(&c.output, &c.input) / n;

        let mut d_out = c.output.clone();
        for (g, x) in d_out.data_mut().iter_mut().zip(c.input.data()) {
            *g = 2.0 * (*g - x) / n;
        }
        let (dw4, db4, mut d_hdec) = affine_backward(&c.hidden_dec, self.w(6), &d_out)?;
        self.activation.backward(&c.hidden_dec, &mut d_hdec);
        let (dw3, db3, d_embed) = affine_backward(&c.embed, self.w(4), &d_hdec)?;
        let (dw2, db2, mut d_henc) = affine_backward(&c.hidden_enc, self.w(2), &d_embed)?;
        self.activation.backward(&c.hidden_enc, &mut d_henc);
        let (dw1, db1, _) = affine_backward(&c.input, self.w(0), &d_henc)?;

        for (k, g) in [dw1, db1, dw2, db2, dw3, db3, dw4, db4].iter().enumerate() {
            self.params.accumulate_grad(self.ids[k], g)?;
        }
        Ok(loss)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC);
        w.u64(self.input_dim as u64)
            .u64(self.hidden_dim as u64)
            .u64(self.embed_dim as u64)
            .u64(self.activation.code())
            .params(&self.params);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::new(bytes, MAGIC)?;
        let (i, h, e) = (r.usize()?, r.usize()?, r.usize()?);
        let activation = Activation::from_code(r.u64()?)?;
        let cfg = AutoencoderConfig {
            embed_dim: e,
            hidden_dim: h,
            activation,
            ..AutoencoderConfig::default()
        };
        let mut model = Self::new(i, &cfg)?;
        r.params_into(&mut model.params)?;
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&persist::read_file(path.as_ref())?)
    }
}

fn sq_error(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

impl PatchEncoder for AutoencoderModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn encode_batch(&self, patches: &[Vec<f64>]) -> Result<Vec<Embedding>> {
        let x = self.check_rows(patches)?;
        let (_, z) = self.encode_matrix(&x)?;
        Ok((0..z.rows()).map(|r| Embedding(z.row(r).to_vec())).collect())
    }
}

/// A trained model with its per-epoch mean training MSE.
#[derive(Debug, Clone)]
pub struct AutoencoderFit {
    pub model: AutoencoderModel,
    pub epoch_mse: Vec<f64>,
}

/// Minibatch Adam on the reconstruction MSE, reshuffling every epoch.
pub fn train_autoencoder(patches: &[Vec<f64>], cfg: &AutoencoderConfig) -> Result<AutoencoderFit> {
    let first = patches
        .first()
        .ok_or_else(|| Error::config("cannot train an autoencoder on zero patches"))?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut model = AutoencoderModel::new(first.len(), cfg)?;
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut rng = seed::rng(seed::splitmix64(cfg.seed));
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| patches[i].clone()));
            let loss = model.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("autoencoder loss diverged at epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            adam_step(&mut model.params, &mut adam)?;
        }
        epoch_mse.push(total / patches.len() as f64);
    }
    Ok(AutoencoderFit { model, epoch_mse })
}
