//! k-means over patch embeddings with k-means++ seeding.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::persist::{self, BinReader, BinWriter};
use crate::seed;

const MAGIC: &[u8; 8] = b"IPAC-KM1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// `C` centroids in embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Matrix,
    /// Sum of squared distances of the training points to their centroids.
    pub inertia: f64,
}

/// Outcome of [`fit_kmeans`]: the model plus the training assignment and
/// the inertia after every assignment step.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub labels: Vec<usize>,
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its squared distance.
#[inline]
fn nearest(centroids: &Matrix, z: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(centroids.row(c), z);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Nearest centroid by Euclidean distance, lowest index on ties.
    pub fn assign(&self, z: &[f64]) -> Result<usize> {
        if z.len() != self.dim() {
            return Err(Error::shape(format!(
                "embedding has {} values, centroids have {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(nearest(&self.centroids, z).0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC);
        w.u64(self.k() as u64)
            .u64(self.dim() as u64)
            .f64s(self.centroids.data())
            .f64s(&[self.inertia]);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::new(bytes, MAGIC)?;
        let (k, d) = (r.usize()?, r.usize()?);
        if k < 2 || d == 0 {
            return Err(Error::format(format!("invalid centroid header {k}x{d}")));
        }
        let centroids = Matrix::from_vec(k, d, r.f64s(k * d)?)?;
        let inertia = r.f64s(1)?[0];
        r.finish()?;
        if !centroids.is_finite() {
            return Err(Error::format("non-finite centroid"));
        }
        Ok(Self { centroids, inertia })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&persist::read_file(path.as_ref())?)
    }
}

fn distinct_count(points: &[&[f64]], stop_at: usize) -> usize {
    let mut seen = HashSet::new();
    for p in points {
        seen.insert(p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
        if seen.len() >= stop_at {
            break;
        }
    }
    seen.len()
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Matrix {
    let d = points[0].len();
    let mut centroids = Matrix::zeros(k, d);
    let first = rng.random_range(0..points.len());
    centroids.row_mut(0).copy_from_slice(points[first]);
    let mut closest: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        // total > 0 while fewer than `distinct` centroids are placed
        let mut target = rng.random_range(0.0..total);
        let mut pick = closest.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        for (i, &w) in closest.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        centroids.row_mut(c).copy_from_slice(points[pick]);
        for (best, p) in closest.iter_mut().zip(points) {
            *best = best.min(sq_dist(p, points[pick]));
        }
    }
    centroids
}

fn assign_all(centroids: &Matrix, points: &[&[f64]]) -> (Vec<usize>, Vec<f64>) {
    points.par_iter().map(|p| nearest(centroids, p)).unzip()
}

/// Lloyd's algorithm from a k-means++ start.
///
/// Iterates until the largest centroid move is below `cfg.tol` or
/// `cfg.max_iter` updates have run. A cluster left empty is moved onto the
/// point farthest from its current centroid. Centroid sums run in point
/// order, so results do not depend on thread count.
pub fn fit_kmeans<P: AsRef<[f64]> + Sync>(
    embeddings: &[P],
    k: usize,
    seed: u64,
    cfg: KMeansConfig,
) -> Result<KMeansFit> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 clusters, got {k}")));
    }
    let points: Vec<&[f64]> = embeddings.iter().map(AsRef::as_ref).collect();
    let d = points.first().map_or(0, |p| p.len());
    if d == 0 {
        return Err(Error::config("k-means needs non-empty embeddings"));
    }
    if let Some(bad) = points.iter().find(|p| p.len() != d) {
        return Err(Error::shape(format!("embedding of length {} among length {d}", bad.len())));
    }
    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    let distinct = distinct_count(&points, k);
    if distinct < k {
        return Err(Error::config(format!(
            "{distinct} distinct embeddings cannot form {k} clusters"
        )));
    }

    let mut rng = seed::rng(seed);
    let mut centroids = plus_plus_init(&points, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..cfg.max_iter {
        let (labels, dists) = assign_all(&centroids, &points);
        history.push(dists.iter().sum());
        iterations += 1;

        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums.row_mut(l).iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut next = sums;
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                next.row_mut(c).iter_mut().for_each(|v| *v /= n);
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| !taken[i])
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .expect("more points than clusters");
            taken[far] = true;
            next.row_mut(c).copy_from_slice(points[far]);
        }

        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < cfg.tol {
            break;
        }
    }

    let (labels, dists) = assign_all(&centroids, &points);
    let inertia: f64 = dists.iter().sum();
    history.push(inertia);

    for a in 0..k {
        for b in a + 1..k {
            if centroids.row(a) == centroids.row(b) {
                return Err(Error::Numeric(format!("centroids {a} and {b} coincide")));
            }
        }
    }
    Ok(KMeansFit {
        model: ClusterModel { centroids, inertia },
        labels,
        inertia_history: history,
        iterations,
    })
}
