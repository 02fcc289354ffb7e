//! Cluster-adjacency graphs.
//!
//! Every image maps to a graph over the full cluster vocabulary. Counting
//! ordered neighbour incidences `(p, q)` gives `n[i][j]`, the number of
//! times a patch of cluster `i` has a neighbour of cluster `j`; row `i` of
//! the adjacency is `n[i][·]` divided by its sum. Same-cluster neighbours
//! land on the diagonal as self-edges. Node features are the mean
//! embedding of the image's patches in each cluster.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::encoder::{Embedding, PatchEncoder};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::patching::{Connectivity, GridShape, PatchGrid};

/// Graph for one image over all `C` clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGraph {
    pub node_features: Matrix,
    pub adjacency: Matrix,
    pub present: Vec<bool>,
    pub label: Option<usize>,
}

impl ImageGraph {
    pub fn num_nodes(&self) -> usize {
        self.present.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    /// Ordered pairs `(i, j)` with `A[i][j] > 0`, row-major.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let c = self.num_nodes();
        let mut out = Vec::new();
        for i in 0..c {
            for j in 0..c {
                if self.adjacency.get(i, j) > 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Relabels clusters: node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<ImageGraph> {
        let c = self.num_nodes();
        let mut seen = vec![false; c];
        if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Domain("not a permutation of the node set".into()));
        }
        let d = self.feature_dim();
        let mut features = Matrix::zeros(c, d);
        let mut adjacency = Matrix::zeros(c, c);
        let mut present = vec![false; c];
        for i in 0..c {
            features.row_mut(perm[i]).copy_from_slice(self.node_features.row(i));
            present[perm[i]] = self.present[i];
            for j in 0..c {
                adjacency.set(perm[i], perm[j], self.adjacency.get(i, j));
            }
        }
        Ok(ImageGraph {
            node_features: features,
            adjacency,
            present,
            label: self.label,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&GraphRecord::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<GraphRecord>(text)?.try_into()
    }

    /// Graphviz digraph: present clusters as nodes, one edge per nonzero weight.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph image_graph {\n");
        for (i, _) in self.present.iter().enumerate().filter(|(_, &p)| p) {
            let _ = writeln!(s, "  c{i} [label=\"cluster {i}\"];");
        }
        for (i, j) in self.edges() {
            let w = self.adjacency.get(i, j);
            let _ = writeln!(s, "  c{i} -> c{j} [label=\"{w}\", weight={w}];");
        }
        s.push_str("}\n");
        s
    }
}

/// On-disk JSON form of an [`ImageGraph`].
#[derive(Debug, Serialize, Deserialize)]
struct GraphRecord {
    #[serde(rename = "C")]
    c: usize,
    present: Vec<bool>,
    node_features: Vec<Vec<f64>>,
    adjacency: Vec<Vec<f64>>,
    label: Option<usize>,
}

impl From<&ImageGraph> for GraphRecord {
    fn from(g: &ImageGraph) -> Self {
        GraphRecord {
            c: g.num_nodes(),
            present: g.present.clone(),
            node_features: g.node_features.to_rows(),
            adjacency: g.adjacency.to_rows(),
            label: g.label,
        }
    }
}

impl TryFrom<GraphRecord> for ImageGraph {
    type Error = Error;

    fn try_from(r: GraphRecord) -> Result<Self> {
        if r.present.len() != r.c || r.node_features.len() != r.c || r.adjacency.len() != r.c {
            return Err(Error::format(format!("graph record sizes disagree with C = {}", r.c)));
        }
        let adjacency = Matrix::from_rows(&r.adjacency)?;
        if adjacency.cols() != r.c {
            return Err(Error::format("adjacency must be C x C"));
        }
        let node_features = if r.c == 0 {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_rows(&r.node_features)?
        };
        Ok(ImageGraph {
            node_features,
            adjacency,
            present: r.present,
            label: r.label,
        })
    }
}

/// Embeds every patch and assigns it to its nearest cluster.
pub fn label_patches(
    grid: &PatchGrid,
    encoder: &dyn PatchEncoder,
    clusters: &ClusterModel,
) -> Result<(Vec<usize>, Vec<Embedding>)> {
    let embeddings = encoder.encode_batch(&grid.patches)?;
    let labels = embeddings
        .iter()
        .map(|z| clusters.assign(z))
        .collect::<Result<Vec<_>>>()?;
    Ok((labels, embeddings))
}

fn check_labels(labels: &[usize], shape: GridShape, c: usize) -> Result<()> {
    if labels.len() != shape.len() {
        return Err(Error::shape(format!(
            "{} labels for a {}x{} grid",
            labels.len(),
            shape.rows,
            shape.cols
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Domain(format!("cluster label {bad} >= C = {c}")));
    }
    Ok(())
}

/// Raw incidence counts `n[i][j]` (row-major `C × C`).
pub fn incidence_counts(
    labels: &[usize],
    shape: GridShape,
    c: usize,
    conn: Connectivity,
) -> Result<Vec<u64>> {
    check_labels(labels, shape, c)?;
    let mut counts = vec![0u64; c * c];
    for (p, &lp) in labels.iter().enumerate() {
        shape.for_each_neighbor(p, conn, |q| counts[lp * c + labels[q]] += 1);
    }
    Ok(counts)
}

/// Row-normalized incidence matrix.
pub fn adjacency_from_labels(
    labels: &[usize],
    shape: GridShape,
    c: usize,
    conn: Connectivity,
) -> Result<Matrix> {
    let counts = incidence_counts(labels, shape, c, conn)?;
    let mut a = Matrix::zeros(c, c);
    for i in 0..c {
        let row = &counts[i * c..(i + 1) * c];
        let total: u64 = row.iter().sum();
        if total == 0 {
            continue;
        }
        for (j, &n) in row.iter().enumerate() {
            if n > 0 {
                a.set(i, j, n as f64 / total as f64);
            }
        }
    }
    Ok(a)
}

pub fn build_graph<E: AsRef<[f64]>>(
    labels: &[usize],
    embeddings: &[E],
    shape: GridShape,
    c: usize,
    conn: Connectivity,
) -> Result<ImageGraph> {
    if embeddings.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let adjacency = adjacency_from_labels(labels, shape, c, conn)?;
    let d = embeddings.first().map_or(0, |e| e.as_ref().len());
    let mut features = Matrix::zeros(c, d);
    let mut members = vec![0usize; c];
    for (z, &l) in embeddings.iter().zip(labels) {
        let z = z.as_ref();
        if z.len() != d {
            return Err(Error::shape("embeddings of differing length"));
        }
        members[l] += 1;
        for (f, v) in features.row_mut(l).iter_mut().zip(z) {
            *f += v;
        }
    }
    for (k, &n) in members.iter().enumerate() {
        if n > 0 {
            let n = n as f64;
            features.row_mut(k).iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(ImageGraph {
        node_features: features,
        adjacency,
        present: members.iter().map(|&n| n > 0).collect(),
        label: None,
    })
}
