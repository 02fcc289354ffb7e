//! Edge-aware graph neural network over cluster-adjacency graphs.
//!
//! Node features are projected to `inner_dim`, passed through `L`
//! convolution layers, and the last layer's node states produce one
//! message per directed edge. The messages are summed into a graph vector
//! that an MLP head maps to class logits.
//!
//! Neighbourhoods are the adjacency support, `N(i) = {j : A[i][j] > 0}`,
//! which includes `i` itself when the cluster borders itself. The edge
//! feature of `(i, j)` is the scalar weight `A[i][j]`.
//!
//! Every block has a hand-written backward pass; `tests` check them all
//! against central differences.

mod metrics;
mod train;

pub use metrics::{accuracy, argmax, classification_metrics, macro_ovr_auc, roc_auc, Metrics};
pub use train::{evaluate, train_classifier, ClassifierFit, GnnConfig};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphbuild::ImageGraph;
use crate::numerics::{dot, matmul, matmul_nt, matmul_tn, softmax_in_place, Matrix, ParamSet, PROB_FLOOR};
use crate::persist::{self, BinReader, BinWriter};
use crate::seed;

const MAGIC: &[u8; 8] = b"IPAC-GN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerType {
    EdgeConv,
    GcnConv,
    SageConv,
}

impl LayerType {
    pub fn name(self) -> &'static str {
        match self {
            LayerType::EdgeConv => "edgeconv",
            LayerType::GcnConv => "gcnconv",
            LayerType::SageConv => "sageconv",
        }
    }

    fn code(self) -> u64 {
        match self {
            LayerType::EdgeConv => 0,
            LayerType::GcnConv => 1,
            LayerType::SageConv => 2,
        }
    }

    fn from_code(c: u64) -> Result<Self> {
        match c {
            0 => Ok(LayerType::EdgeConv),
            1 => Ok(LayerType::GcnConv),
            2 => Ok(LayerType::SageConv),
            _ => Err(Error::format(format!("unknown layer type code {c}"))),
        }
    }
}

impl std::str::FromStr for LayerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edgeconv" => Ok(LayerType::EdgeConv),
            "gcnconv" => Ok(LayerType::GcnConv),
            "sageconv" => Ok(LayerType::SageConv),
            _ => Err(Error::config(format!(
                "unknown layer type `{s}` (expected edgeconv, gcnconv or sageconv)"
            ))),
        }
    }
}

impl std::fmt::Display for LayerType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Message function `m_ij = ReLU(W [h_i; h_j; Φ e_ij] + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageParams {
    /// `inner × 3·inner`, column blocks for source state, target state, edge term.
    pub weight: Matrix,
    pub bias: Matrix,
}

/// One convolution layer.
///
/// `theta` is the neighbour transform (for `SageConv`, the self transform,
/// with `theta_nb` for the neighbour mean). `phi` maps the scalar edge
/// weight into node space; it exists on every `EdgeConv` layer and on the
/// last layer of any type, where it feeds the message function.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnLayer {
    pub kind: LayerType,
    pub theta: Matrix,
    pub theta_nb: Option<Matrix>,
    pub phi: Option<Matrix>,
    pub message: Option<MessageParams>,
}

/// Node states, one row per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState(pub Matrix);

/// Final-layer messages, one row per directed edge in `edges` order.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    pub edges: Vec<(usize, usize)>,
    pub messages: Matrix,
}

/// Adjacency support with the per-edge normalizers used by the layers.
#[derive(Debug, Clone)]
pub(crate) struct Topology {
    n: usize,
    /// `(i, j, A_ij, (|N(i)| |N(j)|)^-1/2)`, row-major.
    edges: Vec<(usize, usize, f64, f64)>,
    degree: Vec<usize>,
    present: Vec<bool>,
}

impl Topology {
    pub(crate) fn new(g: &ImageGraph) -> Self {
        let n = g.num_nodes();
        let degree: Vec<usize> = (0..n)
            .map(|i| (0..n).filter(|&j| g.adjacency.get(i, j) > 0.0).count())
            .collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let a = g.adjacency.get(i, j);
                if a > 0.0 {
                    let norm = 1.0 / ((degree[i] * degree[j]) as f64).sqrt();
                    edges.push((i, j, a, norm));
                }
            }
        }
        Topology {
            n,
            edges,
            degree,
            present: g.present.clone(),
        }
    }

    fn mask_absent(&self, m: &mut Matrix) {
        for (i, &p) in self.present.iter().enumerate() {
            if !p {
                m.row_mut(i).fill(0.0);
            }
        }
    }
}

fn relu_in_place(m: &mut Matrix) {
    m.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output is not positive.
fn relu_mask(out: &Matrix, grad: &mut Matrix) {
    for (g, o) in grad.data_mut().iter_mut().zip(out.data()) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

fn check_state(topo: &Topology, h: &Matrix, width: usize) -> Result<()> {
    if h.rows() != topo.n || h.cols() != width {
        return Err(Error::shape(format!(
            "node state {:?} for {} nodes of width {width}",
            h.shape(),
            topo.n
        )));
    }
    Ok(())
}

/// Forward intermediates of one convolution layer.
#[derive(Debug, Clone)]
struct ConvTrace {
    /// Normalized neighbour sum (edge/gcn) or neighbour mean (sage).
    agg: Matrix,
    out: Matrix,
}

fn aggregate(topo: &Topology, h: &Matrix, kind: LayerType) -> Matrix {
    let mut agg = Matrix::zeros(topo.n, h.cols());
    for &(i, j, _, norm) in &topo.edges {
        let w = match kind {
            LayerType::SageConv => 1.0 / topo.degree[i] as f64,
            _ => norm,
        };
        let hj = h.row(j).to_vec();
        for (a, v) in agg.row_mut(i).iter_mut().zip(hj) {
            *a += w * v;
        }
    }
    agg
}

/// Transpose of [`aggregate`]: scatters `d_agg` back onto node states.
fn aggregate_backward(topo: &Topology, d_agg: &Matrix, kind: LayerType, dh: &mut Matrix) {
    for &(i, j, _, norm) in &topo.edges {
        let w = match kind {
            LayerType::SageConv => 1.0 / topo.degree[i] as f64,
            _ => norm,
        };
        let gi = d_agg.row(i).to_vec();
        for (d, g) in dh.row_mut(j).iter_mut().zip(gi) {
            *d += w * g;
        }
    }
}

/// `Σ_j (|N(i)||N(j)|)^-1/2 · A_ij` per node.
fn edge_weight_sums(topo: &Topology) -> Vec<f64> {
    let mut s = vec![0.0; topo.n];
    for &(i, _, a, norm) in &topo.edges {
        s[i] += norm * a;
    }
    s
}

fn conv_forward_traced(topo: &Topology, h: &Matrix, layer: &GnnLayer) -> Result<ConvTrace> {
    let width = layer.theta.cols();
    check_state(topo, h, width)?;
    let agg = aggregate(topo, h, layer.kind);
    let mut out = match layer.kind {
        LayerType::EdgeConv | LayerType::GcnConv => {
            let mut pre = matmul_nt(&agg, &layer.theta)?;
            if layer.kind == LayerType::EdgeConv {
                let phi = layer
                    .phi
                    .as_ref()
                    .ok_or_else(|| Error::shape("edgeconv layer without an edge transform"))?;
                for (i, s) in edge_weight_sums(topo).into_iter().enumerate() {
                    for (p, f) in pre.row_mut(i).iter_mut().zip(phi.data()) {
                        *p += s * f;
                    }
                }
            }
            pre
        }
        LayerType::SageConv => {
            let nb = layer
                .theta_nb
                .as_ref()
                .ok_or_else(|| Error::shape("sageconv layer without a neighbour transform"))?;
            let mut pre = matmul_nt(h, &layer.theta)?;
            pre.add_assign(&matmul_nt(&agg, nb)?)?;
            pre
        }
    };
    relu_in_place(&mut out);
    topo.mask_absent(&mut out);
    Ok(ConvTrace { agg, out })
}

/// Returns the gradient w.r.t. the layer input and accumulates weight gradients.
fn conv_backward(
    topo: &Topology,
    h: &Matrix,
    layer: &GnnLayer,
    trace: &ConvTrace,
    d_out: &Matrix,
    grads: &mut GnnLayer,
) -> Result<Matrix> {
    let mut g = d_out.clone();
    relu_mask(&trace.out, &mut g);
    let mut dh = Matrix::zeros(h.rows(), h.cols());
    match layer.kind {
        LayerType::EdgeConv | LayerType::GcnConv => {
            grads.theta.add_assign(&matmul_tn(&g, &trace.agg)?)?;
            if layer.kind == LayerType::EdgeConv {
                let s = edge_weight_sums(topo);
                let dphi = grads.phi.as_mut().expect("edgeconv gradient slot");
                for (i, si) in s.into_iter().enumerate() {
                    for (d, gv) in dphi.data_mut().iter_mut().zip(g.row(i)) {
                        *d += si * gv;
                    }
                }
            }
            let d_agg = matmul(&g, &layer.theta)?;
            aggregate_backward(topo, &d_agg, layer.kind, &mut dh);
        }
        LayerType::SageConv => {
            let nb = layer.theta_nb.as_ref().expect("checked in forward");
            grads.theta.add_assign(&matmul_tn(&g, h)?)?;
            grads
                .theta_nb
                .as_mut()
                .expect("sage gradient slot")
                .add_assign(&matmul_tn(&g, &trace.agg)?)?;
            dh.add_assign(&matmul(&g, &layer.theta)?)?;
            let d_agg = matmul(&g, nb)?;
            aggregate_backward(topo, &d_agg, layer.kind, &mut dh);
        }
    }
    Ok(dh)
}

fn layer_forward(g: &ImageGraph, h: &NodeState, layer: &GnnLayer, kind: LayerType) -> Result<NodeState> {
    if layer.kind != kind {
        return Err(Error::config(format!(
            "{} layer passed to {} forward",
            layer.kind, kind
        )));
    }
    let topo = Topology::new(g);
    Ok(NodeState(conv_forward_traced(&topo, &h.0, layer)?.out))
}

/// `h_i' = ReLU(Σ_j c_ij Θ h_j + Σ_j c_ij Φ A_ij)` with `c_ij = (|N(i)||N(j)|)^-1/2`.
pub fn edgeconv_forward(g: &ImageGraph, h: &NodeState, layer: &GnnLayer) -> Result<NodeState> {
    layer_forward(g, h, layer, LayerType::EdgeConv)
}

/// The node term of [`edgeconv_forward`] alone.
pub fn gcn_forward(g: &ImageGraph, h: &NodeState, layer: &GnnLayer) -> Result<NodeState> {
    layer_forward(g, h, layer, LayerType::GcnConv)
}

/// `h_i' = ReLU(Θ_self h_i + Θ_nb · mean_{j ∈ N(i)} h_j)`.
pub fn sage_forward(g: &ImageGraph, h: &NodeState, layer: &GnnLayer) -> Result<NodeState> {
    layer_forward(g, h, layer, LayerType::SageConv)
}

/// Forward intermediates of the message function.
#[derive(Debug, Clone)]
struct MessageTrace {
    edges: Vec<(usize, usize, f64)>,
    out: Matrix,
}

fn message_forward_traced(topo: &Topology, h: &Matrix, phi: &Matrix, msg: &MessageParams) -> Result<MessageTrace> {
    let k = h.cols();
    if msg.weight.shape() != (k, 3 * k) || msg.bias.shape() != (k, 1) || phi.shape() != (k, 1) {
        return Err(Error::shape(format!(
            "message weights {:?} / edge transform {:?} for width {k}",
            msg.weight.shape(),
            phi.shape()
        )));
    }
    check_state(topo, h, k)?;
    // split W h into source and target parts once per node
    let mut src = Matrix::zeros(topo.n, k);
    let mut dst = Matrix::zeros(topo.n, k);
    for i in 0..topo.n {
        let hi = h.row(i);
        for o in 0..k {
            let w = msg.weight.row(o);
            src.set(i, o, dot(&w[..k], hi));
            dst.set(i, o, dot(&w[k..2 * k], hi));
        }
    }
    let edge_proj: Vec<f64> = (0..k)
        .map(|o| dot(&msg.weight.row(o)[2 * k..], phi.data()))
        .collect();

    let edges: Vec<(usize, usize, f64)> = topo.edges.iter().map(|&(i, j, a, _)| (i, j, a)).collect();
    let mut out = Matrix::zeros(edges.len(), k);
    for (e, &(i, j, a)) in edges.iter().enumerate() {
        let row = out.row_mut(e);
        for o in 0..k {
            let v = src.get(i, o) + dst.get(j, o) + a * edge_proj[o] + msg.bias.data()[o];
            row[o] = v.max(0.0);
        }
    }
    Ok(MessageTrace { edges, out })
}

/// Accumulates gradients for `W`, `b`, `Φ` and returns the gradient w.r.t. `h`.
fn message_backward(
    h: &Matrix,
    phi: &Matrix,
    msg: &MessageParams,
    trace: &MessageTrace,
    d_out: &Matrix,
    d_phi: &mut Matrix,
    d_msg: &mut MessageParams,
) -> Result<Matrix> {
    let (n, k) = h.shape();
    let mut g = d_out.clone();
    relu_mask(&trace.out, &mut g);
    let mut d_src = Matrix::zeros(n, k);
    let mut d_dst = Matrix::zeros(n, k);
    let mut d_edge = vec![0.0; k];
    for (e, &(i, j, a)) in trace.edges.iter().enumerate() {
        let ge = g.row(e);
        for o in 0..k {
            d_src.data_mut()[i * k + o] += ge[o];
            d_dst.data_mut()[j * k + o] += ge[o];
            d_edge[o] += a * ge[o];
            d_msg.bias.data_mut()[o] += ge[o];
        }
    }
    let dw_src = matmul_tn(&d_src, h)?;
    let dw_dst = matmul_tn(&d_dst, h)?;
    for o in 0..k {
        let row = d_msg.weight.row_mut(o);
        for c in 0..k {
            row[c] += dw_src.get(o, c);
            row[k + c] += dw_dst.get(o, c);
            row[2 * k + c] += d_edge[o] * phi.data()[c];
        }
    }
    for c in 0..k {
        let mut acc = 0.0;
        for o in 0..k {
            acc += msg.weight.get(o, 2 * k + c) * d_edge[o];
        }
        d_phi.data_mut()[c] += acc;
    }
    let mut dh = Matrix::zeros(n, k);
    for o in 0..k {
        let w = msg.weight.row(o);
        for i in 0..n {
            let (ds, dd) = (d_src.get(i, o), d_dst.get(i, o));
            if ds == 0.0 && dd == 0.0 {
                continue;
            }
            let row = dh.row_mut(i);
            for c in 0..k {
                row[c] += ds * w[c] + dd * w[k + c];
            }
        }
    }
    Ok(dh)
}

/// `m_ij = ReLU(W [h_i; h_j; Φ A_ij] + b)` for every edge with `A_ij > 0`.
pub fn message_pass(g: &ImageGraph, h: &NodeState, layer: &GnnLayer) -> Result<MessageState> {
    let phi = layer
        .phi
        .as_ref()
        .ok_or_else(|| Error::shape("message passing needs an edge transform"))?;
    let msg = layer
        .message
        .as_ref()
        .ok_or_else(|| Error::shape("layer has no message function"))?;
    let topo = Topology::new(g);
    let trace = message_forward_traced(&topo, &h.0, phi, msg)?;
    Ok(MessageState {
        edges: trace.edges.iter().map(|&(i, j, _)| (i, j)).collect(),
        messages: trace.out,
    })
}

/// Graph-level classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    pub input_w: Matrix,
    pub input_b: Matrix,
    pub layers: Vec<GnnLayer>,
    /// `(weight, bias)` per head layer; the last maps to class logits.
    pub head: Vec<(Matrix, Matrix)>,
    pub dropout: f64,
}

/// Forward intermediates for one graph.
struct Trace {
    topo: Topology,
    input: Matrix,
    /// Node states entering each layer, then the final states (post-dropout).
    states: Vec<Matrix>,
    convs: Vec<ConvTrace>,
    dropout_masks: Vec<Option<Vec<f64>>>,
    message: MessageTrace,
    /// Head layer inputs, then the logits.
    head_acts: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

fn linear_vec(w: &Matrix, b: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|o| dot(w.row(o), x) + b.data()[o]).collect()
}

impl GnnModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        layer_type: LayerType,
        num_layers: usize,
        inner_dim: usize,
        mlp_depth: usize,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || inner_dim == 0 {
            return Err(Error::config("GNN dimensions must be positive"));
        }
        if num_layers == 0 {
            return Err(Error::config("need at least one GNN layer"));
        }
        if mlp_depth == 0 {
            return Err(Error::config("head depth must be at least 1"));
        }
        if num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !(0.0..=0.8).contains(&dropout) {
            return Err(Error::config(format!("dropout {dropout} outside [0, 0.8]")));
        }
        let mut rng = seed::rng(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
            Matrix::from_vec(rows, cols, data).expect("sized above")
        };
        let k = inner_dim;
        let input_w = glorot(k, input_dim);
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let last = l + 1 == num_layers;
            let theta = glorot(k, k);
            let theta_nb = (layer_type == LayerType::SageConv).then(|| glorot(k, k));
            let phi = (layer_type == LayerType::EdgeConv || last).then(|| glorot(k, 1));
            let message = last.then(|| MessageParams {
                weight: glorot(k, 3 * k),
                bias: Matrix::zeros(k, 1),
            });
            layers.push(GnnLayer {
                kind: layer_type,
                theta,
                theta_nb,
                phi,
                message,
            });
        }
        let head = (0..mlp_depth)
            .map(|d| {
                let out = if d + 1 == mlp_depth { num_classes } else { k };
                (glorot(out, k), Matrix::zeros(out, 1))
            })
            .collect();
        Ok(Self {
            input_w,
            input_b: Matrix::zeros(k, 1),
            layers,
            head,
            dropout,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_w.cols()
    }

    pub fn inner_dim(&self) -> usize {
        self.input_w.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.head.last().expect("head is never empty").0.rows()
    }

    pub fn layer_type(&self) -> LayerType {
        self.layers[0].kind
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn mlp_depth(&self) -> usize {
        self.head.len()
    }

    /// Same architecture with every parameter zeroed.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, m| m.fill(0.0));
        z
    }

    fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(String, &'a Matrix)) {
        f("input.w".into(), &self.input_w);
        f("input.b".into(), &self.input_b);
        for (l, layer) in self.layers.iter().enumerate() {
            f(format!("layer{l}.theta"), &layer.theta);
            if let Some(m) = &layer.theta_nb {
                f(format!("layer{l}.theta_nb"), m);
            }
            if let Some(m) = &layer.phi {
                f(format!("layer{l}.phi"), m);
            }
            if let Some(msg) = &layer.message {
                f(format!("layer{l}.message.w"), &msg.weight);
                f(format!("layer{l}.message.b"), &msg.bias);
            }
        }
        for (d, (w, b)) in self.head.iter().enumerate() {
            f(format!("head{d}.w"), w);
            f(format!("head{d}.b"), b);
        }
    }

    fn for_each_tensor_mut(&mut self, mut f: impl FnMut(usize, &mut Matrix)) {
        let mut k = 0;
        let mut visit = |m: &mut Matrix| {
            f(k, m);
            k += 1;
        };
        visit(&mut self.input_w);
        visit(&mut self.input_b);
        for layer in &mut self.layers {
            visit(&mut layer.theta);
            if let Some(m) = &mut layer.theta_nb {
                visit(m);
            }
            if let Some(m) = &mut layer.phi {
                visit(m);
            }
            if let Some(msg) = &mut layer.message {
                visit(&mut msg.weight);
                visit(&mut msg.bias);
            }
        }
        for (w, b) in &mut self.head {
            visit(w);
            visit(b);
        }
    }

    /// All parameters as a named set, in a fixed order.
    pub fn param_set(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        self.for_each_tensor(|name, m| {
            ps.add(name, m.clone()).expect("tensor names are unique");
        });
        ps
    }

    /// Copies values from a set produced by [`param_set`](Self::param_set).
    pub fn load_param_set(&mut self, ps: &ParamSet) -> Result<()> {
        let values: Vec<&Matrix> = ps.iter().map(|p| &p.value).collect();
        let mut count = 0;
        let mut err = None;
        self.for_each_tensor_mut(|k, m| {
            count += 1;
            match values.get(k) {
                Some(v) if v.shape() == m.shape() => m.clone_from(v),
                _ => err = Some(k),
            }
        });
        if err.is_some() || count != values.len() {
            return Err(Error::shape("parameter set does not match model layout"));
        }
        Ok(())
    }

    /// Writes this model's tensors (read as gradients) into `ps`' grad slots.
    fn accumulate_into(&self, ps: &mut ParamSet) -> Result<()> {
        let mut tensors = Vec::new();
        self.for_each_tensor(|_, m| tensors.push(m));
        if tensors.len() != ps.len() {
            return Err(Error::shape("gradient layout mismatch"));
        }
        for (k, g) in tensors.into_iter().enumerate() {
            ps.accumulate_grad(crate::numerics::ParamId(k), g)?;
        }
        Ok(())
    }

    fn check_graph(&self, g: &ImageGraph) -> Result<()> {
        if g.feature_dim() != self.input_dim() && g.num_nodes() > 0 {
            return Err(Error::shape(format!(
                "graph features have width {}, model expects {}",
                g.feature_dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Initial node states: `X Wᵀ + b` on present nodes, zero elsewhere.
    pub fn project_input(&self, g: &ImageGraph) -> Result<NodeState> {
        self.check_graph(g)?;
        let topo = Topology::new(g);
        Ok(NodeState(self.project(&topo, &g.node_features)?))
    }

    fn project(&self, topo: &Topology, x: &Matrix) -> Result<Matrix> {
        let mut h = matmul_nt(x, &self.input_w)?;
        for r in 0..h.rows() {
            for (v, b) in h.row_mut(r).iter_mut().zip(self.input_b.data()) {
                *v += b;
            }
        }
        topo.mask_absent(&mut h);
        Ok(h)
    }

    fn forward_traced(&self, g: &ImageGraph, mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>) -> Result<Trace> {
        self.check_graph(g)?;
        let topo = Topology::new(g);
        if topo.edges.is_empty() {
            return Err(Error::DegenerateGraph(
                "graph has no edges, so no messages to pool".into(),
            ));
        }
        let mut h = self.project(&topo, &g.node_features)?;
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut dropout_masks = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let trace = conv_forward_traced(&topo, &h, layer)?;
            let mut next = trace.out.clone();
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if self.dropout > 0.0 => {
                    let keep = 1.0 - self.dropout;
                    let mask: Vec<f64> = (0..next.data().len())
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    for (v, m) in next.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    Some(mask)
                }
                _ => None,
            };
            states.push(std::mem::replace(&mut h, next));
            convs.push(trace);
            dropout_masks.push(mask);
        }
        let last = self.layers.last().expect("at least one layer");
        let message = message_forward_traced(
            &topo,
            &h,
            last.phi.as_ref().expect("last layer has an edge transform"),
            last.message.as_ref().expect("last layer has a message function"),
        )?;
        states.push(h);

        let k = self.inner_dim();
        let mut pooled = vec![0.0; k];
        for e in 0..message.out.rows() {
            for (p, v) in pooled.iter_mut().zip(message.out.row(e)) {
                *p += v;
            }
        }
        let mut head_acts = Vec::with_capacity(self.head.len() + 1);
        let mut x = pooled;
        for (d, (w, b)) in self.head.iter().enumerate() {
            let mut y = linear_vec(w, b, &x);
            if d + 1 < self.head.len() {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            head_acts.push(std::mem::replace(&mut x, y));
        }
        let mut probs = x.clone();
        head_acts.push(x);
        softmax_in_place(&mut probs);
        Ok(Trace {
            topo,
            input: g.node_features.clone(),
            states,
            convs,
            dropout_masks,
            message,
            head_acts,
            probs,
        })
    }

    /// Class probabilities for one graph (inference mode, no dropout).
    pub fn predict(&self, g: &ImageGraph) -> Result<Vec<f64>> {
        Ok(self.forward_traced(g, None)?.probs)
    }

    /// Node states after every layer and the final messages, inference mode.
    pub fn forward_states(&self, g: &ImageGraph) -> Result<(Vec<NodeState>, MessageState)> {
        let t = self.forward_traced(g, None)?;
        let states = t.states.into_iter().map(NodeState).collect();
        Ok((
            states,
            MessageState {
                edges: t.message.edges.iter().map(|&(i, j, _)| (i, j)).collect(),
                messages: t.message.out,
            },
        ))
    }

    /// Cross-entropy of one graph and its gradient (as a zero-initialized
    /// model-shaped accumulator) given the forward trace.
    fn backward(&self, t: &Trace, label: usize, grads: &mut GnnModel) -> Result<f64> {
        let nc = self.num_classes();
        if label >= nc {
            return Err(Error::Domain(format!("label {label} >= {nc} classes")));
        }
        let p = t.probs[label];
        let loss = -p.max(PROB_FLOOR).ln();

        // head
        let mut d: Vec<f64> = t.probs.clone();
        if p > PROB_FLOOR {
            d[label] -= 1.0;
        } else {
            d.iter_mut().for_each(|v| *v = 0.0);
        }
        for (di, (w, _)) in self.head.iter().enumerate().rev() {
            let x = &t.head_acts[di];
            let (gw, gb) = &mut grads.head[di];
            for (o, &dv) in d.iter().enumerate() {
                gb.data_mut()[o] += dv;
                for (g, xv) in gw.row_mut(o).iter_mut().zip(x) {
                    *g += dv * xv;
                }
            }
            let mut dx = vec![0.0; w.cols()];
            for (o, &dv) in d.iter().enumerate() {
                for (a, wv) in dx.iter_mut().zip(w.row(o)) {
                    *a += dv * wv;
                }
            }
            if di > 0 {
                // x is a ReLU output of the previous head layer
                for (a, xv) in dx.iter_mut().zip(x) {
                    if *xv <= 0.0 {
                        *a = 0.0;
                    }
                }
            }
            d = dx;
        }

        // sum pool → every message gets the pooled gradient
        let edges = t.message.out.rows();
        let mut d_msg = Matrix::zeros(edges, d.len());
        for e in 0..edges {
            d_msg.row_mut(e).copy_from_slice(&d);
        }
        let last_idx = self.layers.len() - 1;
        let last = &self.layers[last_idx];
        let h_final = t.states.last().expect("final state");
        let mut dh = {
            let gl = &mut grads.layers[last_idx];
            let mut d_phi = gl.phi.take().expect("gradient slot for edge transform");
            let mut d_params = gl.message.take().expect("gradient slot for message");
            let dh = message_backward(
                h_final,
                last.phi.as_ref().expect("edge transform"),
                last.message.as_ref().expect("message"),
                &t.message,
                &d_msg,
                &mut d_phi,
                &mut d_params,
            )?;
            gl.phi = Some(d_phi);
            gl.message = Some(d_params);
            dh
        };

        for l in (0..self.layers.len()).rev() {
            if let Some(mask) = &t.dropout_masks[l] {
                for (g, m) in dh.data_mut().iter_mut().zip(mask) {
                    *g *= m;
                }
            }
            dh = conv_backward(&t.topo, &t.states[l], &self.layers[l], &t.convs[l], &dh, &mut grads.layers[l])?;
        }

        // input projection (absent rows were masked to zero)
        t.topo.mask_absent(&mut dh);
        grads.input_w.add_assign(&matmul_tn(&dh, &t.input)?)?;
        for r in 0..dh.rows() {
            for (b, g) in grads.input_b.data_mut().iter_mut().zip(dh.row(r)) {
                *b += g;
            }
        }
        Ok(loss)
    }

    /// Mean cross-entropy over labelled graphs (inference mode).
    pub fn loss(&self, graphs: &[ImageGraph]) -> Result<f64> {
        if graphs.is_empty() {
            return Err(Error::config("loss over zero graphs"));
        }
        let mut total = 0.0;
        for g in graphs {
            let y = g
                .label
                .ok_or_else(|| Error::config("graph without a label"))?;
            let probs = self.predict(g)?;
            let row = Matrix::from_vec(1, probs.len(), probs)?;
            total += crate::numerics::cross_entropy(&row, &[y])?;
        }
        Ok(total / graphs.len() as f64)
    }

    /// Mean loss and its gradient as a [`ParamSet`] (dropout off).
    pub fn loss_and_grad(&self, graphs: &[ImageGraph]) -> Result<(f64, ParamSet)> {
        let (loss, grads) = self.batch_gradient(graphs, None)?;
        let mut ps = self.param_set();
        grads.accumulate_into(&mut ps)?;
        Ok((loss, ps))
    }

    /// Forward/backward per graph, accumulated into one buffer in graph
    /// order and averaged. Sequential so the sum never depends on
    /// scheduling.
    pub(crate) fn batch_gradient(
        &self,
        graphs: &[ImageGraph],
        dropout_seeds: Option<&[u64]>,
    ) -> Result<(f64, GnnModel)> {
        if graphs.is_empty() {
            return Err(Error::config("gradient over zero graphs"));
        }
        let mut total = 0.0;
        let mut acc = self.zeros_like();
        for (k, g) in graphs.iter().enumerate() {
            let y = g
                .label
                .ok_or_else(|| Error::config("graph without a label"))?;
            let mut rng = dropout_seeds.map(|s| seed::rng(s[k]));
            let trace = self.forward_traced(g, rng.as_mut())?;
            total += self.backward(&trace, y, &mut acc)?;
        }
        let n = graphs.len() as f64;
        acc.for_each_tensor_mut(|_, m| m.scale(1.0 / n));
        Ok((total / n, acc))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC);
        w.u64(self.layer_type().code())
            .u64(self.num_layers() as u64)
            .u64(self.inner_dim() as u64)
            .u64(self.mlp_depth() as u64)
            .u64(self.num_classes() as u64)
            .u64(self.input_dim() as u64)
            .u64(self.dropout.to_bits());
        self.for_each_tensor(|_, m| {
            w.f64s(m.data());
        });
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::new(bytes, MAGIC)?;
        let layer_type = LayerType::from_code(r.u64()?)?;
        let (layers, inner, depth, classes, input) =
            (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        let dropout = f64::from_bits(r.u64()?);
        let mut model = Self::new(input, classes, layer_type, layers, inner, depth, dropout, 0)?;
        let mut ps = model.param_set();
        r.params_into(&mut ps)?;
        r.finish()?;
        model.load_param_set(&ps)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&persist::read_file(path.as_ref())?)
    }
}

/// Pools final messages and applies the head and softmax.
pub fn readout_predict(model: &GnnModel, final_messages: &MessageState) -> Result<Vec<f64>> {
    if final_messages.edges.is_empty() {
        return Err(Error::DegenerateGraph("no messages to pool".into()));
    }
    let k = model.inner_dim();
    if final_messages.messages.cols() != k {
        return Err(Error::shape(format!(
            "messages have width {}, model expects {k}",
            final_messages.messages.cols()
        )));
    }
    let mut x = vec![0.0; k];
    for e in 0..final_messages.messages.rows() {
        for (p, v) in x.iter_mut().zip(final_messages.messages.row(e)) {
            *p += v;
        }
    }
    for (d, (w, b)) in model.head.iter().enumerate() {
        x = linear_vec(w, b, &x);
        if d + 1 < model.head.len() {
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    softmax_in_place(&mut x);
    Ok(x)
}
