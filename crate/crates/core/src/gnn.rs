//! Typed bipartite message-passing backbone.
//!
//! The backbone maps a graph snapshot (node features `X`, edge features
//! `E`, task vector `z`) to per-node embeddings and a global embedding.
//! Nodes are first encoded by type-specific MLPs. Each of the `L` layers
//! then runs two phases:
//!
//! * Phase A (component to net): every edge carries a message
//!   `phi(h_c, h_n, e, z)`; messages incident to a net are aggregated and
//!   the net embedding is updated to `psi(h_n, a, z)`.
//! * Phase B (net to component): messages `phi(h_n_half, h_c, e, z)` flow
//!   back along every edge using the just-updated net embeddings;
//!   aggregation and `psi(h_c, a, z)` update the component embeddings.
//!
//! `phi` and `psi` weights are shared between the two phases of a layer.
//! Net embeddings keep their Phase-A value until the next layer. The
//! global embedding is a readout MLP applied to the mean of the final node
//! embeddings.
//!
//! All evaluation records onto an autodiff tape; the numeric entry points
//! ([`backbone`], [`encode_nodes`], [`message_pass_layer`]) wrap a private
//! tape and copy the values out. Feature construction from plant
//! measurements lives in the policy module.

use crate::autodiff::{vector_mean, Gradients, MatrixVar, Tape, VectorVar};
use crate::netlist::{ConverterGraph, NodeType};
use crate::real;
use crate::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Permutation-invariant aggregation over the messages incident to a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Sum,
    Mean,
    Max,
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Sum => "sum",
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
        })
    }
}

impl FromStr for Aggregator {
    type Err = GnnError;
    fn from_str(s: &str) -> Result<Self, GnnError> {
        match s {
            "sum" => Ok(Aggregator::Sum),
            "mean" => Ok(Aggregator::Mean),
            "max" => Ok(Aggregator::Max),
            other => Err(GnnError::Config(format!("unknown aggregator '{other}'"))),
        }
    }
}

/// Architecture hyperparameters. All dimensions are at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    /// Number of message-passing layers.
    pub layers: usize,
    /// Node embedding dimension.
    pub d_h: usize,
    /// Message dimension.
    pub d_m: usize,
    /// Global embedding dimension.
    pub d_g: usize,
    /// Node feature dimension.
    pub d_x: usize,
    /// Edge feature dimension.
    pub d_e: usize,
    /// Task vector dimension.
    pub d_z: usize,
    /// Hidden width of every two-layer MLP.
    pub mlp_hidden: usize,
    pub aggregator: Aggregator,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            layers: 3,
            d_h: 32,
            d_m: 32,
            d_g: 16,
            d_x: 3,
            d_e: 2,
            d_z: 2,
            mlp_hidden: 32,
            aggregator: Aggregator::Mean,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<(), GnnError> {
        for (name, v) in [
            ("layers", self.layers),
            ("d_h", self.d_h),
            ("d_m", self.d_m),
            ("d_g", self.d_g),
            ("d_x", self.d_x),
            ("d_e", self.d_e),
            ("d_z", self.d_z),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return Err(GnnError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GnnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("flat parameter vector has length {found}, expected {expected}")]
    FlatLength { expected: usize, found: usize },
    #[error("parameter vector contains a non-finite entry")]
    NonFiniteParameter,
}

/// Dense row-major matrix of weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    fn init(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| real::<T>(rng.random_range(-bound..bound)))
            .collect();
        Matrix { rows, cols, data }
    }
}

/// Two-layer perceptron `w2 * tanh(w1 * x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    /// Initializes both layers uniformly in `[-1/sqrt(fan_in), +1/sqrt(fan_in))`.
    pub(crate) fn init(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound1 = 1.0 / (input as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        Mlp {
            w1: Matrix::init(hidden, input, bound1, rng),
            b1: (0..hidden).map(|_| real(rng.random_range(-bound1..bound1))).collect(),
            w2: Matrix::init(output, hidden, bound2, rng),
            b2: (0..output).map(|_| real(rng.random_range(-bound2..bound2))).collect(),
        }
    }

    pub(crate) fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            w1: Matrix::zeros(hidden, input),
            b1: vec![T::zero(); hidden],
            w2: Matrix::zeros(output, hidden),
            b2: vec![T::zero(); output],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.data.len() + self.b1.len() + self.w2.data.len() + self.b2.len()
    }

    /// Parameter count implied by the shape alone.
    pub(crate) fn shape_count(input: usize, hidden: usize, output: usize) -> usize {
        hidden * input + hidden + output * hidden + output
    }

    /// Flat order: `w1` row-major, `b1`, `w2` row-major, `b2`.
    pub(crate) fn push_flat(&self, out: &mut Vec<T>) {
        out.extend_from_slice(&self.w1.data);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2.data);
        out.extend_from_slice(&self.b2);
    }

    pub(crate) fn read_flat(
        input: usize,
        hidden: usize,
        output: usize,
        cursor: &mut std::slice::Iter<'_, T>,
    ) -> Option<Self> {
        let mut take = |n: usize| -> Option<Vec<T>> {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(*cursor.next()?);
            }
            Some(v)
        };
        Some(Mlp {
            w1: Matrix {
                rows: hidden,
                cols: input,
                data: take(hidden * input)?,
            },
            b1: take(hidden)?,
            w2: Matrix {
                rows: output,
                cols: hidden,
                data: take(output * hidden)?,
            },
            b2: take(output)?,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundMlp<'t, T> {
        BoundMlp {
            w1: tape.matrix(self.w1.rows, self.w1.cols, &self.w1.data),
            b1: tape.vector(&self.b1),
            w2: tape.matrix(self.w2.rows, self.w2.cols, &self.w2.data),
            b2: tape.vector(&self.b2),
        }
    }
}

/// An [`Mlp`] recorded on a tape as parameter leaves.
#[derive(Clone, Copy)]
pub struct BoundMlp<'t, T> {
    w1: MatrixVar<'t, T>,
    b1: VectorVar<'t, T>,
    w2: MatrixVar<'t, T>,
    b2: VectorVar<'t, T>,
}

impl<'t, T: Scalar> BoundMlp<'t, T> {
    pub fn apply(&self, x: VectorVar<'t, T>) -> VectorVar<'t, T> {
        self.w2.affine(self.w1.affine(x, self.b1).tanh(), self.b2)
    }

    /// Appends this MLP's gradients in flat parameter order.
    pub(crate) fn push_gradients(&self, grads: &Gradients<T>, out: &mut Vec<T>) {
        out.extend_from_slice(grads.wrt_matrix(self.w1));
        out.extend_from_slice(grads.wrt_vector(self.b1));
        out.extend_from_slice(grads.wrt_matrix(self.w2));
        out.extend_from_slice(grads.wrt_vector(self.b2));
    }
}

/// Message and update networks of one layer, shared between phases.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParameters<T> {
    /// `phi`: (sender, receiver, edge, task) of size `2*d_h + d_e + d_z` to `d_m`.
    pub message: Mlp<T>,
    /// `psi`: (receiver, aggregate, task) of size `d_h + d_m + d_z` to `d_h`.
    pub update: Mlp<T>,
}

/// Full backbone parameter set together with its architecture. Keeping the
/// configuration inside the parameter set pins shapes and checkpoint
/// headers to one source of truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParameters<T> {
    pub config: GnnConfig,
    /// Type-specific encoders, indexed per [`NodeType::ALL`].
    pub encoders: Vec<Mlp<T>>,
    pub layers: Vec<LayerParameters<T>>,
    pub readout: Mlp<T>,
}

impl<T: Scalar> GnnParameters<T> {
    /// Deterministic seeded initialization; draws happen in flat parameter
    /// order. Panics on an invalid configuration.
    pub fn init(config: GnnConfig, seed: u64) -> Self {
        config.validate().expect("configuration must be valid");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(config, &mut rng)
    }

    /// Initialization that continues an existing stream, so composite
    /// parameter sets can draw everything from one seed.
    pub(crate) fn init_with_rng(config: GnnConfig, rng: &mut ChaCha8Rng) -> Self {
        config.validate().expect("configuration must be valid");
        Self::generate(config, |i, h, o| Mlp::init(i, h, o, rng))
    }

    /// All-zero parameters with valid shapes, for tests and baselines.
    pub fn zeros(config: GnnConfig) -> Self {
        config.validate().expect("configuration must be valid");
        Self::generate(config, Mlp::zeros)
    }

    fn generate(config: GnnConfig, mut make: impl FnMut(usize, usize, usize) -> Mlp<T>) -> Self {
        let enc_in = config.d_x + config.d_z;
        let msg_in = 2 * config.d_h + config.d_e + config.d_z;
        let upd_in = config.d_h + config.d_m + config.d_z;
        let encoders = NodeType::ALL
            .iter()
            .map(|_| make(enc_in, config.mlp_hidden, config.d_h))
            .collect();
        let layers = (0..config.layers)
            .map(|_| LayerParameters {
                message: make(msg_in, config.mlp_hidden, config.d_m),
                update: make(upd_in, config.mlp_hidden, config.d_h),
            })
            .collect();
        let readout = make(config.d_h, config.mlp_hidden, config.d_g);
        GnnParameters {
            config,
            encoders,
            layers,
            readout,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.encoders.iter().map(Mlp::parameter_count).sum::<usize>()
            + self
                .layers
                .iter()
                .map(|l| l.message.parameter_count() + l.update.parameter_count())
                .sum::<usize>()
            + self.readout.parameter_count()
    }

    /// Flattens all weights: encoders in [`NodeType::ALL`] order, then per
    /// layer message then update, then readout; each MLP as documented on
    /// [`Mlp::push_flat`].
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for enc in &self.encoders {
            enc.push_flat(&mut out);
        }
        for layer in &self.layers {
            layer.message.push_flat(&mut out);
            layer.update.push_flat(&mut out);
        }
        self.readout.push_flat(&mut out);
        out
    }

    /// Rebuilds parameters from a flat vector in [`GnnParameters::to_flat`]
    /// order.
    pub fn from_flat(config: GnnConfig, values: &[T]) -> Result<Self, GnnError> {
        config.validate()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GnnError::NonFiniteParameter);
        }
        let expected = Self::zeros(config).parameter_count();
        if values.len() != expected {
            return Err(GnnError::FlatLength {
                expected,
                found: values.len(),
            });
        }
        let enc_in = config.d_x + config.d_z;
        let msg_in = 2 * config.d_h + config.d_e + config.d_z;
        let upd_in = config.d_h + config.d_m + config.d_z;
        let mut cursor = values.iter();
        let mut next = |i: usize, o: usize| {
            Mlp::read_flat(i, config.mlp_hidden, o, &mut cursor)
                .expect("length checked against parameter count")
        };
        let encoders = NodeType::ALL
            .iter()
            .map(|_| next(enc_in, config.d_h))
            .collect();
        let layers = (0..config.layers)
            .map(|_| LayerParameters {
                message: next(msg_in, config.d_m),
                update: next(upd_in, config.d_h),
            })
            .collect();
        let readout = next(config.d_h, config.d_g);
        Ok(GnnParameters {
            config,
            encoders,
            layers,
            readout,
        })
    }

    /// Records every weight as tape leaves, in flat parameter order.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundGnn<'t, T> {
        BoundGnn {
            config: self.config,
            encoders: self.encoders.iter().map(|m| m.bind(tape)).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    message: l.message.bind(tape),
                    update: l.update.bind(tape),
                })
                .collect(),
            readout: self.readout.bind(tape),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundLayer<'t, T> {
    pub message: BoundMlp<'t, T>,
    pub update: BoundMlp<'t, T>,
}

/// Backbone weights bound to a tape.
pub struct BoundGnn<'t, T> {
    pub config: GnnConfig,
    encoders: Vec<BoundMlp<'t, T>>,
    layers: Vec<BoundLayer<'t, T>>,
    readout: BoundMlp<'t, T>,
}

impl<'t, T: Scalar> BoundGnn<'t, T> {
    /// Gradients of all backbone weights in flat parameter order.
    pub fn push_gradients(&self, grads: &Gradients<T>, out: &mut Vec<T>) {
        for enc in &self.encoders {
            enc.push_gradients(grads, out);
        }
        for layer in &self.layers {
            layer.message.push_gradients(grads, out);
            layer.update.push_gradients(grads, out);
        }
        self.readout.push_gradients(grads, out);
    }
}

/// Aggregates messages with the configured reduction; the empty multiset
/// aggregates to zero.
fn aggregate<'t, T: Scalar>(
    tape: &'t Tape<T>,
    messages: &[VectorVar<'t, T>],
    aggregator: Aggregator,
    d_m: usize,
) -> VectorVar<'t, T> {
    if messages.is_empty() {
        return tape.zeros(d_m);
    }
    match aggregator {
        Aggregator::Sum => messages[1..]
            .iter()
            .fold(messages[0], |acc, &m| acc + m),
        Aggregator::Mean => vector_mean(messages),
        Aggregator::Max => messages[1..]
            .iter()
            .fold(messages[0], |acc, &m| acc.emax(m)),
    }
}

fn check_snapshot_dims<T: Scalar>(
    graph: &ConverterGraph<T>,
    x_rows: usize,
    x_dim: Option<usize>,
    e_rows: usize,
    e_dim: Option<usize>,
    z_dim: usize,
    config: &GnnConfig,
) -> Result<(), GnnError> {
    if x_rows != graph.node_count() {
        return Err(GnnError::Dimension(format!(
            "feature matrix has {x_rows} rows for {} nodes",
            graph.node_count()
        )));
    }
    if let Some(d) = x_dim {
        if d != config.d_x {
            return Err(GnnError::Dimension(format!(
                "node feature dimension {d}, configured d_x = {}",
                config.d_x
            )));
        }
    }
    if e_rows != graph.edges.len() {
        return Err(GnnError::Dimension(format!(
            "edge feature matrix has {e_rows} rows for {} edges",
            graph.edges.len()
        )));
    }
    if let Some(d) = e_dim {
        if d != config.d_e {
            return Err(GnnError::Dimension(format!(
                "edge feature dimension {d}, configured d_e = {}",
                config.d_e
            )));
        }
    }
    if z_dim != config.d_z {
        return Err(GnnError::Dimension(format!(
            "task vector dimension {z_dim}, configured d_z = {}",
            config.d_z
        )));
    }
    Ok(())
}

/// Tape-recorded initial embeddings: `h0(v) = enc_type(v)(x(v), z)`.
pub fn encode_nodes_on_tape<'t, T: Scalar>(
    tape: &'t Tape<T>,
    graph: &ConverterGraph<T>,
    x: &[VectorVar<'t, T>],
    z: VectorVar<'t, T>,
    bound: &BoundGnn<'t, T>,
) -> Result<Vec<VectorVar<'t, T>>, GnnError> {
    check_snapshot_dims(
        graph,
        x.len(),
        x.first().map(|v| v.len()),
        graph.edges.len(),
        None,
        z.len(),
        &bound.config,
    )?;
    for (v, row) in x.iter().enumerate() {
        if row.len() != bound.config.d_x {
            return Err(GnnError::Dimension(format!(
                "node {v} feature length {}, configured d_x = {}",
                row.len(),
                bound.config.d_x
            )));
        }
    }
    Ok(x.iter()
        .enumerate()
        .map(|(v, &row)| {
            let enc = &bound.encoders[graph.node_type(v).index()];
            enc.apply(tape.concat(&[row, z]))
        })
        .collect())
}

/// One two-phase layer on the tape. `h` holds one embedding per node in
/// combined order; the result replaces component embeddings with their
/// Phase-B update and net embeddings with their Phase-A update.
pub fn message_pass_layer_on_tape<'t, T: Scalar>(
    tape: &'t Tape<T>,
    graph: &ConverterGraph<T>,
    h: &[VectorVar<'t, T>],
    e: &[VectorVar<'t, T>],
    z: VectorVar<'t, T>,
    layer: &BoundLayer<'t, T>,
    config: &GnnConfig,
) -> Result<Vec<VectorVar<'t, T>>, GnnError> {
    check_snapshot_dims(
        graph,
        h.len(),
        None,
        e.len(),
        e.first().map(|v| v.len()),
        z.len(),
        config,
    )?;
    let n_c = graph.components.len();
    let net_node = |net: usize| n_c + net;

    // Phase A: component -> net.
    let mut per_net: Vec<Vec<VectorVar<'t, T>>> = vec![Vec::new(); graph.nets.len()];
    for (idx, edge) in graph.edges.iter().enumerate() {
        let m = layer.message.apply(tape.concat(&[
            h[edge.component],
            h[net_node(edge.net)],
            e[idx],
            z,
        ]));
        per_net[edge.net].push(m);
    }
    let half: Vec<VectorVar<'t, T>> = (0..graph.nets.len())
        .map(|n| {
            let a = aggregate(tape, &per_net[n], config.aggregator, config.d_m);
            layer.update.apply(tape.concat(&[h[net_node(n)], a, z]))
        })
        .collect();

    // Phase B: net -> component, using the Phase-A net embeddings.
    let mut per_component: Vec<Vec<VectorVar<'t, T>>> = vec![Vec::new(); n_c];
    for (idx, edge) in graph.edges.iter().enumerate() {
        let m = layer
            .message
            .apply(tape.concat(&[half[edge.net], h[edge.component], e[idx], z]));
        per_component[edge.component].push(m);
    }
    let mut out: Vec<VectorVar<'t, T>> = (0..n_c)
        .map(|c| {
            let a = aggregate(tape, &per_component[c], config.aggregator, config.d_m);
            layer.update.apply(tape.concat(&[h[c], a, z]))
        })
        .collect();
    out.extend(half);
    Ok(out)
}

/// Full backbone on the tape: encode, `L` layers, mean-pool readout.
/// Returns final per-node embeddings and the global embedding.
pub fn backbone_on_tape<'t, T: Scalar>(
    tape: &'t Tape<T>,
    graph: &ConverterGraph<T>,
    x: &[VectorVar<'t, T>],
    e: &[VectorVar<'t, T>],
    z: VectorVar<'t, T>,
    bound: &BoundGnn<'t, T>,
) -> Result<(Vec<VectorVar<'t, T>>, VectorVar<'t, T>), GnnError> {
    let mut h = encode_nodes_on_tape(tape, graph, x, z, bound)?;
    for layer in &bound.layers {
        h = message_pass_layer_on_tape(tape, graph, &h, e, z, layer, &bound.config)?;
    }
    let h_global = bound.readout.apply(vector_mean(&h));
    Ok((h, h_global))
}

/// Final node embeddings (`|V| x d_h`) and the global embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings<T> {
    pub h: Vec<Vec<T>>,
    pub h_global: Vec<T>,
}

fn leaves<'t, T: Scalar>(
    tape: &'t Tape<T>,
    rows: &[Vec<T>],
) -> Vec<VectorVar<'t, T>> {
    rows.iter().map(|r| tape.vector(r)).collect()
}

/// Numeric initial embeddings.
pub fn encode_nodes<T: Scalar>(
    graph: &ConverterGraph<T>,
    x: &[Vec<T>],
    z: &[T],
    params: &GnnParameters<T>,
) -> Result<Vec<Vec<T>>, GnnError> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let xs = leaves(&tape, x);
    let zv = tape.vector(z);
    let h = encode_nodes_on_tape(&tape, graph, &xs, zv, &bound)?;
    Ok(h.into_iter().map(|v| v.to_vec()).collect())
}

/// Numeric single layer at `layer_index`.
pub fn message_pass_layer<T: Scalar>(
    graph: &ConverterGraph<T>,
    h: &[Vec<T>],
    e: &[Vec<T>],
    z: &[T],
    params: &GnnParameters<T>,
    layer_index: usize,
) -> Result<Vec<Vec<T>>, GnnError> {
    if layer_index >= params.layers.len() {
        return Err(GnnError::Dimension(format!(
            "layer index {layer_index} out of range for {} layers",
            params.layers.len()
        )));
    }
    for (v, row) in h.iter().enumerate() {
        if row.len() != params.config.d_h {
            return Err(GnnError::Dimension(format!(
                "node {v} embedding length {}, configured d_h = {}",
                row.len(),
                params.config.d_h
            )));
        }
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let hs = leaves(&tape, h);
    let es = leaves(&tape, e);
    let zv = tape.vector(z);
    let out = message_pass_layer_on_tape(
        &tape,
        graph,
        &hs,
        &es,
        zv,
        &bound.layers[layer_index],
        &bound.config,
    )?;
    Ok(out.into_iter().map(|v| v.to_vec()).collect())
}

/// Numeric full backbone.
pub fn backbone<T: Scalar>(
    graph: &ConverterGraph<T>,
    x: &[Vec<T>],
    e: &[Vec<T>],
    z: &[T],
    params: &GnnParameters<T>,
) -> Result<Embeddings<T>, GnnError> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let xs = leaves(&tape, x);
    let es = leaves(&tape, e);
    let zv = tape.vector(z);
    let (h, h_global) = backbone_on_tape(&tape, graph, &xs, &es, zv, &bound)?;
    Ok(Embeddings {
        h: h.into_iter().map(|v| v.to_vec()).collect(),
        h_global: h_global.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlist::parse_netlist;

    const BUCK: &str = "\
V1 vin 0 48.0
S1 vin sw
D1 sw 0
L1 sw out 1e-4
C1 out 0 1e-5
R1 out 0 10.0
";

    fn small_config() -> GnnConfig {
        GnnConfig {
            layers: 2,
            d_h: 4,
            d_m: 3,
            d_g: 2,
            d_x: 3,
            d_e: 2,
            d_z: 2,
            mlp_hidden: 5,
            aggregator: Aggregator::Mean,
        }
    }

    fn random_features(
        graph: &ConverterGraph<f64>,
        config: &GnnConfig,
        seed: u64,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = |d: usize| -> Vec<f64> { (0..d).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let x = (0..graph.node_count()).map(|_| row(config.d_x)).collect();
        let e = (0..graph.edges.len()).map(|_| row(config.d_e)).collect();
        let z = row(config.d_z);
        (x, e, z)
    }

    #[test]
    fn config_validation() {
        assert!(GnnConfig::default().validate().is_ok());
        let no_layers = GnnConfig {
            layers: 0,
            ..GnnConfig::default()
        };
        assert!(matches!(no_layers.validate(), Err(GnnError::Config(_))));
        let no_messages = GnnConfig {
            d_m: 0,
            ..GnnConfig::default()
        };
        assert!(no_messages.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = small_config();
        let a = GnnParameters::<f64>::init(cfg, 7);
        let b = GnnParameters::<f64>::init(cfg, 7);
        assert_eq!(a, b);
        let c = GnnParameters::<f64>::init(cfg, 8);
        assert_ne!(a, c);

        let enc_bound = 1.0 / ((cfg.d_x + cfg.d_z) as f64).sqrt();
        for v in &a.encoders[0].w1.data {
            assert!(v.abs() <= enc_bound);
        }
        let hidden_bound = 1.0 / (cfg.mlp_hidden as f64).sqrt();
        for v in &a.readout.w2.data {
            assert!(v.abs() <= hidden_bound);
        }
    }

    #[test]
    fn flat_round_trip_preserves_parameters() {
        let params = GnnParameters::<f64>::init(small_config(), 3);
        let flat = params.to_flat();
        assert_eq!(flat.len(), params.parameter_count());
        let back = GnnParameters::from_flat(small_config(), &flat).unwrap();
        assert_eq!(params, back);

        let err = GnnParameters::<f64>::from_flat(small_config(), &flat[1..]).unwrap_err();
        assert!(matches!(err, GnnError::FlatLength { .. }));
        let mut poisoned = flat.clone();
        poisoned[0] = f64::NAN;
        assert_eq!(
            GnnParameters::from_flat(small_config(), &poisoned).unwrap_err(),
            GnnError::NonFiniteParameter
        );
    }

    #[test]
    fn zero_parameters_give_zero_embeddings() {
        let graph = parse_netlist::<f64>(BUCK).unwrap();
        let cfg = small_config();
        let params = GnnParameters::zeros(cfg);
        let (x, e, z) = random_features(&graph, &cfg, 1);
        let h0 = encode_nodes(&graph, &x, &z, &params).unwrap();
        assert!(h0.iter().flatten().all(|&v| v == 0.0));
        let emb = backbone(&graph, &x, &e, &z, &params).unwrap();
        assert!(emb.h.iter().flatten().all(|&v| v == 0.0));
        assert!(emb.h_global.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_type_same_features_encode_identically() {
        // Two resistors around one extra net; identical features.
        let graph = parse_netlist::<f64>("R1 a 0 10\nR2 a 0 10").unwrap();
        let cfg = small_config();
        let params = GnnParameters::init(cfg, 11);
        let x = vec![vec![0.3, -0.2, 0.9]; graph.node_count()];
        let z = vec![0.1, 0.4];
        let h0 = encode_nodes(&graph, &x, &z, &params).unwrap();
        assert_eq!(h0[0], h0[1]);
        // Component vs net encoders differ despite identical features.
        assert_ne!(h0[0], h0[2]);
    }

    #[test]
    fn dimension_mismatches_are_reported() {
        let graph = parse_netlist::<f64>(BUCK).unwrap();
        let cfg = small_config();
        let params = GnnParameters::init(cfg, 5);
        let (x, e, z) = random_features(&graph, &cfg, 2);

        let short_x = x[1..].to_vec();
        assert!(matches!(
            backbone(&graph, &short_x, &e, &z, &params),
            Err(GnnError::Dimension(_))
        ));
        let bad_z = vec![0.0; cfg.d_z + 1];
        assert!(matches!(
            backbone(&graph, &x, &e, &bad_z, &params),
            Err(GnnError::Dimension(_))
        ));
        let bad_e = vec![vec![0.0; cfg.d_e + 1]; graph.edges.len()];
        assert!(matches!(
            backbone(&graph, &x, &bad_e, &z, &params),
            Err(GnnError::Dimension(_))
        ));
    }

    /// Plain-loop MLP evaluation, independent of the tape path.
    fn eval_mlp_by_hand(m: &Mlp<f64>, input: &[f64]) -> Vec<f64> {
        let dot = |weights: &Matrix<f64>, i: usize, x: &[f64], bias: f64| {
            weights.data[i * weights.cols..(i + 1) * weights.cols]
                .iter()
                .zip(x)
                .fold(bias, |acc, (w, v)| acc + w * v)
        };
        let hidden: Vec<f64> = (0..m.w1.rows)
            .map(|i| dot(&m.w1, i, input, m.b1[i]).tanh())
            .collect();
        (0..m.w2.rows)
            .map(|i| dot(&m.w2, i, &hidden, m.b2[i]))
            .collect()
    }

    /// Update MLP that passes the aggregate block through almost linearly:
    /// small gain into tanh, inverse gain out, zero elsewhere. Lets a test
    /// observe the aggregate through the public layer operation.
    fn pass_through_update(cfg: &GnnConfig, gain: f64) -> Mlp<f64> {
        let mut m = Mlp::zeros(cfg.d_h + cfg.d_m + cfg.d_z, cfg.mlp_hidden, cfg.d_h);
        for j in 0..cfg.d_m.min(cfg.mlp_hidden).min(cfg.d_h) {
            m.w1.data[j * m.w1.cols + cfg.d_h + j] = gain;
            m.w2.data[j * m.w2.cols + j] = 1.0 / gain;
        }
        m
    }

    fn encode(
        g: &ConverterGraph<f64>,
        x: &[Vec<f64>],
        z: &[f64],
        params: &GnnParameters<f64>,
    ) -> Vec<Vec<f64>> {
        encode_nodes(g, x, z, params).unwrap()
    }

    fn resistor_features(g: &ConverterGraph<f64>) -> Vec<Vec<f64>> {
        (0..g.node_count())
            .map(|v| match g.node_type(v) {
                NodeType::Resistor => vec![0.2, 0.4, 0.0],
                _ => vec![0.0, 0.0, 0.5],
            })
            .collect()
    }

    #[test]
    fn singleton_sum_aggregate_equals_the_message() {
        // Net "a" of a lone resistor receives exactly one message. With the
        // pass-through update the layer output exposes the aggregate, which
        // must equal phi evaluated by hand on (sender, receiver, edge, z).
        let graph = parse_netlist::<f64>("R1 a 0 10").unwrap();
        let mut cfg = small_config();
        cfg.aggregator = Aggregator::Sum;
        let mut params = GnnParameters::init(cfg, 9);
        params.layers[0].update = pass_through_update(&cfg, 1e-4);

        let x = resistor_features(&graph);
        let z = vec![0.5, 0.1];
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let h0 = encode(&graph, &x, &z, &params);
        let out = message_pass_layer(&graph, &h0, &e, &z, &params, 0).unwrap();

        // Hand message: sender R1 (node 0), receiver net "a" (node 1).
        let input: Vec<f64> = h0[0]
            .iter()
            .chain(&h0[1])
            .chain(&[1.0, 0.0])
            .chain(&z)
            .copied()
            .collect();
        let message = eval_mlp_by_hand(&params.layers[0].message, &input);

        let net_a = graph.components.len();
        for j in 0..cfg.d_m {
            assert!(
                (out[net_a][j] - message[j]).abs() < 1e-6,
                "component {j}: {} vs {}",
                out[net_a][j],
                message[j]
            );
        }
    }

    #[test]
    fn duplicated_component_doubles_sum_aggregate() {
        // Adding an identical resistor on the same nets duplicates its
        // message, so the sum aggregate (observed through the pass-through
        // update) exactly doubles.
        let single = parse_netlist::<f64>("R1 a 0 10").unwrap();
        let double = parse_netlist::<f64>("R1 a 0 10\nR2 a 0 10").unwrap();
        let mut cfg = small_config();
        cfg.aggregator = Aggregator::Sum;
        let mut params = GnnParameters::init(cfg, 9);
        params.layers[0].update = pass_through_update(&cfg, 1e-4);

        let z = vec![0.5, 0.1];
        let e_single = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let e_double = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ];
        let h_single = {
            let x = resistor_features(&single);
            message_pass_layer(&single, &encode(&single, &x, &z, &params), &e_single, &z, &params, 0)
                .unwrap()
        };
        let h_double = {
            let x = resistor_features(&double);
            message_pass_layer(&double, &encode(&double, &x, &z, &params), &e_double, &z, &params, 0)
                .unwrap()
        };

        let a_single = single.components.len(); // net "a" is first net
        let a_double = double.components.len();
        for j in 0..cfg.d_m {
            let once = h_single[a_single][j];
            let twice = h_double[a_double][j];
            assert!(
                (twice - 2.0 * once).abs() < 1e-6,
                "component {j}: {twice} vs doubled {once}"
            );
        }
        assert!(h_single[a_single].iter().any(|v| v.abs() > 1e-9));
    }

    #[test]
    fn edge_order_does_not_change_aggregation() {
        let graph = parse_netlist::<f64>(BUCK).unwrap();
        for aggregator in [Aggregator::Sum, Aggregator::Mean, Aggregator::Max] {
            let mut cfg = small_config();
            cfg.aggregator = aggregator;
            let params = GnnParameters::init(cfg, 21);
            let (x, e, z) = random_features(&graph, &cfg, 3);
            let base = backbone(&graph, &x, &e, &z, &params).unwrap();

            // Reverse edge enumeration together with the edge features.
            let mut shuffled = graph.clone();
            shuffled.edges.reverse();
            let e_rev: Vec<Vec<f64>> = e.iter().rev().cloned().collect();
            let out = backbone(&shuffled, &x, &e_rev, &z, &params).unwrap();
            let tol = if aggregator == Aggregator::Max { 0.0 } else { 1e-12 };
            for (a, b) in base.h.iter().flatten().zip(out.h.iter().flatten()) {
                assert!((a - b).abs() <= tol, "{a} vs {b} under {aggregator}");
            }
        }
    }

    #[test]
    fn backbone_embeds_every_node_and_pools_globally() {
        let graph = parse_netlist::<f64>(BUCK).unwrap();
        let cfg = small_config();
        let params = GnnParameters::init(cfg, 17);
        let (x, e, z) = random_features(&graph, &cfg, 4);
        let emb = backbone(&graph, &x, &e, &z, &params).unwrap();
        assert_eq!(emb.h.len(), 10);
        assert!(emb.h.iter().all(|r| r.len() == cfg.d_h));
        assert_eq!(emb.h_global.len(), cfg.d_g);
        assert!(emb.h.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn gradients_flow_to_every_parameter_group() {
        let graph = parse_netlist::<f64>(BUCK).unwrap();
        let cfg = small_config();
        let params = GnnParameters::init(cfg, 13);
        let (x, e, z) = random_features(&graph, &cfg, 5);

        let tape = Tape::new();
        let bound = params.bind(&tape);
        let xs = leaves(&tape, &x);
        let es = leaves(&tape, &e);
        let zv = tape.vector(&z);
        let (h, h_global) = backbone_on_tape(&tape, &graph, &xs, &es, zv, &bound).unwrap();
        let probe = h[0].component(0) + h_global.component(1);
        let grads = tape.gradients(probe).unwrap();
        let mut flat = Vec::new();
        bound.push_gradients(&grads, &mut flat);
        assert_eq!(flat.len(), params.parameter_count());
        assert!(flat.iter().any(|g| g.abs() > 0.0));
    }
}
