//! Model configuration, trainable parameters, and whole-model
//! forward/backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{build_graph, prune_input, Connectivity, GridGraph, ImageSample};
use crate::layers::{self, ApplyT, AttentionGrads, AttentionWeights};
use crate::matrix::Matrix;
use crate::sparse::{sparsify, SparseMatrix};

/// Which message-passing layer backs the GNN positions in the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnnKind {
    Sage,
    Gcn,
    Gat,
}

impl GnnKind {
    pub fn name(self) -> &'static str {
        match self {
            GnnKind::Sage => "sage",
            GnnKind::Gcn => "gcn",
            GnnKind::Gat => "gat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sage" => Ok(GnnKind::Sage),
            "gcn" => Ok(GnnKind::Gcn),
            "gat" => Ok(GnnKind::Gat),
            other => Err(Error::Config(format!("unknown GNN layer type '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Gnn {
        kind: GnnKind,
        c_in: usize,
        c_out: usize,
    },
    Pool {
        width: usize,
    },
    Attention {
        width: usize,
        vertex: bool,
        feature: bool,
    },
    Flatten {
        len: usize,
    },
    FullyConnected {
        c_in: usize,
        c_out: usize,
        last: bool,
    },
}

impl LayerSpec {
    pub fn name(&self) -> String {
        match self {
            LayerSpec::Gnn { kind, c_in, c_out } => format!("{}({c_in}->{c_out})", kind.name()),
            LayerSpec::Pool { width } => format!("pool({width})"),
            LayerSpec::Attention { width, vertex, feature } => {
                format!("attention({width},v={vertex},f={feature})")
            }
            LayerSpec::Flatten { len } => format!("flatten({len})"),
            LayerSpec::FullyConnected { c_in, c_out, .. } => format!("fc({c_in}->{c_out})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub connectivity: Connectivity,
    pub input_channels: usize,
    /// Side length of the (square) input grid.
    pub grid_size: usize,
    pub stack: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Validate width chaining, pool divisibility, and flatten placement.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_channels;
        let mut side = self.grid_size;
        let mut flattened: Option<usize> = None;
        for (i, spec) in self.stack.iter().enumerate() {
            match spec {
                LayerSpec::Gnn { c_in, c_out, .. } => {
                    if flattened.is_some() || *c_in != width {
                        return Err(Error::Config(format!(
                            "layer {i} ({}) expects width {width}",
                            spec.name()
                        )));
                    }
                    width = *c_out;
                }
                LayerSpec::Pool { width: w } => {
                    if flattened.is_some() || *w != width {
                        return Err(Error::Config(format!("layer {i} pool width mismatch")));
                    }
                    if side % 2 != 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: grid side {side} not divisible by 2"
                        )));
                    }
                    side /= 2;
                }
                LayerSpec::Attention { width: w, .. } => {
                    if flattened.is_some() || *w != width {
                        return Err(Error::Config(format!("layer {i} attention width mismatch")));
                    }
                }
                LayerSpec::Flatten { len } => {
                    if flattened.is_some() || *len != side * side * width {
                        return Err(Error::Config(format!(
                            "layer {i}: flatten length {len} != {side}x{side}x{width}"
                        )));
                    }
                    flattened = Some(*len);
                }
                LayerSpec::FullyConnected { c_in, c_out, last } => {
                    let expect = flattened.ok_or_else(|| {
                        Error::Config(format!("layer {i}: FC before flatten"))
                    })?;
                    if *c_in != expect {
                        return Err(Error::Config(format!(
                            "layer {i}: FC input {c_in} != {expect}"
                        )));
                    }
                    flattened = Some(*c_out);
                    if *last && *c_out != self.num_classes {
                        return Err(Error::Config(format!(
                            "final FC emits {c_out}, expected {} classes",
                            self.num_classes
                        )));
                    }
                }
            }
        }
        match self.stack.last() {
            Some(LayerSpec::FullyConnected { last: true, .. }) => Ok(()),
            _ => Err(Error::Config("stack must end with the final FC layer".into())),
        }
    }

    /// Number of GNN-bearing layers (the message-passing depth L).
    pub fn gnn_layer_count(&self) -> usize {
        self.stack
            .iter()
            .filter(|s| matches!(s, LayerSpec::Gnn { .. }))
            .count()
    }
}

/// The default 12-layer stack: three blocks of GNN/attention/pool at
/// widths 32/64/128, then flatten + classifier (counted as one layer).
/// `grid_size` must be divisible by 8; `extra_pools` appends additional
/// pooling stages for larger grids (e.g. 2 extra pools for 128 px chips).
pub fn default_config(
    kind: GnnKind,
    connectivity: Connectivity,
    grid_size: usize,
    input_channels: usize,
    num_classes: usize,
    vertex_attention: bool,
    feature_attention: bool,
    extra_pools: usize,
) -> Result<ModelConfig> {
    let min_div = 8usize << extra_pools;
    if grid_size % min_div != 0 {
        return Err(Error::Config(format!(
            "grid size {grid_size} not divisible by {min_div}"
        )));
    }
    let gnn = |c_in: usize, c_out: usize| LayerSpec::Gnn { kind, c_in, c_out };
    let att = |width: usize| LayerSpec::Attention {
        width,
        vertex: vertex_attention,
        feature: feature_attention,
    };
    let mut stack = vec![
        gnn(input_channels, 32),
        gnn(32, 32),
        att(32),
        LayerSpec::Pool { width: 32 },
        gnn(32, 64),
        gnn(64, 64),
        att(64),
        LayerSpec::Pool { width: 64 },
        gnn(64, 128),
        att(128),
        LayerSpec::Pool { width: 128 },
    ];
    for _ in 0..extra_pools {
        stack.push(LayerSpec::Pool { width: 128 });
    }
    let side = grid_size >> (3 + extra_pools);
    let len = side * side * 128;
    stack.push(LayerSpec::Flatten { len });
    stack.push(LayerSpec::FullyConnected {
        c_in: len,
        c_out: num_classes,
        last: true,
    });
    let config = ModelConfig {
        connectivity,
        input_channels,
        grid_size,
        stack,
        num_classes,
    };
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Gnn {
        w: Matrix,
        /// GAT attention vector, stored (2 c_out) x 1; None otherwise.
        a: Option<Matrix>,
    },
    Attention {
        w_mean: Option<Matrix>,
        w_sum: Option<Matrix>,
        w_vertex: Option<Matrix>,
    },
    None,
    FullyConnected {
        w: Matrix,
        /// Bias stored 1 x c_out.
        b: Matrix,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<LayerParams>,
}

/// One named tensor inside a parameter set. Biases are exempt from L1/L2
/// penalties and from weight pruning.
pub struct TensorInfo {
    pub name: String,
    pub is_bias: bool,
}

impl ParameterSet {
    /// Fresh Glorot-uniform parameters from a seeded generator; biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .stack
            .iter()
            .map(|spec| match spec {
                LayerSpec::Gnn { kind, c_in, c_out } => {
                    let rows = match kind {
                        GnnKind::Sage => 2 * c_in,
                        GnnKind::Gcn | GnnKind::Gat => *c_in,
                    };
                    let w = Matrix::glorot(rows, *c_out, &mut rng);
                    let a = match kind {
                        GnnKind::Gat => Some(Matrix::glorot(2 * c_out, 1, &mut rng)),
                        _ => None,
                    };
                    LayerParams::Gnn { w, a }
                }
                LayerSpec::Attention { width, vertex, feature } => LayerParams::Attention {
                    w_mean: feature.then(|| Matrix::glorot(*width, *width, &mut rng)),
                    w_sum: feature.then(|| Matrix::glorot(*width, *width, &mut rng)),
                    w_vertex: vertex.then(|| Matrix::glorot(2 * width, 1, &mut rng)),
                },
                LayerSpec::Pool { .. } | LayerSpec::Flatten { .. } => LayerParams::None,
                LayerSpec::FullyConnected { c_in, c_out, .. } => LayerParams::FullyConnected {
                    w: Matrix::glorot(*c_in, *c_out, &mut rng),
                    b: Matrix::zeros(1, *c_out),
                },
            })
            .collect();
        ParameterSet { layers }
    }

    /// Same structure with every value (and no mask) zeroed; used for
    /// gradient accumulation and optimizer moments.
    pub fn zeros_like(&self) -> ParameterSet {
        let zero = |m: &Matrix| Matrix::zeros(m.rows, m.cols);
        let layers = self
            .layers
            .iter()
            .map(|lp| match lp {
                LayerParams::Gnn { w, a } => LayerParams::Gnn {
                    w: zero(w),
                    a: a.as_ref().map(zero),
                },
                LayerParams::Attention { w_mean, w_sum, w_vertex } => LayerParams::Attention {
                    w_mean: w_mean.as_ref().map(zero),
                    w_sum: w_sum.as_ref().map(zero),
                    w_vertex: w_vertex.as_ref().map(zero),
                },
                LayerParams::None => LayerParams::None,
                LayerParams::FullyConnected { w, b } => LayerParams::FullyConnected {
                    w: zero(w),
                    b: zero(b),
                },
            })
            .collect();
        ParameterSet { layers }
    }

    /// Visit every tensor in a fixed order with its name and bias flag.
    pub fn visit(&self, mut f: impl FnMut(&TensorInfo, &Matrix)) {
        for (i, lp) in self.layers.iter().enumerate() {
            let each = |f: &mut dyn FnMut(&TensorInfo, &Matrix), tag: &str, m: &Matrix, bias: bool| {
                f(
                    &TensorInfo {
                        name: format!("layer{i}.{tag}"),
                        is_bias: bias,
                    },
                    m,
                );
            };
            match lp {
                LayerParams::Gnn { w, a } => {
                    each(&mut f, "w", w, false);
                    if let Some(a) = a {
                        each(&mut f, "a", a, false);
                    }
                }
                LayerParams::Attention { w_mean, w_sum, w_vertex } => {
                    if let Some(m) = w_mean {
                        each(&mut f, "w_mean", m, false);
                    }
                    if let Some(m) = w_sum {
                        each(&mut f, "w_sum", m, false);
                    }
                    if let Some(m) = w_vertex {
                        each(&mut f, "w_vertex", m, false);
                    }
                }
                LayerParams::None => {}
                LayerParams::FullyConnected { w, b } => {
                    each(&mut f, "w", w, false);
                    each(&mut f, "b", b, true);
                }
            }
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&TensorInfo, &mut Matrix)) {
        for (i, lp) in self.layers.iter_mut().enumerate() {
            let each = |tag: &str, m: &mut Matrix, bias: bool, f: &mut dyn FnMut(&TensorInfo, &mut Matrix)| {
                f(
                    &TensorInfo {
                        name: format!("layer{i}.{tag}"),
                        is_bias: bias,
                    },
                    m,
                );
            };
            match lp {
                LayerParams::Gnn { w, a } => {
                    each("w", w, false, &mut f);
                    if let Some(a) = a {
                        each("a", a, false, &mut f);
                    }
                }
                LayerParams::Attention { w_mean, w_sum, w_vertex } => {
                    if let Some(m) = w_mean {
                        each("w_mean", m, false, &mut f);
                    }
                    if let Some(m) = w_sum {
                        each("w_sum", m, false, &mut f);
                    }
                    if let Some(m) = w_vertex {
                        each("w_vertex", m, false, &mut f);
                    }
                }
                LayerParams::None => {}
                LayerParams::FullyConnected { w, b } => {
                    each("w", w, false, &mut f);
                    each("b", b, true, &mut f);
                }
            }
        }
    }

    /// Borrow every tensor in visit order as (is_bias, matrix).
    pub fn tensors(&self) -> Vec<(bool, &Matrix)> {
        let mut out = Vec::new();
        for lp in &self.layers {
            match lp {
                LayerParams::Gnn { w, a } => {
                    out.push((false, w));
                    if let Some(a) = a {
                        out.push((false, a));
                    }
                }
                LayerParams::Attention { w_mean, w_sum, w_vertex } => {
                    out.extend(w_mean.iter().map(|m| (false, m)));
                    out.extend(w_sum.iter().map(|m| (false, m)));
                    out.extend(w_vertex.iter().map(|m| (false, m)));
                }
                LayerParams::None => {}
                LayerParams::FullyConnected { w, b } => {
                    out.push((false, w));
                    out.push((true, b));
                }
            }
        }
        out
    }

    /// Mutable variant of `tensors`, same order.
    pub fn tensors_mut(&mut self) -> Vec<(bool, &mut Matrix)> {
        let mut out = Vec::new();
        for lp in &mut self.layers {
            match lp {
                LayerParams::Gnn { w, a } => {
                    out.push((false, w));
                    if let Some(a) = a {
                        out.push((false, a));
                    }
                }
                LayerParams::Attention { w_mean, w_sum, w_vertex } => {
                    out.extend(w_mean.iter_mut().map(|m| (false, m)));
                    out.extend(w_sum.iter_mut().map(|m| (false, m)));
                    out.extend(w_vertex.iter_mut().map(|m| (false, m)));
                }
                LayerParams::None => {}
                LayerParams::FullyConnected { w, b } => {
                    out.push((false, w));
                    out.push((true, b));
                }
            }
        }
        out
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _| n += 1);
        n
    }

    /// Total trainable scalar count (dense) and stored count (respecting
    /// masks), biases included in both.
    pub fn param_counts(&self) -> (usize, usize) {
        let (mut dense, mut stored) = (0, 0);
        self.visit(|info, m| {
            dense += m.rows * m.cols;
            stored += if info.is_bias {
                m.rows * m.cols
            } else {
                m.stored_entries()
            };
        });
        (dense, stored)
    }

    pub fn enforce_masks(&mut self) {
        self.visit_mut(|_, m| m.enforce_mask());
    }
}

/// CSR copies of every weight matrix for the pruned inference path.
/// Biases stay dense.
pub struct SparseParameterSet {
    pub layers: Vec<SparseLayerParams>,
}

pub enum SparseLayerParams {
    Gnn {
        w: SparseMatrix,
        a: Option<Matrix>,
    },
    Attention {
        w_mean: Option<SparseMatrix>,
        w_sum: Option<SparseMatrix>,
        w_vertex: Option<SparseMatrix>,
    },
    None,
    FullyConnected {
        w: SparseMatrix,
        b: Matrix,
    },
}

impl SparseParameterSet {
    pub fn from_dense(params: &ParameterSet) -> SparseParameterSet {
        let layers = params
            .layers
            .iter()
            .map(|lp| match lp {
                LayerParams::Gnn { w, a } => SparseLayerParams::Gnn {
                    w: sparsify(w),
                    a: a.clone(),
                },
                LayerParams::Attention { w_mean, w_sum, w_vertex } => SparseLayerParams::Attention {
                    w_mean: w_mean.as_ref().map(sparsify),
                    w_sum: w_sum.as_ref().map(sparsify),
                    w_vertex: w_vertex.as_ref().map(sparsify),
                },
                LayerParams::None => SparseLayerParams::None,
                LayerParams::FullyConnected { w, b } => SparseLayerParams::FullyConnected {
                    w: sparsify(w),
                    b: b.clone(),
                },
            })
            .collect();
        SparseParameterSet { layers }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Cached per-layer inputs; enough to replay an exact backward pass.
pub struct ActivationTape {
    pub entries: Vec<TapeEntry>,
    pub logits: Vec<f64>,
}

pub enum TapeEntry {
    Graph(GridGraph),
    Vector(Vec<f64>),
}

fn gnn_forward_any<W: ApplyT>(
    kind: GnnKind,
    g: &GridGraph,
    w: &W,
    a: Option<&Matrix>,
    c_in: usize,
    c_out: usize,
    layer: usize,
) -> Result<GridGraph> {
    match kind {
        GnnKind::Sage => layers::sage_forward(g, w, c_in, c_out, true, layer),
        GnnKind::Gcn => layers::gcn_forward(g, w, c_in, c_out, layer),
        GnnKind::Gat => {
            let a = a.expect("GAT layer carries an attention vector");
            layers::gat_forward(g, w, &a.data, c_in, c_out, layer)
        }
    }
}

enum StageInput<'a> {
    Graph(&'a GridGraph),
    Vector(&'a [f64]),
}

fn run_stack<FW>(
    config: &ModelConfig,
    graph: GridGraph,
    mut forward_layer: FW,
) -> Result<(Vec<f64>, Vec<TapeEntry>)>
where
    FW: FnMut(usize, &LayerSpec, StageInput<'_>) -> Result<StageOutput>,
{
    let mut entries = Vec::with_capacity(config.stack.len());
    let mut graph = Some(graph);
    let mut vector: Option<Vec<f64>> = None;
    for (i, spec) in config.stack.iter().enumerate() {
        let out = match (&graph, &vector) {
            (Some(g), None) => {
                let out = forward_layer(i, spec, StageInput::Graph(g))?;
                entries.push(TapeEntry::Graph(graph.take().unwrap()));
                out
            }
            (None, Some(v)) => {
                let out = forward_layer(i, spec, StageInput::Vector(v))?;
                entries.push(TapeEntry::Vector(vector.take().unwrap()));
                out
            }
            _ => unreachable!("stack stage holds exactly one of graph/vector"),
        };
        match out {
            StageOutput::Graph(g) => {
                debug_assert!(zero_at_pruned(&g), "layer {i} wrote features at pruned vertices");
                graph = Some(g);
            }
            StageOutput::Vector(v) => vector = Some(v),
        }
    }
    let logits = vector.ok_or_else(|| Error::Config("stack produced no logits".into()))?;
    Ok((logits, entries))
}

enum StageOutput {
    Graph(GridGraph),
    Vector(Vec<f64>),
}

fn zero_at_pruned(g: &GridGraph) -> bool {
    (0..g.height * g.width)
        .all(|pos| g.exists[pos] || g.feature(pos).iter().all(|&v| v == 0.0))
}

fn prepare_input(config: &ModelConfig, sample: &ImageSample, threshold: f64) -> Result<GridGraph> {
    if sample.height != config.grid_size
        || sample.width != config.grid_size
        || sample.channels != config.input_channels
    {
        return Err(Error::InvalidInput(format!(
            "sample {}x{}x{} does not match configured grid {}x{}x{}",
            sample.height,
            sample.width,
            sample.channels,
            config.grid_size,
            config.grid_size,
            config.input_channels
        )));
    }
    let graph = build_graph(sample, config.connectivity);
    let (pruned, _) = prune_input(&graph, threshold);
    Ok(pruned)
}

/// Full inference with dense parameters, recording the activation tape.
pub fn model_forward(
    config: &ModelConfig,
    params: &ParameterSet,
    sample: &ImageSample,
    input_threshold: f64,
) -> Result<(Vec<f64>, ActivationTape)> {
    let graph = prepare_input(config, sample, input_threshold)?;
    forward_from_graph(config, params, graph)
}

/// Forward pass from an already-built (possibly pruned) input graph.
pub fn forward_from_graph(
    config: &ModelConfig,
    params: &ParameterSet,
    graph: GridGraph,
) -> Result<(Vec<f64>, ActivationTape)> {
    if params.layers.len() != config.stack.len() {
        return Err(Error::Config(format!(
            "parameter set has {} layers, stack has {}",
            params.layers.len(),
            config.stack.len()
        )));
    }
    let (logits, entries) = run_stack(config, graph, |i, spec, input| {
        match (spec, &params.layers[i], input) {
            (LayerSpec::Gnn { kind, c_in, c_out }, LayerParams::Gnn { w, a }, StageInput::Graph(g)) => {
                Ok(StageOutput::Graph(gnn_forward_any(
                    *kind,
                    g,
                    w,
                    a.as_ref(),
                    *c_in,
                    *c_out,
                    i,
                )?))
            }
            (LayerSpec::Pool { .. }, LayerParams::None, StageInput::Graph(g)) => {
                Ok(StageOutput::Graph(layers::pool_forward(g, i)?))
            }
            (
                LayerSpec::Attention { width, .. },
                LayerParams::Attention { w_mean, w_sum, w_vertex },
                StageInput::Graph(g),
            ) => {
                let weights = AttentionWeights {
                    w_mean: w_mean.as_ref(),
                    w_sum: w_sum.as_ref(),
                    w_vertex: w_vertex.as_ref(),
                };
                Ok(StageOutput::Graph(layers::attention_forward(g, &weights, *width, i)?))
            }
            (LayerSpec::Flatten { .. }, LayerParams::None, StageInput::Graph(g)) => {
                Ok(StageOutput::Vector(layers::flatten(g)))
            }
            (LayerSpec::FullyConnected { last, .. }, LayerParams::FullyConnected { w, b }, StageInput::Vector(x)) => {
                Ok(StageOutput::Vector(layers::fc_forward(x, w, b.row(0), !*last)))
            }
            _ => Err(Error::Config(format!(
                "layer {i}: spec/params/input mismatch"
            ))),
        }
    })?;
    Ok((
        logits.clone(),
        ActivationTape { entries, logits },
    ))
}

/// Inference over the sparse (pruned-weight) path; no tape.
pub fn model_forward_sparse(
    config: &ModelConfig,
    params: &SparseParameterSet,
    sample: &ImageSample,
    input_threshold: f64,
) -> Result<Vec<f64>> {
    let graph = prepare_input(config, sample, input_threshold)?;
    let (logits, _) = run_stack(config, graph, |i, spec, input| {
        match (spec, &params.layers[i], input) {
            (LayerSpec::Gnn { kind, c_in, c_out }, SparseLayerParams::Gnn { w, a }, StageInput::Graph(g)) => {
                Ok(StageOutput::Graph(gnn_forward_any(
                    *kind,
                    g,
                    w,
                    a.as_ref(),
                    *c_in,
                    *c_out,
                    i,
                )?))
            }
            (LayerSpec::Pool { .. }, SparseLayerParams::None, StageInput::Graph(g)) => {
                Ok(StageOutput::Graph(layers::pool_forward(g, i)?))
            }
            (
                LayerSpec::Attention { width, .. },
                SparseLayerParams::Attention { w_mean, w_sum, w_vertex },
                StageInput::Graph(g),
            ) => {
                let weights = AttentionWeights {
                    w_mean: w_mean.as_ref(),
                    w_sum: w_sum.as_ref(),
                    w_vertex: w_vertex.as_ref(),
                };
                Ok(StageOutput::Graph(layers::attention_forward(g, &weights, *width, i)?))
            }
            (LayerSpec::Flatten { .. }, SparseLayerParams::None, StageInput::Graph(g)) => {
                Ok(StageOutput::Vector(layers::flatten(g)))
            }
            (
                LayerSpec::FullyConnected { last, .. },
                SparseLayerParams::FullyConnected { w, b },
                StageInput::Vector(x),
            ) => Ok(StageOutput::Vector(layers::fc_forward(x, w, b.row(0), !*last))),
            _ => Err(Error::Config(format!("layer {i}: spec/params/input mismatch"))),
        }
    })?;
    Ok(logits)
}

/// Exact reverse-mode gradients for every parameter given the logits
/// gradient. Returns grads shaped like `params`.
pub fn model_backward(
    config: &ModelConfig,
    params: &ParameterSet,
    tape: &ActivationTape,
    logits_grad: &[f64],
) -> Result<ParameterSet> {
    if tape.entries.len() != config.stack.len() {
        return Err(Error::TapeMismatch(format!(
            "tape depth {} != stack depth {}",
            tape.entries.len(),
            config.stack.len()
        )));
    }
    let mut grads = params.zeros_like();
    let mut upstream: Vec<f64> = logits_grad.to_vec();
    for i in (0..config.stack.len()).rev() {
        let spec = &config.stack[i];
        let entry = &tape.entries[i];
        match (spec, &params.layers[i], &mut grads.layers[i], entry) {
            (
                LayerSpec::Gnn { kind, c_in, c_out },
                LayerParams::Gnn { w, a },
                LayerParams::Gnn { w: dw, a: da },
                TapeEntry::Graph(g),
            ) => {
                let mut grad_in = vec![0.0; g.height * g.width * c_in];
                match kind {
                    GnnKind::Sage => layers::sage_backward(
                        g, w, *c_in, *c_out, true, &upstream, dw, &mut grad_in,
                    ),
                    GnnKind::Gcn => {
                        layers::gcn_backward(g, w, *c_in, *c_out, &upstream, dw, &mut grad_in)
                    }
                    GnnKind::Gat => {
                        let a = a.as_ref().expect("GAT attention vector");
                        let da = da.as_mut().expect("GAT attention grad");
                        layers::gat_backward(
                            g, w, &a.data, *c_in, *c_out, &upstream, dw, &mut da.data, &mut grad_in,
                        )
                    }
                }
                upstream = grad_in;
            }
            (LayerSpec::Pool { width }, LayerParams::None, LayerParams::None, TapeEntry::Graph(g)) => {
                let mut grad_in = vec![0.0; g.height * g.width * width];
                layers::pool_backward(g, &upstream, &mut grad_in);
                upstream = grad_in;
            }
            (
                LayerSpec::Attention { width, .. },
                LayerParams::Attention { w_mean, w_sum, w_vertex },
                LayerParams::Attention { w_mean: dm, w_sum: ds, w_vertex: dv },
                TapeEntry::Graph(g),
            ) => {
                let weights = AttentionWeights {
                    w_mean: w_mean.as_ref(),
                    w_sum: w_sum.as_ref(),
                    w_vertex: w_vertex.as_ref(),
                };
                let mut agrads = AttentionGrads {
                    dw_mean: dm.as_mut(),
                    dw_sum: ds.as_mut(),
                    dw_vertex: dv.as_mut(),
                };
                let mut grad_in = vec![0.0; g.height * g.width * width];
                layers::attention_backward(g, &weights, &mut agrads, *width, &upstream, &mut grad_in);
                upstream = grad_in;
            }
            (LayerSpec::Flatten { .. }, LayerParams::None, LayerParams::None, TapeEntry::Graph(g)) => {
                let mut grad_in = vec![0.0; g.height * g.width * g.channels];
                layers::flatten_backward(g, &upstream, &mut grad_in);
                upstream = grad_in;
            }
            (
                LayerSpec::FullyConnected { c_in, last, .. },
                LayerParams::FullyConnected { w, b },
                LayerParams::FullyConnected { w: dw, b: db },
                TapeEntry::Vector(x),
            ) => {
                let mut grad_in = vec![0.0; *c_in];
                let mut db_row = vec![0.0; db.cols];
                layers::fc_backward(x, w, b.row(0), !*last, &upstream, dw, &mut db_row, &mut grad_in);
                for (d, v) in db.data.iter_mut().zip(&db_row) {
                    *d += v;
                }
                upstream = grad_in;
            }
            _ => {
                return Err(Error::TapeMismatch(format!(
                    "layer {i}: tape entry does not match spec"
                )))
            }
        }
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compare analytic gradients against central finite differences on a
/// random projection of the logits. Checks at least `min_coords`
/// parameter coordinates (all of them for small models) and returns the
/// max relative error.
pub fn gradient_check(
    config: &ModelConfig,
    params: &ParameterSet,
    sample: &ImageSample,
    input_threshold: f64,
    epsilon: f64,
    min_coords: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection: Vec<f64> = (0..config.num_classes)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();

    let objective = |p: &ParameterSet| -> Result<f64> {
        let (logits, _) = model_forward(config, p, sample, input_threshold)?;
        Ok(logits.iter().zip(&projection).map(|(&l, &r)| l * r).sum())
    };

    let (_, tape) = model_forward(config, params, sample, input_threshold)?;
    let analytic = model_backward(config, params, &tape, &projection)?;

    // Flatten coordinates as (tensor index, offset).
    let mut coords: Vec<(usize, usize)> = Vec::new();
    let mut t = 0;
    params.visit(|_, m| {
        for off in 0..m.data.len() {
            coords.push((t, off));
        }
        t += 1;
    });
    if coords.len() > min_coords {
        // Seeded subsample without replacement.
        for i in 0..min_coords {
            let j = rng.gen_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(min_coords);
    }

    let mut max_rel: f64 = 0.0;
    for &(ti, off) in &coords {
        let mut plus = params.clone();
        let mut minus = params.clone();
        let mut idx = 0;
        plus.visit_mut(|_, m| {
            if idx == ti {
                m.data[off] += epsilon;
            }
            idx += 1;
        });
        idx = 0;
        minus.visit_mut(|_, m| {
            if idx == ti {
                m.data[off] -= epsilon;
            }
            idx += 1;
        });
        let numeric = (objective(&plus)? - objective(&minus)?) / (2.0 * epsilon);
        let mut a = f64::NAN;
        idx = 0;
        analytic.visit(|_, m| {
            if idx == ti {
                a = m.data[off];
            }
            idx += 1;
        });
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Connectivity;
    use rand::Rng;

    fn random_sample(side: usize, channels: usize, seed: u64) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..side * side * channels)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        ImageSample::new(side, side, channels, data, 0).unwrap()
    }

    #[test]
    fn default_config_validates_and_has_12_layers() {
        let c = default_config(
            GnnKind::Sage,
            Connectivity::Eight,
            32,
            1,
            10,
            true,
            true,
            0,
        )
        .unwrap();
        // Flatten + final FC count as a single layer in the depth
        // convention, so 13 specs = 12 layers.
        assert_eq!(c.stack.len(), 13);
        assert_eq!(c.gnn_layer_count(), 5);
    }

    #[test]
    fn chip_128_scale_param_count_band() {
        let c = default_config(
            GnnKind::Sage,
            Connectivity::Eight,
            128,
            1,
            10,
            true,
            true,
            2,
        )
        .unwrap();
        let p = ParameterSet::init(&c, 0);
        let (dense, _) = p.param_counts();
        assert!((30_000..=100_000).contains(&dense), "param count {dense}");
    }

    #[test]
    fn fc_only_model_is_affine() {
        let config = ModelConfig {
            connectivity: Connectivity::Four,
            input_channels: 1,
            grid_size: 2,
            stack: vec![
                LayerSpec::Flatten { len: 4 },
                LayerSpec::FullyConnected { c_in: 4, c_out: 3, last: true },
            ],
            num_classes: 3,
        };
        config.validate().unwrap();
        let params = ParameterSet::init(&config, 7);
        let sample = random_sample(2, 1, 3);
        let (logits, _) = model_forward(&config, &params, &sample, 0.0).unwrap();
        // Oracle: W^T x + b by hand.
        let (w, b) = match &params.layers[1] {
            LayerParams::FullyConnected { w, b } => (w, b),
            _ => unreachable!(),
        };
        for j in 0..3 {
            let mut expect = b.at(0, j);
            for i in 0..4 {
                expect += w.at(i, j) * sample.data[i];
            }
            assert!((logits[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn all_pruned_input_yields_bias_path() {
        let config = ModelConfig {
            connectivity: Connectivity::Four,
            input_channels: 1,
            grid_size: 4,
            stack: vec![
                LayerSpec::Gnn { kind: GnnKind::Sage, c_in: 1, c_out: 4 },
                LayerSpec::Flatten { len: 64 },
                LayerSpec::FullyConnected { c_in: 64, c_out: 2, last: true },
            ],
            num_classes: 2,
        };
        let params = ParameterSet::init(&config, 1);
        let sample = ImageSample::new(4, 4, 1, vec![0.0; 16], 0).unwrap();
        let (logits, _) = model_forward(&config, &params, &sample, 0.5).unwrap();
        let b = match &params.layers[2] {
            LayerParams::FullyConnected { b, .. } => b,
            _ => unreachable!(),
        };
        assert_eq!(logits, b.data);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let config = default_config(
            GnnKind::Sage,
            Connectivity::Eight,
            8,
            1,
            3,
            true,
            true,
            0,
        )
        .unwrap();
        let params = ParameterSet::init(&config, 5);
        let sample = random_sample(8, 1, 9);
        let (_, tape) = model_forward(&config, &params, &sample, 0.0).unwrap();
        let grads = model_backward(&config, &params, &tape, &[0.0, 0.0, 0.0]).unwrap();
        grads.visit(|_, m| assert!(m.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gradcheck_linear_model_is_machine_precision() {
        let config = ModelConfig {
            connectivity: Connectivity::Four,
            input_channels: 1,
            grid_size: 2,
            stack: vec![
                LayerSpec::Flatten { len: 4 },
                LayerSpec::FullyConnected { c_in: 4, c_out: 2, last: true },
            ],
            num_classes: 2,
        };
        let params = ParameterSet::init(&config, 2);
        let sample = random_sample(2, 1, 4);
        let err = gradient_check(&config, &params, &sample, 0.0, 1e-5, 500, 10).unwrap();
        assert!(err <= 1e-8, "relative error {err}");
    }
}
