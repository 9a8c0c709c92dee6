//! Exact FLOP and parameter accounting.
//!
//! Counting convention (stated once, used everywhere): one multiply = 1,
//! one add = 1 (a multiply-accumulate = 2), one comparison in max-pooling
//! = 1, sigmoid / exp / divide = 1 each. Aggregation work is charged
//! against live directed edges only; update work against live vertices
//! only. Dense updates cost 2 * rows * cols per vertex; the sparse path
//! costs 2 * nnz per application.

use crate::error::{Error, Result};
use crate::graph::{build_graph, prune_input, pool_exists_only, GridGraph, ImageSample};
use crate::model::{GnnKind, LayerParams, LayerSpec, ModelConfig, ParameterSet};

/// Per-layer live-graph statistics, averaged over the samples they were
/// measured on. Vector-stage layers (flatten/FC) carry zeros.
#[derive(Debug, Clone, Default)]
pub struct LayerStats {
    /// Live vertices entering the layer.
    pub v_live: f64,
    /// Live directed edges (ordered pairs) entering the layer.
    pub e_dir: f64,
    /// Pool layers only: total live children across surviving outputs.
    pub pool_child_live: f64,
    /// Pool layers only: surviving output vertices.
    pub pool_v_out: f64,
}

#[derive(Debug, Clone)]
pub struct SurvivalStats {
    pub per_layer: Vec<LayerStats>,
    /// Fraction of level-0 vertices removed by input pruning.
    pub input_pruned_frac: f64,
    /// Live vertices per pooling level (level 0 first).
    pub vertices_per_level: Vec<f64>,
}

fn graph_stats(g: &GridGraph) -> (f64, f64) {
    (g.vertex_count() as f64, g.directed_edge_count() as f64)
}

/// Propagate existence through the stack for one already-pruned input
/// graph.
fn stats_for_graph(config: &ModelConfig, graph: &GridGraph) -> Result<Vec<LayerStats>> {
    let mut out = Vec::with_capacity(config.stack.len());
    let mut g = graph.clone();
    for spec in &config.stack {
        match spec {
            LayerSpec::Gnn { .. } | LayerSpec::Attention { .. } => {
                let (v, e) = graph_stats(&g);
                out.push(LayerStats {
                    v_live: v,
                    e_dir: e,
                    ..Default::default()
                });
            }
            LayerSpec::Pool { .. } => {
                let (v, e) = graph_stats(&g);
                let pooled = pool_exists_only(&g)?;
                let mut child_live = 0usize;
                for oi in 0..pooled.height {
                    for oj in 0..pooled.width {
                        if pooled.exists[oi * pooled.width + oj] {
                            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                if g.exists[(2 * oi + dr) * g.width + (2 * oj + dc)] {
                                    child_live += 1;
                                }
                            }
                        }
                    }
                }
                out.push(LayerStats {
                    v_live: v,
                    e_dir: e,
                    pool_child_live: child_live as f64,
                    pool_v_out: pooled.vertex_count() as f64,
                });
                g = pooled;
            }
            LayerSpec::Flatten { .. } | LayerSpec::FullyConnected { .. } => {
                out.push(LayerStats::default());
            }
        }
    }
    Ok(out)
}

/// Average live-graph statistics over a dataset at a given input-pruning
/// threshold.
pub fn survival_stats(
    config: &ModelConfig,
    dataset: &[ImageSample],
    input_threshold: f64,
) -> Result<SurvivalStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("survival stats need samples".into()));
    }
    let mut acc: Vec<LayerStats> = vec![LayerStats::default(); config.stack.len()];
    let mut pruned_frac = 0.0;
    for sample in dataset {
        let g = build_graph(sample, config.connectivity);
        let (g, frac) = prune_input(&g, input_threshold);
        pruned_frac += frac;
        for (a, s) in acc.iter_mut().zip(stats_for_graph(config, &g)?) {
            a.v_live += s.v_live;
            a.e_dir += s.e_dir;
            a.pool_child_live += s.pool_child_live;
            a.pool_v_out += s.pool_v_out;
        }
    }
    let inv = 1.0 / dataset.len() as f64;
    for a in acc.iter_mut() {
        a.v_live *= inv;
        a.e_dir *= inv;
        a.pool_child_live *= inv;
        a.pool_v_out *= inv;
    }
    let mut vertices_per_level = Vec::new();
    for (spec, s) in config.stack.iter().zip(&acc) {
        match spec {
            LayerSpec::Gnn { .. } if vertices_per_level.is_empty() => {
                vertices_per_level.push(s.v_live)
            }
            LayerSpec::Pool { .. } => vertices_per_level.push(s.pool_v_out),
            _ => {}
        }
    }
    Ok(SurvivalStats {
        per_layer: acc,
        input_pruned_frac: pruned_frac * inv,
        vertices_per_level,
    })
}

/// Statistics for a full (unpruned) grid, for dense baseline counts.
pub fn full_grid_stats(config: &ModelConfig) -> Result<SurvivalStats> {
    let n = config.grid_size * config.grid_size * config.input_channels;
    let sample = ImageSample::new(
        config.grid_size,
        config.grid_size,
        config.input_channels,
        vec![1.0; n],
        0,
    )?;
    survival_stats(config, std::slice::from_ref(&sample), 0.0)
}

#[derive(Debug, Clone)]
pub struct LayerCost {
    pub name: String,
    pub flops: f64,
    pub params_dense: usize,
    pub params_stored: usize,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_flops: f64,
    pub params_dense: usize,
    pub params_stored: usize,
    pub input_pruned_frac: f64,
    pub vertices_per_level: Vec<f64>,
}

impl CostReport {
    pub fn text(&self) -> String {
        let mut out = String::from("layer\tflops\tparams_dense\tparams_stored\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                l.name, l.flops, l.params_dense, l.params_stored
            ));
        }
        out.push_str(&format!(
            "total\t{}\t{}\t{}\n",
            self.total_flops, self.params_dense, self.params_stored
        ));
        out
    }
}

fn layer_param_counts(lp: &LayerParams) -> (usize, usize) {
    let mut dense = 0;
    let mut stored = 0;
    let mut add = |m: &crate::matrix::Matrix, is_bias: bool| {
        dense += m.rows * m.cols;
        stored += if is_bias { m.rows * m.cols } else { m.stored_entries() };
    };
    match lp {
        LayerParams::Gnn { w, a } => {
            add(w, false);
            if let Some(a) = a {
                add(a, false);
            }
        }
        LayerParams::Attention { w_mean, w_sum, w_vertex } => {
            for m in [w_mean, w_sum, w_vertex].into_iter().flatten() {
                add(m, false);
            }
        }
        LayerParams::None => {}
        LayerParams::FullyConnected { w, b } => {
            add(w, false);
            add(b, true);
        }
    }
    (dense, stored)
}

/// Exact per-layer FLOP counts for one sample with the given live-graph
/// statistics. With `sparse` set, weight applications are charged at
/// 2 * nnz instead of the dense 2 * rows * cols.
pub fn count_flops(
    config: &ModelConfig,
    stats: &SurvivalStats,
    params: &ParameterSet,
    sparse: bool,
) -> Result<CostReport> {
    if stats.per_layer.len() != config.stack.len() {
        return Err(Error::Config(
            "survival stats do not match the model stack".into(),
        ));
    }
    let mut layers = Vec::with_capacity(config.stack.len());
    for (i, spec) in config.stack.iter().enumerate() {
        let s = &stats.per_layer[i];
        let lp = &params.layers[i];
        let (p_dense, p_stored) = layer_param_counts(lp);
        let update_cost = |m: &crate::matrix::Matrix| -> f64 {
            if sparse {
                2.0 * m.stored_entries() as f64
            } else {
                2.0 * (m.rows * m.cols) as f64
            }
        };
        let flops = match (spec, lp) {
            (LayerSpec::Gnn { kind, c_in, c_out }, LayerParams::Gnn { w, .. }) => match kind {
                // Aggregation adds over live directed edges, then one
                // weight application per live vertex.
                GnnKind::Sage => s.e_dir * *c_in as f64 + s.v_live * update_cost(w),
                // Each edge term (self-loops included) costs one multiply
                // and one add for the normalization coefficient.
                GnnKind::Gcn => {
                    (s.e_dir + s.v_live) * 2.0 * *c_in as f64 + s.v_live * update_cost(w)
                }
                // Projection per vertex, then per ordered neighbor pair
                // (self included): score 2*(2 c_out)+1 for the LeakyReLU,
                // softmax exp+div+accumulate = 3, weighted combine 2 c_out.
                GnnKind::Gat => {
                    let pairs = s.e_dir + s.v_live;
                    s.v_live * update_cost(w)
                        + pairs * (4.0 * *c_out as f64 + 1.0)
                        + pairs * 3.0
                        + pairs * 2.0 * *c_out as f64
                }
            },
            (LayerSpec::Pool { width }, _) => {
                (s.pool_child_live - s.pool_v_out) * *width as f64
            }
            (
                LayerSpec::Attention { width, vertex, feature },
                LayerParams::Attention { w_mean, w_sum, w_vertex },
            ) => {
                let c = *width as f64;
                let mut f = 0.0;
                if *feature && s.v_live > 0.0 {
                    let wm = w_mean.as_ref().expect("feature gate weights");
                    let ws = w_sum.as_ref().expect("feature gate weights");
                    // sum over live vertices, mean divide, two matvecs,
                    // add, sigmoid.
                    f += s.v_live * c + c + update_cost(wm) + update_cost(ws) + c + c;
                }
                if *vertex {
                    let wv = w_vertex.as_ref().expect("vertex gate weights");
                    // Mean-aggregate like a Sage layer with c_out = 1,
                    // then sigmoid per live vertex.
                    f += s.e_dir * c + s.v_live * update_cost(wv) + s.v_live;
                }
                // Gate combination per live vertex.
                f += match (*vertex, *feature) {
                    (true, true) => s.v_live * (1.0 + 3.0 * c),
                    (true, false) => s.v_live * (1.0 + c),
                    (false, true) => s.v_live * 2.0 * c,
                    (false, false) => 0.0,
                };
                f
            }
            (LayerSpec::Flatten { .. }, _) => 0.0,
            (LayerSpec::FullyConnected { c_out, .. }, LayerParams::FullyConnected { w, .. }) => {
                update_cost(w) + *c_out as f64
            }
            _ => {
                return Err(Error::Config(format!(
                    "layer {i}: spec/params mismatch in cost accounting"
                )))
            }
        };
        layers.push(LayerCost {
            name: spec.name(),
            flops,
            params_dense: p_dense,
            params_stored: p_stored,
        });
    }
    let total_flops = layers.iter().map(|l| l.flops).sum();
    let (params_dense, params_stored) = params.param_counts();
    Ok(CostReport {
        layers,
        total_flops,
        params_dense,
        params_stored,
        input_pruned_frac: stats.input_pruned_frac,
        vertices_per_level: stats.vertices_per_level.clone(),
    })
}
