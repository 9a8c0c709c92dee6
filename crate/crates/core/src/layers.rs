//! Per-layer forward and backward computation.
//!
//! Forward passes are generic over the weight representation so the same
//! code drives dense training and sparse (pruned) inference. Backward
//! passes are dense only and recompute layer intermediates from the cached
//! input graph.
//!
//! Conventions shared by every layer:
//! - non-existing vertices carry all-zero features on input and output;
//! - aggregation runs over existing neighbors only, a vertex with no
//!   existing neighbor aggregates the zero vector;
//! - ReLU subgradient is 0 at 0; LeakyReLU slope is 0.2.

use crate::error::{Error, Result};
use crate::graph::GridGraph;
use crate::matrix::Matrix;
use crate::sparse::SparseMatrix;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Weight application `y += W^T x`, implemented by both dense and CSR
/// matrices.
pub trait ApplyT {
    fn apply_t(&self, x: &[f64], y: &mut [f64]);
}

impl ApplyT for Matrix {
    fn apply_t(&self, x: &[f64], y: &mut [f64]) {
        Matrix::apply_t(self, x, y)
    }
}

impl ApplyT for SparseMatrix {
    fn apply_t(&self, x: &[f64], y: &mut [f64]) {
        SparseMatrix::apply_t(self, x, y)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Flat positions of existing vertices, plus per-position neighbor lists
/// (empty at non-existing positions).
fn adjacency(g: &GridGraph) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut live = Vec::new();
    let mut nbrs = vec![Vec::new(); g.height * g.width];
    for row in 0..g.height {
        for col in 0..g.width {
            let pos = g.idx(row, col);
            if g.exists[pos] {
                live.push(pos);
                nbrs[pos] = g.neighbors(row, col);
            }
        }
    }
    (live, nbrs)
}

fn check_width(g: &GridGraph, c_in: usize, layer: usize) -> Result<()> {
    if g.channels != c_in {
        return Err(Error::Shape {
            layer,
            msg: format!("graph feature width {} but layer expects {}", g.channels, c_in),
        });
    }
    Ok(())
}

fn output_like(g: &GridGraph, c_out: usize) -> GridGraph {
    GridGraph {
        height: g.height,
        width: g.width,
        channels: c_out,
        exists: g.exists.clone(),
        features: vec![0.0; g.height * g.width * c_out],
        connectivity: g.connectivity,
        level: g.level,
    }
}

/// Mean of existing-neighbor features into `buf` (zero if no neighbor).
fn neighbor_mean(g: &GridGraph, nbrs: &[usize], buf: &mut [f64]) {
    buf.fill(0.0);
    if nbrs.is_empty() {
        return;
    }
    for &u in nbrs {
        for (b, &f) in buf.iter_mut().zip(g.feature(u)) {
            *b += f;
        }
    }
    let inv = 1.0 / nbrs.len() as f64;
    for b in buf.iter_mut() {
        *b *= inv;
    }
}

// ---------------------------------------------------------------------------
// GraphSAGE (mean aggregator, self/neighbor concatenation)
// ---------------------------------------------------------------------------

/// h'_v = act(W^T [h_v ; mean_{u in N(v)} h_u]); W is (2 c_in) x c_out.
pub fn sage_forward<W: ApplyT>(
    g: &GridGraph,
    w: &W,
    c_in: usize,
    c_out: usize,
    relu: bool,
    layer: usize,
) -> Result<GridGraph> {
    check_width(g, c_in, layer)?;
    let (live, nbrs) = adjacency(g);
    let mut out = output_like(g, c_out);
    let mut cat = vec![0.0; 2 * c_in];
    for &pos in &live {
        cat[..c_in].copy_from_slice(g.feature(pos));
        neighbor_mean(g, &nbrs[pos], &mut cat[c_in..]);
        let z = out.feature_mut(pos);
        w.apply_t(&cat, z);
        if relu {
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Backward of `sage_forward`; accumulates into `dw` and `grad_in`.
pub fn sage_backward(
    g: &GridGraph,
    w: &Matrix,
    c_in: usize,
    c_out: usize,
    relu: bool,
    grad_out: &[f64],
    dw: &mut Matrix,
    grad_in: &mut [f64],
) {
    let (live, nbrs) = adjacency(g);
    let mut cat = vec![0.0; 2 * c_in];
    let mut z = vec![0.0; c_out];
    let mut dz = vec![0.0; c_out];
    let mut dcat = vec![0.0; 2 * c_in];
    for &pos in &live {
        cat[..c_in].copy_from_slice(g.feature(pos));
        neighbor_mean(g, &nbrs[pos], &mut cat[c_in..]);
        z.fill(0.0);
        w.apply_t(&cat, &mut z);
        for j in 0..c_out {
            let g_out = grad_out[pos * c_out + j];
            dz[j] = if relu && z[j] <= 0.0 { 0.0 } else { g_out };
        }
        dw.add_outer(&cat, &dz);
        dcat.fill(0.0);
        w.apply(&dz, &mut dcat);
        for k in 0..c_in {
            grad_in[pos * c_in + k] += dcat[k];
        }
        if !nbrs[pos].is_empty() {
            let inv = 1.0 / nbrs[pos].len() as f64;
            for &u in &nbrs[pos] {
                for k in 0..c_in {
                    grad_in[u * c_in + k] += dcat[c_in + k] * inv;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// GCN (symmetric-normalized aggregation with self-loops)
// ---------------------------------------------------------------------------

fn gcn_aggregate(g: &GridGraph, nbrs: &[Vec<usize>], pos: usize, c_in: usize, agg: &mut [f64]) {
    let d_v = nbrs[pos].len() as f64;
    agg.fill(0.0);
    let self_coef = 1.0 / (d_v + 1.0);
    for (a, &f) in agg.iter_mut().zip(g.feature(pos)) {
        *a += self_coef * f;
    }
    for &u in &nbrs[pos] {
        let coef = 1.0 / ((d_v + 1.0) * (nbrs[u].len() as f64 + 1.0)).sqrt();
        for k in 0..c_in {
            agg[k] += coef * g.features[u * c_in + k];
        }
    }
}

/// h'_v = act(W^T sum_{u in N(v) U {v}} h_u / sqrt((d_v+1)(d_u+1))).
pub fn gcn_forward<W: ApplyT>(
    g: &GridGraph,
    w: &W,
    c_in: usize,
    c_out: usize,
    layer: usize,
) -> Result<GridGraph> {
    check_width(g, c_in, layer)?;
    let (live, nbrs) = adjacency(g);
    let mut out = output_like(g, c_out);
    let mut agg = vec![0.0; c_in];
    for &pos in &live {
        gcn_aggregate(g, &nbrs, pos, c_in, &mut agg);
        let z = out.feature_mut(pos);
        w.apply_t(&agg, z);
        for v in z.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

pub fn gcn_backward(
    g: &GridGraph,
    w: &Matrix,
    c_in: usize,
    c_out: usize,
    grad_out: &[f64],
    dw: &mut Matrix,
    grad_in: &mut [f64],
) {
    let (live, nbrs) = adjacency(g);
    let mut agg = vec![0.0; c_in];
    let mut z = vec![0.0; c_out];
    let mut dz = vec![0.0; c_out];
    let mut dagg = vec![0.0; c_in];
    for &pos in &live {
        gcn_aggregate(g, &nbrs, pos, c_in, &mut agg);
        z.fill(0.0);
        w.apply_t(&agg, &mut z);
        for j in 0..c_out {
            dz[j] = if z[j] <= 0.0 { 0.0 } else { grad_out[pos * c_out + j] };
        }
        dw.add_outer(&agg, &dz);
        dagg.fill(0.0);
        w.apply(&dz, &mut dagg);
        let d_v = nbrs[pos].len() as f64;
        let self_coef = 1.0 / (d_v + 1.0);
        for k in 0..c_in {
            grad_in[pos * c_in + k] += self_coef * dagg[k];
        }
        for &u in &nbrs[pos] {
            let coef = 1.0 / ((d_v + 1.0) * (nbrs[u].len() as f64 + 1.0)).sqrt();
            for k in 0..c_in {
                grad_in[u * c_in + k] += coef * dagg[k];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// GAT (single head, LeakyReLU-scored softmax over N(v) U {v})
// ---------------------------------------------------------------------------

struct GatIntermediates {
    live: Vec<usize>,
    nbrs: Vec<Vec<usize>>,
    /// W^T h_u per position (zero at non-existing positions).
    proj: Vec<f64>,
}

fn gat_project<W: ApplyT>(g: &GridGraph, w: &W, c_in: usize, c_out: usize) -> GatIntermediates {
    let (live, nbrs) = adjacency(g);
    let mut proj = vec![0.0; g.height * g.width * c_out];
    for &pos in &live {
        w.apply_t(&g.features[pos * c_in..(pos + 1) * c_in], &mut proj[pos * c_out..(pos + 1) * c_out]);
    }
    GatIntermediates { live, nbrs, proj }
}

/// Unnormalized score s = a . [p_v ; p_u] and its softmax over the
/// neighborhood of v (self included).
fn gat_attention(
    inter: &GatIntermediates,
    a: &[f64],
    pos: usize,
    c_out: usize,
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut members = Vec::with_capacity(inter.nbrs[pos].len() + 1);
    members.push(pos);
    members.extend_from_slice(&inter.nbrs[pos]);
    let p_v = &inter.proj[pos * c_out..(pos + 1) * c_out];
    let self_score: f64 = a[..c_out].iter().zip(p_v).map(|(&ak, &pk)| ak * pk).sum();
    let mut raw = Vec::with_capacity(members.len());
    for &u in &members {
        let p_u = &inter.proj[u * c_out..(u + 1) * c_out];
        let s: f64 = self_score
            + a[c_out..2 * c_out]
                .iter()
                .zip(p_u)
                .map(|(&ak, &pk)| ak * pk)
                .sum::<f64>();
        raw.push(s);
    }
    let scores: Vec<f64> = raw
        .iter()
        .map(|&s| if s >= 0.0 { s } else { LEAKY_SLOPE * s })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|&e| e / total).collect();
    (members, raw, alpha)
}

/// Single-head graph attention; `a` has length 2*c_out.
pub fn gat_forward<W: ApplyT>(
    g: &GridGraph,
    w: &W,
    a: &[f64],
    c_in: usize,
    c_out: usize,
    layer: usize,
) -> Result<GridGraph> {
    check_width(g, c_in, layer)?;
    let inter = gat_project(g, w, c_in, c_out);
    let mut out = output_like(g, c_out);
    for &pos in &inter.live {
        let (members, _raw, alpha) = gat_attention(&inter, a, pos, c_out);
        let z = out.feature_mut(pos);
        for (&u, &al) in members.iter().zip(&alpha) {
            for k in 0..c_out {
                z[k] += al * inter.proj[u * c_out + k];
            }
        }
        for v in z.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn gat_backward(
    g: &GridGraph,
    w: &Matrix,
    a: &[f64],
    c_in: usize,
    c_out: usize,
    grad_out: &[f64],
    dw: &mut Matrix,
    da: &mut [f64],
    grad_in: &mut [f64],
) {
    let inter = gat_project(g, w, c_in, c_out);
    // Gradient w.r.t. the projections, accumulated across every
    // neighborhood a vertex participates in.
    let mut dproj = vec![0.0; inter.proj.len()];
    let mut z = vec![0.0; c_out];
    let mut dz = vec![0.0; c_out];
    for &pos in &inter.live {
        let (members, raw, alpha) = gat_attention(&inter, a, pos, c_out);
        z.fill(0.0);
        for (&u, &al) in members.iter().zip(&alpha) {
            for k in 0..c_out {
                z[k] += al * inter.proj[u * c_out + k];
            }
        }
        for k in 0..c_out {
            dz[k] = if z[k] <= 0.0 { 0.0 } else { grad_out[pos * c_out + k] };
        }
        // Through the weighted sum: d_alpha and direct d_proj.
        let mut dalpha = Vec::with_capacity(members.len());
        for (&u, &al) in members.iter().zip(&alpha) {
            let p_u = &inter.proj[u * c_out..(u + 1) * c_out];
            dalpha.push(p_u.iter().zip(&dz).map(|(&p, &d)| p * d).sum::<f64>());
            for k in 0..c_out {
                dproj[u * c_out + k] += al * dz[k];
            }
        }
        // Softmax backward.
        let dot: f64 = alpha.iter().zip(&dalpha).map(|(&al, &d)| al * d).sum();
        for (idx, &u) in members.iter().enumerate() {
            let de = alpha[idx] * (dalpha[idx] - dot);
            let ds = if raw[idx] >= 0.0 { de } else { LEAKY_SLOPE * de };
            if ds == 0.0 {
                continue;
            }
            let p_v = &inter.proj[pos * c_out..(pos + 1) * c_out];
            let p_u = &inter.proj[u * c_out..(u + 1) * c_out];
            for k in 0..c_out {
                da[k] += ds * p_v[k];
                da[c_out + k] += ds * p_u[k];
                dproj[pos * c_out + k] += ds * a[k];
                dproj[u * c_out + k] += ds * a[c_out + k];
            }
        }
    }
    // Through the shared projection p_u = W^T h_u.
    for &u in &inter.live {
        let h_u = &g.features[u * c_in..(u + 1) * c_in];
        let dp = &dproj[u * c_out..(u + 1) * c_out];
        dw.add_outer(h_u, dp);
        w.apply(dp, &mut grad_in[u * c_in..(u + 1) * c_in]);
    }
}

// ---------------------------------------------------------------------------
// Graph pooling (2x2 max with existence indicators)
// ---------------------------------------------------------------------------

#[inline]
fn pool_children(g: &GridGraph, oi: usize, oj: usize) -> [usize; 4] {
    // Row-major order of the 2x2 block; ties in the max go to the first.
    [
        g.idx(2 * oi, 2 * oj),
        g.idx(2 * oi, 2 * oj + 1),
        g.idx(2 * oi + 1, 2 * oj),
        g.idx(2 * oi + 1, 2 * oj + 1),
    ]
}

/// Halve the grid; per-channel max over the existing children of each 2x2
/// block. The output vertex exists iff at least one child exists.
pub fn pool_forward(g: &GridGraph, layer: usize) -> Result<GridGraph> {
    if g.height % 2 != 0 || g.width % 2 != 0 {
        return Err(Error::Config(format!(
            "pool layer {layer} requires even grid dims, got {}x{}",
            g.height, g.width
        )));
    }
    let c = g.channels;
    let mut out = GridGraph::empty(g.height / 2, g.width / 2, c, g.connectivity, g.level + 1);
    for oi in 0..out.height {
        for oj in 0..out.width {
            let opos = oi * out.width + oj;
            let mut any = false;
            let mut acc = vec![f64::NEG_INFINITY; c];
            for child in pool_children(g, oi, oj) {
                if g.exists[child] {
                    for (a, &f) in acc.iter_mut().zip(g.feature(child)) {
                        if f > *a {
                            *a = f;
                        }
                    }
                    any = true;
                }
            }
            if any {
                out.exists[opos] = true;
                out.feature_mut(opos).copy_from_slice(&acc);
            }
        }
    }
    Ok(out)
}

/// Route each output channel's gradient to the argmax child (first in
/// row-major order on ties).
pub fn pool_backward(g: &GridGraph, grad_out: &[f64], grad_in: &mut [f64]) {
    let c = g.channels;
    let (oh, ow) = (g.height / 2, g.width / 2);
    for oi in 0..oh {
        for oj in 0..ow {
            let opos = oi * ow + oj;
            let children = pool_children(g, oi, oj);
            for k in 0..c {
                let mut best: Option<(usize, f64)> = None;
                for &child in &children {
                    if g.exists[child] {
                        let f = g.features[child * c + k];
                        if best.map_or(true, |(_, bf)| f > bf) {
                            best = Some((child, f));
                        }
                    }
                }
                if let Some((child, _)) = best {
                    grad_in[child * c + k] += grad_out[opos * c + k];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Vertex/feature attention layer
// ---------------------------------------------------------------------------

/// h_out = (1 + alpha_v) h_v + h_v (x) F, with alpha the sigmoid of a
/// width-1 aggregation layer and F a sigmoid gate over channels. Disabled
/// gates contribute zero, so with both off the layer is the identity.
pub struct AttentionWeights<'a, W: ApplyT> {
    pub w_mean: Option<&'a W>,
    pub w_sum: Option<&'a W>,
    pub w_vertex: Option<&'a W>,
}

fn feature_gate<W: ApplyT>(
    g: &GridGraph,
    live: &[usize],
    w_mean: &W,
    w_sum: &W,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = g.channels;
    let mut sum = vec![0.0; c];
    for &pos in live {
        for (s, &f) in sum.iter_mut().zip(g.feature(pos)) {
            *s += f;
        }
    }
    let inv = if live.is_empty() { 0.0 } else { 1.0 / live.len() as f64 };
    let mean: Vec<f64> = sum.iter().map(|&s| s * inv).collect();
    let mut pre = vec![0.0; c];
    w_mean.apply_t(&mean, &mut pre);
    w_sum.apply_t(&sum, &mut pre);
    let gate = pre.iter().map(|&p| sigmoid(p)).collect();
    (sum, mean, gate)
}

fn vertex_gate_pre<W: ApplyT>(g: &GridGraph, nbrs: &[usize], pos: usize, w_vertex: &W) -> f64 {
    let c = g.channels;
    let mut cat = vec![0.0; 2 * c];
    cat[..c].copy_from_slice(g.feature(pos));
    neighbor_mean(g, nbrs, &mut cat[c..]);
    let mut pre = [0.0];
    w_vertex.apply_t(&cat, &mut pre);
    pre[0]
}

pub fn attention_forward<W: ApplyT>(
    g: &GridGraph,
    weights: &AttentionWeights<'_, W>,
    c: usize,
    layer: usize,
) -> Result<GridGraph> {
    check_width(g, c, layer)?;
    let (live, nbrs) = adjacency(g);
    let gate = match (weights.w_mean, weights.w_sum) {
        (Some(wm), Some(ws)) => Some(feature_gate(g, &live, wm, ws).2),
        _ => None,
    };
    let mut out = output_like(g, c);
    for &pos in &live {
        let alpha = weights
            .w_vertex
            .map(|wv| sigmoid(vertex_gate_pre(g, &nbrs[pos], pos, wv)))
            .unwrap_or(0.0);
        let h = g.feature(pos);
        let o = out.feature_mut(pos);
        for k in 0..c {
            let mut v = (1.0 + alpha) * h[k];
            if let Some(f) = &gate {
                v += h[k] * f[k];
            }
            o[k] = v;
        }
    }
    Ok(out)
}

pub struct AttentionGrads<'a> {
    pub dw_mean: Option<&'a mut Matrix>,
    pub dw_sum: Option<&'a mut Matrix>,
    pub dw_vertex: Option<&'a mut Matrix>,
}

pub fn attention_backward(
    g: &GridGraph,
    weights: &AttentionWeights<'_, Matrix>,
    grads: &mut AttentionGrads<'_>,
    c: usize,
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    let (live, nbrs) = adjacency(g);
    let feature = match (weights.w_mean, weights.w_sum) {
        (Some(wm), Some(ws)) => Some((wm, ws, feature_gate(g, &live, wm, ws))),
        _ => None,
    };
    let mut dgate = vec![0.0; c];
    for &pos in &live {
        let h = g.feature(pos);
        let g_out = &grad_out[pos * c..(pos + 1) * c];
        let alpha = weights
            .w_vertex
            .map(|wv| (wv, sigmoid(vertex_gate_pre(g, &nbrs[pos], pos, wv))));
        let a = alpha.map(|(_, a)| a).unwrap_or(0.0);
        // Direct path: d h_v from (1+alpha) h + h (x) F.
        for k in 0..c {
            let mut coef = 1.0 + a;
            if let Some((_, _, (_, _, gate))) = &feature {
                coef += gate[k];
            }
            grad_in[pos * c + k] += coef * g_out[k];
        }
        if let Some(f) = &feature {
            let gate = &f.2 .2;
            for k in 0..c {
                dgate[k] += g_out[k] * h[k] * gate[k] * (1.0 - gate[k]);
            }
        }
        // Vertex gate path.
        if let Some((wv, a)) = alpha {
            let dalpha: f64 = g_out.iter().zip(h).map(|(&go, &hk)| go * hk).sum();
            let dpre = dalpha * a * (1.0 - a);
            if dpre != 0.0 {
                let mut cat = vec![0.0; 2 * c];
                cat[..c].copy_from_slice(h);
                neighbor_mean(g, &nbrs[pos], &mut cat[c..]);
                if let Some(dwv) = grads.dw_vertex.as_deref_mut() {
                    dwv.add_outer(&cat, &[dpre]);
                }
                let mut dcat = vec![0.0; 2 * c];
                wv.apply(&[dpre], &mut dcat);
                for k in 0..c {
                    grad_in[pos * c + k] += dcat[k];
                }
                if !nbrs[pos].is_empty() {
                    let inv = 1.0 / nbrs[pos].len() as f64;
                    for &u in &nbrs[pos] {
                        for k in 0..c {
                            grad_in[u * c + k] += dcat[c + k] * inv;
                        }
                    }
                }
            }
        }
    }
    // Feature gate path: dgate already includes sigmoid'; push through the
    // two matrices and the mean/sum reductions.
    if let Some((wm, ws, (sum, mean, _gate))) = feature {
        if let Some(dwm) = grads.dw_mean.as_deref_mut() {
            dwm.add_outer(&mean, &dgate);
        }
        if let Some(dws) = grads.dw_sum.as_deref_mut() {
            dws.add_outer(&sum, &dgate);
        }
        let mut dmean = vec![0.0; c];
        wm.apply(&dgate, &mut dmean);
        let mut dsum = vec![0.0; c];
        ws.apply(&dgate, &mut dsum);
        let inv = if live.is_empty() { 0.0 } else { 1.0 / live.len() as f64 };
        for &pos in &live {
            for k in 0..c {
                grad_in[pos * c + k] += dmean[k] * inv + dsum[k];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Flatten and fully connected
// ---------------------------------------------------------------------------

/// Row-major (row, column, channel) concatenation; zeros at pruned
/// positions, so the length depends only on the grid, never on pruning.
pub fn flatten(g: &GridGraph) -> Vec<f64> {
    g.features.clone()
}

/// Scatter the flat gradient back onto the grid, dropping entries at
/// non-existing positions.
pub fn flatten_backward(g: &GridGraph, grad_out: &[f64], grad_in: &mut [f64]) {
    let c = g.channels;
    for pos in 0..g.height * g.width {
        if g.exists[pos] {
            for k in 0..c {
                grad_in[pos * c + k] += grad_out[pos * c + k];
            }
        }
    }
}

/// y = act(W^T x + b); hidden layers use ReLU, the last emits raw logits.
pub fn fc_forward<W: ApplyT>(x: &[f64], w: &W, b: &[f64], relu: bool) -> Vec<f64> {
    let mut y = b.to_vec();
    w.apply_t(x, &mut y);
    if relu {
        for v in y.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn fc_backward(
    x: &[f64],
    w: &Matrix,
    b: &[f64],
    relu: bool,
    grad_out: &[f64],
    dw: &mut Matrix,
    db: &mut [f64],
    grad_in: &mut [f64],
) {
    let mut dz = grad_out.to_vec();
    if relu {
        let mut z = b.to_vec();
        w.apply_t(x, &mut z);
        for (d, &zv) in dz.iter_mut().zip(&z) {
            if zv <= 0.0 {
                *d = 0.0;
            }
        }
    }
    for (dbk, &dzk) in db.iter_mut().zip(&dz) {
        *dbk += dzk;
    }
    dw.add_outer(x, &dz);
    w.apply(&dz, grad_in);
}
