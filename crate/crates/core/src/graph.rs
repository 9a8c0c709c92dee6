//! Grid-graph construction from multi-channel images and threshold-based
//! input pruning.
//!
//! Every pixel becomes a vertex on the integer lattice; edges are implicit
//! from the connectivity kind and the existence grid, so adjacency is an
//! O(1) query and pruning is O(V).

use crate::error::{Error, Result};

/// A raw H x W x C image with a class label. `data` is row-major in
/// (row, column, channel) order.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub label: usize,
}

impl ImageSample {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        label: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput(format!(
                "zero-sized image: {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        for (idx, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                let row = idx / (width * channels);
                let col = (idx / channels) % width;
                let channel = idx % channels;
                return Err(Error::NonFinite { row, col, channel });
            }
        }
        Ok(ImageSample {
            height,
            width,
            channels,
            data,
            label,
        })
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    /// Neighbor offsets as (delta_row, delta_col).
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, 0),
                (1, 0),
                (0, -1),
                (0, 1),
                (-1, -1),
                (-1, 1),
                (1, -1),
                (1, 1),
            ],
        }
    }
}

/// Euclidean norm of a pixel's channel vector.
pub fn compute_magnitude(pixel: &[f64]) -> f64 {
    pixel.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

/// Vertices on a grid with per-vertex feature vectors and existence
/// indicators. Edges are implicit: (u, v) is an edge iff both exist and
/// their coordinates differ by one connectivity offset.
#[derive(Debug, Clone)]
pub struct GridGraph {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub exists: Vec<bool>,
    /// Row-major (row, column, channel) features; all-zero where
    /// `exists` is false.
    pub features: Vec<f64>,
    pub connectivity: Connectivity,
    /// Pooling depth; 0 for freshly built graphs.
    pub level: usize,
}

impl GridGraph {
    pub fn empty(
        height: usize,
        width: usize,
        channels: usize,
        connectivity: Connectivity,
        level: usize,
    ) -> Self {
        GridGraph {
            height,
            width,
            channels,
            exists: vec![false; height * width],
            features: vec![0.0; height * width * channels],
            connectivity,
            level,
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn feature(&self, pos: usize) -> &[f64] {
        &self.features[pos * self.channels..(pos + 1) * self.channels]
    }

    #[inline]
    pub fn feature_mut(&mut self, pos: usize) -> &mut [f64] {
        &mut self.features[pos * self.channels..(pos + 1) * self.channels]
    }

    /// Existing neighbors of (row, col) as flat positions.
    pub fn neighbors(&self, row: usize, col: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(8);
        for &(dr, dc) in self.connectivity.offsets() {
            let r = row as isize + dr;
            let c = col as isize + dc;
            if r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width {
                let pos = r as usize * self.width + c as usize;
                if self.exists[pos] {
                    out.push(pos);
                }
            }
        }
        out
    }

    pub fn vertex_count(&self) -> usize {
        self.exists.iter().filter(|&&e| e).count()
    }

    /// Number of undirected edges between existing vertices.
    pub fn edge_count(&self) -> usize {
        self.directed_edge_count() / 2
    }

    /// Number of ordered (u, v) pairs with an edge, i.e. sum of degrees.
    pub fn directed_edge_count(&self) -> usize {
        let mut count = 0;
        for row in 0..self.height {
            for col in 0..self.width {
                if self.exists[self.idx(row, col)] {
                    count += self.neighbors(row, col).len();
                }
            }
        }
        count
    }
}

/// Turn an image into a level-0 grid graph with every vertex present.
pub fn build_graph(image: &ImageSample, connectivity: Connectivity) -> GridGraph {
    GridGraph {
        height: image.height,
        width: image.width,
        channels: image.channels,
        exists: vec![true; image.height * image.width],
        features: image.data.clone(),
        connectivity,
        level: 0,
    }
}

/// Remove vertices whose signal magnitude is strictly smaller than the
/// threshold. Returns the pruned graph and the pruned fraction.
pub fn prune_input(graph: &GridGraph, threshold: f64) -> (GridGraph, f64) {
    let mut out = graph.clone();
    let total = graph.height * graph.width;
    let mut pruned = 0usize;
    for pos in 0..total {
        let keep = graph.exists[pos] && compute_magnitude(graph.feature(pos)) >= threshold;
        out.exists[pos] = keep;
        if !keep {
            out.feature_mut(pos).fill(0.0);
            pruned += 1;
        }
    }
    (out, pruned as f64 / total as f64)
}

/// Existence-only 2x2 pooling: halved grid where an output vertex exists
/// iff at least one child exists. Features are left zero.
pub fn pool_exists_only(g: &GridGraph) -> Result<GridGraph> {
    if g.height % 2 != 0 || g.width % 2 != 0 {
        return Err(Error::Config(format!(
            "existence pooling requires even dims, got {}x{}",
            g.height, g.width
        )));
    }
    let mut out = GridGraph::empty(g.height / 2, g.width / 2, g.channels, g.connectivity, g.level + 1);
    for oi in 0..out.height {
        for oj in 0..out.width {
            let any = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .any(|&(dr, dc)| g.exists[(2 * oi + dr) * g.width + (2 * oj + dc)]);
            out.exists[oi * out.width + oj] = any;
        }
    }
    Ok(out)
}

/// Equal-width histogram over [lo, hi) with explicit under/overflow bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

/// Histogram of pixel magnitudes across a dataset. Bins are half-open
/// [lo, hi); values at or above `hi` land in the overflow counter.
pub fn magnitude_histogram(
    dataset: &[ImageSample],
    bins: usize,
    lo: f64,
    hi: f64,
) -> Result<Histogram> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(
            "cannot build a magnitude histogram from zero samples".into(),
        ));
    }
    if bins == 0 || !(lo < hi) {
        return Err(Error::InvalidInput(format!(
            "bad histogram parameters: bins={bins} range=[{lo}, {hi})"
        )));
    }
    let mut hist = Histogram {
        lo,
        hi,
        counts: vec![0; bins],
        underflow: 0,
        overflow: 0,
    };
    let bin_width = (hi - lo) / bins as f64;
    for sample in dataset {
        for row in 0..sample.height {
            for col in 0..sample.width {
                let m = compute_magnitude(sample.pixel(row, col));
                if m < lo {
                    hist.underflow += 1;
                } else if m >= hi {
                    hist.overflow += 1;
                } else {
                    let bin = (((m - lo) / bin_width) as usize).min(bins - 1);
                    hist.counts[bin] += 1;
                }
            }
        }
    }
    Ok(hist)
}
