//! Dense row-major matrix with an optional sparsity mask.
//!
//! Weight matrices follow the shape conventions of the model: a layer that
//! maps `c_in` features to `c_out` stores its weight as `c_in x c_out`
//! (or `2*c_in x c_out` where self and neighbor features are concatenated)
//! and is applied as `y = W^T x`.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values, length `rows * cols`.
    pub data: Vec<f64>,
    /// Sparsity mask; entries with `false` are pinned to zero.
    pub mask: Option<Vec<bool>>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            mask: None,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
            mask: None,
        }
    }

    /// Glorot-uniform initialization in +-sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Matrix {
            rows,
            cols,
            data,
            mask: None,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `y += W^T x`, i.e. `y[j] += sum_i W[i][j] * x[i]`.
    pub fn apply_t(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = self.row(i);
            for (yj, &wij) in y.iter_mut().zip(row) {
                *yj += wij * xi;
            }
        }
    }

    /// `x += W g`, i.e. `x[i] += sum_j W[i][j] * g[j]` (backward of `apply_t`).
    pub fn apply(&self, g: &[f64], x: &mut [f64]) {
        debug_assert_eq!(g.len(), self.cols);
        debug_assert_eq!(x.len(), self.rows);
        for (xi, row) in x.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            let mut acc = 0.0;
            for (&wij, &gj) in row.iter().zip(g) {
                acc += wij * gj;
            }
            *xi += acc;
        }
    }

    /// `W += x g^T` (gradient accumulation for `y = W^T x`).
    pub fn add_outer(&mut self, x: &[f64], g: &[f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(g.len(), self.cols);
        for (row, &xi) in self.data.chunks_exact_mut(self.cols).zip(x) {
            if xi == 0.0 {
                continue;
            }
            for (wij, &gj) in row.iter_mut().zip(g) {
                *wij += xi * gj;
            }
        }
    }

    /// Number of stored (non-masked) entries: masked matrices count mask
    /// trues, unmasked matrices count all entries.
    pub fn stored_entries(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => self.data.len(),
        }
    }

    /// Zero every entry whose mask is false. No-op without a mask.
    pub fn enforce_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (v, &keep) in self.data.iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
}
