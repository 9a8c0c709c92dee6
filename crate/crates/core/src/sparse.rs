//! Compressed sparse row storage for pruned weight matrices.

use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `y += W^T x`, same contract as `Matrix::apply_t`.
    pub fn apply_t(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let start = self.row_offsets[i];
            let end = self.row_offsets[i + 1];
            for k in start..end {
                y[self.col_indices[k]] += self.values[k] * xi;
            }
        }
    }
}

/// Compress a matrix, keeping entries where the mask is true. A matrix
/// without a mask keeps its nonzero entries.
pub fn sparsify(matrix: &Matrix) -> SparseMatrix {
    let mut row_offsets = Vec::with_capacity(matrix.rows + 1);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();
    row_offsets.push(0);
    for i in 0..matrix.rows {
        for j in 0..matrix.cols {
            let keep = match &matrix.mask {
                Some(m) => m[i * matrix.cols + j],
                None => matrix.at(i, j) != 0.0,
            };
            if keep {
                col_indices.push(j);
                values.push(matrix.at(i, j));
            }
        }
        row_offsets.push(values.len());
    }
    SparseMatrix {
        rows: matrix.rows,
        cols: matrix.cols,
        row_offsets,
        col_indices,
        values,
    }
}

/// Expand back to dense storage (no mask attached).
pub fn densify(sparse: &SparseMatrix) -> Matrix {
    let mut out = Matrix::zeros(sparse.rows, sparse.cols);
    for i in 0..sparse.rows {
        for k in sparse.row_offsets[i]..sparse.row_offsets[i + 1] {
            *out.at_mut(i, sparse.col_indices[k]) = sparse.values[k];
        }
    }
    out
}
