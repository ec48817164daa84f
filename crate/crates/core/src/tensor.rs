//! Dense row-major tensors and fixed sparsity patterns.
//!
//! Tensor storage is shared behind an `Arc` so values recorded on the tape
//! (such as the pixel matrix) can be referenced without copying. Tensors are
//! never mutated after construction.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{shape_err, Result};

/// Row count above which dense products fan out over rows with rayon.
/// Every output row is still computed by exactly one thread, so results do
/// not depend on the thread count.
const PAR_MATMUL_FLOPS: usize = 1 << 22;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(vec![value; numel]) }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: Arc::new(vec![value]) }
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { shape: vec![n, n], data: Arc::new(data) }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self { shape: vec![rows.len(), cols], data: Arc::new(data) }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(shape_err(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&v| f(v)).collect()) }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, p) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] · [{k2}x{p}]")));
        }
        let out = matmul_raw(&self.data, &rhs.data, m, k, p);
        Tensor::matrix(m, p, out)
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `A[m×k] · B[k×p]` on raw row-major slices.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    let row_kernel = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if p == 0 {
        return out;
    }
    if m * k * p >= PAR_MATMUL_FLOPS {
        out.par_chunks_mut(p).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(p).enumerate().for_each(row_kernel);
    }
    out
}

/// `Aᵀ[k×m]ᵀ · B`: A is stored `m×k`, result is `k×p`.
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * p];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * p..(i + 1) * p];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let o = &mut out[kk * p..(kk + 1) * p];
            for (ov, &bv) in o.iter_mut().zip(b_row) {
                *ov += aik * bv;
            }
        }
    }
    out
}

/// `A · Bᵀ`: A is `m×p`, B is `k×p`, result is `m×k`.
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, p: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    let row_kernel = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * p..(i + 1) * p];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * p..(j + 1) * p];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if k == 0 {
        return out;
    }
    if m * k * p >= PAR_MATMUL_FLOPS {
        out.par_chunks_mut(k).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(k).enumerate().for_each(row_kernel);
    }
    out
}

/// Compressed-row sparsity pattern with sorted column indices per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsePattern {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SparsePattern {
    /// Builds a pattern from per-row column lists. Columns are sorted and
    /// deduplicated.
    pub fn from_rows(cols: usize, rows: &[Vec<usize>]) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in rows {
            let mut r = row.clone();
            r.sort_unstable();
            r.dedup();
            if let Some(&last) = r.last() {
                if last >= cols {
                    return Err(shape_err(
                        "SparsePattern::from_rows",
                        format!("column {last} out of range for width {cols}"),
                    ));
                }
            }
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        Ok(Self { rows: rows.len(), cols, row_ptr, col_idx })
    }

    /// Pattern whose only entries are the diagonal.
    pub fn identity(n: usize) -> Self {
        Self { rows: n, cols: n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Entry range of row `r` into the value array.
    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    pub fn row_cols(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_range(r)]
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.position(r, c).is_some()
    }

    /// Index of entry `(r, c)` in the value array.
    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        let start = self.row_ptr[r];
        self.row_cols(r).binary_search(&c).ok().map(|k| start + k)
    }

    /// Iterates `(row, col, value_index)` over every stored entry.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.rows).flat_map(move |r| self.row_range(r).map(move |k| (r, self.col_idx[k], k)))
    }

    /// For each entry `(i, j)`, the index of `(j, i)`. `None` if the pattern
    /// is not structurally symmetric.
    pub fn transpose_positions(&self) -> Option<Vec<usize>> {
        self.entries().map(|(r, c, _)| self.position(c, r)).collect()
    }

    /// Same pattern with every diagonal entry added.
    pub fn with_diagonal(&self) -> Self {
        let rows: Vec<Vec<usize>> = (0..self.rows)
            .map(|r| {
                let mut v = self.row_cols(r).to_vec();
                if r < self.cols {
                    v.push(r);
                }
                v
            })
            .collect();
        Self::from_rows(self.cols, &rows).expect("diagonal within bounds")
    }

    /// Same pattern with every diagonal entry removed.
    pub fn without_diagonal(&self) -> Self {
        let rows: Vec<Vec<usize>> = (0..self.rows)
            .map(|r| self.row_cols(r).iter().copied().filter(|&c| c != r).collect())
            .collect();
        Self::from_rows(self.cols, &rows).expect("subset of a valid pattern")
    }

    /// Expands values laid out on this pattern into a dense matrix.
    pub fn densify(&self, values: &[f64]) -> Tensor {
        let mut out = vec![0.0; self.rows * self.cols];
        for (r, c, k) in self.entries() {
            out[r * self.cols + c] = values[k];
        }
        Tensor::matrix(self.rows, self.cols, out).expect("pattern dims")
    }
}
