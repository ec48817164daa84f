//! Pixel ↔ region transforms: soft assignment, weighted-mean projection,
//! and re-projection of region outputs onto pixels.
//!
//! The free functions here evaluate a single transform outside of training.
//! They record onto a throwaway [`Tape`] so they share the exact arithmetic
//! used by the model's forward pass.

use std::sync::Arc;

use crate::autodiff::Tape;
use crate::error::{contract, shape_err, Result};
use crate::tensor::{SparsePattern, Tensor};

/// Sparse `n×c` pixel-to-region weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAssignment {
    pub pattern: Arc<SparsePattern>,
    pub weights: Vec<f64>,
}

impl SoftAssignment {
    pub fn new(pattern: Arc<SparsePattern>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != pattern.nnz() {
            return Err(shape_err("SoftAssignment", format!("{} weights for {} entries", weights.len(), pattern.nnz())));
        }
        Ok(Self { pattern, weights })
    }

    /// One-hot assignment of each pixel to `region_of[i]`, laid out on
    /// `pattern` (which must contain those entries).
    pub fn one_hot(pattern: Arc<SparsePattern>, region_of: &[usize]) -> Result<Self> {
        let mut weights = vec![0.0; pattern.nnz()];
        for (i, &r) in region_of.iter().enumerate() {
            let k = pattern.position(i, r).ok_or_else(|| contract(format!("pixel {i} cannot reach region {r}")))?;
            weights[k] = 1.0;
        }
        Self::new(pattern, weights)
    }

    pub fn pixels(&self) -> usize {
        self.pattern.rows()
    }

    pub fn regions(&self) -> usize {
        self.pattern.cols()
    }

    pub fn to_dense(&self) -> Tensor {
        self.pattern.densify(&self.weights)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.regions()];
        for (_, j, k) in self.pattern.entries() {
            sums[j] += self.weights[k];
        }
        sums
    }
}

/// `P_ij = exp(-gamma‖z_i - v_j‖²)` for every region `j` in pixel `i`'s
/// neighbourhood (`pattern` row `i`), zero elsewhere.
pub fn assign_pixels(z: &Tensor, anchors: &Tensor, pattern: Arc<SparsePattern>, gamma: f64) -> Result<SoftAssignment> {
    if !(gamma > 0.0) {
        return Err(contract(format!("gamma must be positive, got {gamma}")));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let vv = tape.constant(anchors.clone());
    let p = tape.gaussian_assign(zv, vv, pattern.clone(), gamma)?;
    SoftAssignment::new(pattern, tape.value(p).data().to_vec())
}

/// Region features `x_j = Σ_i P_ij z_i / Σ_i P_ij`, as a `c×d` matrix.
pub fn project(p: &SoftAssignment, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = tape.sparse_constant(p.pattern.clone(), p.weights.clone())?;
    let zv = tape.constant(z.clone());
    let x = tape.weighted_column_mean(pv, zv)?;
    Ok(tape.value(x).clone())
}

/// Pixel outputs `P · H` from `c×C` region outputs.
pub fn reproject(p: &SoftAssignment, region_out: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = tape.sparse_constant(p.pattern.clone(), p.weights.clone())?;
    let hv = tape.constant(region_out.clone());
    let o = tape.spmm(pv, hv)?;
    Ok(tape.value(o).clone())
}
