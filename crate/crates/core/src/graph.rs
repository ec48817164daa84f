//! Per-layer learned region adjacency.
//!
//! Distances use a Mahalanobis metric `M = W_d W_dᵀ` evaluated through the
//! projection `‖W_dᵀ(h_i - h_j)‖²`, so `M` is never formed. The adjacency is
//! an exponential kernel of those distances restricted to the frozen region
//! mask (diagonal excluded), thresholded by the edge filter, and finally
//! re-normalized with self-loops for propagation.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, shape_err, Result};
use crate::tensor::{SparsePattern, Tensor};

/// Standard deviation of the noise added to the identity when a metric
/// factor is initialized.
pub const METRIC_INIT_NOISE: f64 = 0.01;

/// `f×f` identity plus `N(0, METRIC_INIT_NOISE²)` noise.
pub fn init_metric_factor(width: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, METRIC_INIT_NOISE).expect("valid sigma");
    let mut data = Tensor::eye(width).into_vec();
    data.iter_mut().for_each(|v| *v += normal.sample(rng));
    Tensor::matrix(width, width, data).expect("square")
}

/// Edge pattern (diagonal dropped) from a dense boolean mask.
pub fn edges_from_mask(mask: &[Vec<bool>]) -> Result<SparsePattern> {
    let c = mask.len();
    if mask.iter().any(|r| r.len() != c) {
        return Err(shape_err("edges_from_mask", "mask must be square"));
    }
    let rows: Vec<Vec<usize>> =
        mask.iter().enumerate().map(|(i, r)| (0..c).filter(|&j| j != i && (r[j] || mask[j][i])).collect()).collect();
    SparsePattern::from_rows(c, &rows)
}

/// Sparse symmetric `c×c` adjacency on a fixed edge pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdjacency {
    pub pattern: Arc<SparsePattern>,
    pub values: Vec<f64>,
    /// Threshold of the last edge filter applied, if any.
    pub beta: Option<f64>,
}

impl LayerAdjacency {
    pub fn to_dense(&self) -> Tensor {
        self.pattern.densify(&self.values)
    }

    fn record(&self, tape: &mut Tape) -> Result<Var> {
        tape.sparse_constant(self.pattern.clone(), self.values.clone())
    }
}

/// Squared Mahalanobis distances between all rows of `h` (`c×f`) under
/// `M = W_d W_dᵀ` (`w_d` is `f×r`), as a dense `c×c` matrix.
pub fn mahalanobis_sq(h: &Tensor, w_d: &Tensor) -> Result<Tensor> {
    let c = h.rows();
    let all_pairs = SparsePattern::from_rows(c, &vec![(0..c).collect(); c])?;
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let wv = tape.constant(w_d.clone());
    let d2 = record_distances(&mut tape, hv, wv, Arc::new(all_pairs))?;
    Ok(tape.pattern(d2).expect("sparse").densify(tape.value(d2).data()))
}

/// `A_ij = exp(-gamma·D²_ij)` on every edge of `edges`, zero elsewhere.
pub fn build_adjacency(h: &Tensor, w_d: &Tensor, edges: Arc<SparsePattern>, gamma: f64) -> Result<LayerAdjacency> {
    if !(gamma > 0.0) {
        return Err(contract(format!("gamma must be positive, got {gamma}")));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let wv = tape.constant(w_d.clone());
    let a = record_adjacency(&mut tape, hv, wv, edges.clone(), gamma)?;
    Ok(LayerAdjacency { pattern: edges, values: tape.value(a).data().to_vec(), beta: None })
}

/// Zeroes every entry not strictly above `beta`.
pub fn edge_filter(a: &LayerAdjacency, beta: f64) -> Result<LayerAdjacency> {
    if !(beta >= 0.0) {
        return Err(contract(format!("beta must be non-negative, got {beta}")));
    }
    let mut tape = Tape::new();
    let av = a.record(&mut tape)?;
    let f = tape.threshold(av, beta);
    Ok(LayerAdjacency { pattern: a.pattern.clone(), values: tape.value(f).data().to_vec(), beta: Some(beta) })
}

/// Dense `D̃^{-1/2}(A + I)D̃^{-1/2}`.
pub fn renormalize(a: &LayerAdjacency) -> Result<Tensor> {
    if a.values.iter().any(|&v| v < 0.0) {
        return Err(contract("adjacency must be non-negative"));
    }
    let mut tape = Tape::new();
    let av = a.record(&mut tape)?;
    let r = tape.renormalize(av)?;
    Ok(tape.pattern(r).expect("sparse").densify(tape.value(r).data()))
}

/// Records `‖(h W_d)_i - (h W_d)_j‖²` on the entries of `edges`.
pub fn record_distances(tape: &mut Tape, h: Var, w_d: Var, edges: Arc<SparsePattern>) -> Result<Var> {
    let projected = tape.matmul(h, w_d)?;
    tape.edge_sq_dist(projected, edges)
}

/// Records the masked exponential-kernel adjacency.
pub fn record_adjacency(tape: &mut Tape, h: Var, w_d: Var, edges: Arc<SparsePattern>, gamma: f64) -> Result<Var> {
    let d2 = record_distances(tape, h, w_d, edges)?;
    Ok(tape.exp_kernel(d2, gamma))
}
