//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation reads nodes
//! that already exist and pushes one new node, so insertion order is a
//! topological order and [`Tape::backward`] only has to walk the arena once
//! from the loss back to the first node.
//!
//! Besides dense matrices the tape carries *sparse* nodes: a value vector
//! laid out on a fixed [`SparsePattern`]. The soft pixel-to-region assignment
//! and the per-layer region adjacency live in this form, which keeps memory
//! proportional to the number of neighbouring pairs instead of `n × c`.
//!
//! ```
//! use cadgcn::autodiff::Tape;
//! use cadgcn::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::from_rows(&[&[2.0]]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&tape, w).data(), &[4.0]);
//! ```

use std::sync::Arc;

use crate::error::{contract, shape_err, Result};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, SparsePattern, Tensor};

/// Floor applied to probabilities before taking the logarithm in
/// [`Tape::cross_entropy`].
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage layout of a node's value.
#[derive(Clone, Debug)]
pub enum Layout {
    Dense,
    /// Value is a flat `[nnz]` vector ordered like the pattern's entries.
    Sparse(Arc<SparsePattern>),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    ExpKernel { input: Var, gamma: f64 },
    Threshold { input: Var, beta: f64 },
    GaussianAssign { z: Var, v: Var, gamma: f64 },
    WeightedColumnMean { p: Var, z: Var, col_sums: Vec<f64> },
    SpMM { a: Var, b: Var },
    EdgeSqDist { y: Var },
    Renormalize { a: Var, inv_sqrt_deg: Vec<f64>, out_pos: Vec<usize> },
    CrossEntropy { o: Var, targets: Vec<(usize, usize)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    layout: Layout,
    op: Op,
    trainable: bool,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if the loss depends on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`, zeros when the loss does not reach it.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn layout(&self, var: Var) -> &Layout {
        &self.nodes[var.0].layout
    }

    pub fn pattern(&self, var: Var) -> Option<&Arc<SparsePattern>> {
        match &self.nodes[var.0].layout {
            Layout::Sparse(p) => Some(p),
            Layout::Dense => None,
        }
    }

    /// Trainable leaves in insertion order.
    pub fn trainable(&self) -> Vec<Var> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].trainable).map(Var).collect()
    }

    fn push(&mut self, value: Tensor, layout: Layout, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, layout, op, trainable: false, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dense(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.layout(v) {
            Layout::Dense => self.value(v).dims2(op),
            Layout::Sparse(_) => Err(shape_err(op, "expected a dense operand")),
        }
    }

    fn sparse(&self, v: Var, op: &'static str) -> Result<Arc<SparsePattern>> {
        self.pattern(v).cloned().ok_or_else(|| shape_err(op, "expected a sparse operand"))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Layout::Dense, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Layout::Dense, Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    /// Constant sparse matrix on `pattern`.
    pub fn sparse_constant(&mut self, pattern: Arc<SparsePattern>, values: Vec<f64>) -> Result<Var> {
        if values.len() != pattern.nnz() {
            return Err(shape_err("sparse_constant", format!("{} values for {} entries", values.len(), pattern.nnz())));
        }
        let n = values.len();
        Ok(self.push(Tensor::new(vec![n], values)?, Layout::Sparse(pattern), Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dense(a, "matmul")?;
        let (k2, p) = self.dense(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] · [{k2}x{p}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, p);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, p, out)?, Layout::Dense, Op::MatMul(a, b), rg))
    }

    fn same_layout(&self, a: Var, b: Var, op: &'static str) -> Result<Layout> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        match (self.layout(a), self.layout(b)) {
            (Layout::Dense, Layout::Dense) => Ok(Layout::Dense),
            (Layout::Sparse(p), Layout::Sparse(q)) if Arc::ptr_eq(p, q) || p == q => Ok(Layout::Sparse(p.clone())),
            _ => Err(shape_err(op, "operand layouts differ")),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let layout = self.same_layout(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, layout, Op::Add(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let layout = self.same_layout(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, layout, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let layout = self.layout(a).clone();
        let rg = self.rg(a);
        self.push(value, layout, Op::Scale(a, factor), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Layout::Dense, Op::Sum(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let layout = self.layout(a).clone();
        let rg = self.rg(a);
        self.push(value, layout, Op::Softplus(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.dense(a, "softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        if c > 0 {
            for row in out.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(n, c, out)?, Layout::Dense, Op::SoftmaxRows(a), rg))
    }

    /// Elementwise `exp(-gamma * x)`, preserving layout.
    pub fn exp_kernel(&mut self, a: Var, gamma: f64) -> Var {
        let value = self.value(a).map(|x| (-gamma * x).exp());
        let layout = self.layout(a).clone();
        let rg = self.rg(a);
        self.push(value, layout, Op::ExpKernel { input: a, gamma }, rg)
    }

    /// Keeps entries strictly above `beta`, zeroes the rest. Gradients pass
    /// through kept entries and are zero for dropped ones.
    pub fn threshold(&mut self, a: Var, beta: f64) -> Var {
        let value = self.value(a).map(|x| if x > beta { x } else { 0.0 });
        let layout = self.layout(a).clone();
        let rg = self.rg(a);
        self.push(value, layout, Op::Threshold { input: a, beta }, rg)
    }

    /// Sparse `n×c` matrix with `exp(-gamma‖z_i - v_j‖²)` at every entry of
    /// `pattern`. `z` is `n×d` (one row per pixel), `v` is `d×c` (one column
    /// per anchor).
    pub fn gaussian_assign(&mut self, z: Var, v: Var, pattern: Arc<SparsePattern>, gamma: f64) -> Result<Var> {
        let (n, d) = self.dense(z, "gaussian_assign")?;
        let (d2, c) = self.dense(v, "gaussian_assign")?;
        if d != d2 || pattern.rows() != n || pattern.cols() != c {
            return Err(shape_err(
                "gaussian_assign",
                format!("z [{n}x{d}], v [{d2}x{c}], pattern [{}x{}]", pattern.rows(), pattern.cols()),
            ));
        }
        let zd = self.value(z).data();
        let vt = self.value(v).transpose()?;
        let vtd = vt.data();
        let mut out = vec![0.0; pattern.nnz()];
        for (i, j, k) in pattern.entries() {
            let zi = &zd[i * d..(i + 1) * d];
            let vj = &vtd[j * d..(j + 1) * d];
            let dist: f64 = zi.iter().zip(vj).map(|(a, b)| (a - b) * (a - b)).sum();
            out[k] = (-gamma * dist).exp();
        }
        let nnz = out.len();
        let rg = self.rg(z) || self.rg(v);
        Ok(self.push(Tensor::new(vec![nnz], out)?, Layout::Sparse(pattern), Op::GaussianAssign { z, v, gamma }, rg))
    }

    /// Column-normalized weighted mean `x_j = Σ_i P_ij z_i / Σ_i P_ij` for a
    /// sparse `n×c` weight matrix `p` and dense `n×d` rows `z`.
    pub fn weighted_column_mean(&mut self, p: Var, z: Var) -> Result<Var> {
        let pat = self.sparse(p, "weighted_column_mean")?;
        let (n, d) = self.dense(z, "weighted_column_mean")?;
        if pat.rows() != n {
            return Err(shape_err("weighted_column_mean", format!("weights have {} rows, features {n}", pat.rows())));
        }
        let c = pat.cols();
        let pv = self.value(p).data();
        let zd = self.value(z).data();
        let mut col_sums = vec![0.0; c];
        let mut acc = vec![0.0; c * d];
        for (i, j, k) in pat.entries() {
            let w = pv[k];
            col_sums[j] += w;
            let zi = &zd[i * d..(i + 1) * d];
            for (a, &zv) in acc[j * d..(j + 1) * d].iter_mut().zip(zi) {
                *a += w * zv;
            }
        }
        if let Some(j) = col_sums.iter().position(|&s| !(s > 0.0)) {
            return Err(contract(format!("region {j} has zero total assignment weight")));
        }
        for (j, s) in col_sums.iter().enumerate() {
            for a in &mut acc[j * d..(j + 1) * d] {
                *a /= s;
            }
        }
        let rg = self.rg(p) || self.rg(z);
        Ok(self.push(Tensor::matrix(c, d, acc)?, Layout::Dense, Op::WeightedColumnMean { p, z, col_sums }, rg))
    }

    /// Sparse-times-dense product `A · B`.
    pub fn spmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let pat = self.sparse(a, "spmm")?;
        let (c, p) = self.dense(b, "spmm")?;
        if pat.cols() != c {
            return Err(shape_err("spmm", format!("[{}x{}] · [{c}x{p}]", pat.rows(), pat.cols())));
        }
        let av = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; pat.rows() * p];
        for (i, j, k) in pat.entries() {
            let w = av[k];
            if w == 0.0 {
                continue;
            }
            let o = &mut out[i * p..(i + 1) * p];
            for (ov, &bv) in o.iter_mut().zip(&bd[j * p..(j + 1) * p]) {
                *ov += w * bv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(pat.rows(), p, out)?, Layout::Dense, Op::SpMM { a, b }, rg))
    }

    /// Squared Euclidean distance `‖y_i - y_j‖²` for every entry `(i, j)` of
    /// a square `pattern` over the rows of `y`.
    pub fn edge_sq_dist(&mut self, y: Var, pattern: Arc<SparsePattern>) -> Result<Var> {
        let (c, r) = self.dense(y, "edge_sq_dist")?;
        if pattern.rows() != c || pattern.cols() != c {
            return Err(shape_err("edge_sq_dist", format!("{c} nodes, pattern [{}x{}]", pattern.rows(), pattern.cols())));
        }
        let yd = self.value(y).data();
        let mut out = vec![0.0; pattern.nnz()];
        for (i, j, k) in pattern.entries() {
            let yi = &yd[i * r..(i + 1) * r];
            let yj = &yd[j * r..(j + 1) * r];
            out[k] = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
        }
        let nnz = out.len();
        let rg = self.rg(y);
        Ok(self.push(Tensor::new(vec![nnz], out)?, Layout::Sparse(pattern), Op::EdgeSqDist { y }, rg))
    }

    /// Re-normalized propagation operator `D̃^{-1/2}(A + I)D̃^{-1/2}` with
    /// `D̃_ii = Σ_j (A + I)_ij`. The output pattern is the input pattern plus
    /// the diagonal.
    pub fn renormalize(&mut self, a: Var) -> Result<Var> {
        let pat = self.sparse(a, "renormalize")?;
        if pat.rows() != pat.cols() {
            return Err(shape_err("renormalize", "adjacency must be square"));
        }
        let n = pat.rows();
        let out_pat = Arc::new(pat.with_diagonal());
        let av = self.value(a).data();
        let out_pos: Vec<usize> = pat.entries().map(|(i, j, _)| out_pat.position(i, j).expect("superset")).collect();
        let mut tilde = vec![0.0; out_pat.nnz()];
        for i in 0..n {
            tilde[out_pat.position(i, i).expect("diagonal present")] = 1.0;
        }
        for (k, &pos) in out_pos.iter().enumerate() {
            tilde[pos] += av[k];
        }
        let inv_sqrt_deg: Vec<f64> = (0..n)
            .map(|i| {
                let deg: f64 = tilde[out_pat.row_range(i)].iter().sum();
                1.0 / deg.sqrt()
            })
            .collect();
        let out: Vec<f64> = out_pat.entries().map(|(i, j, k)| tilde[k] * inv_sqrt_deg[i] * inv_sqrt_deg[j]).collect();
        let nnz = out.len();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![nnz], out)?,
            Layout::Sparse(out_pat),
            Op::Renormalize { a, inv_sqrt_deg, out_pos },
            rg,
        ))
    }

    /// Summed cross-entropy `-Σ ln max(O[row, class], LOG_CLAMP)` over the
    /// `(row, class)` targets.
    pub fn cross_entropy(&mut self, o: Var, targets: Vec<(usize, usize)>) -> Result<Var> {
        let (n, c) = self.dense(o, "cross_entropy")?;
        if targets.is_empty() {
            return Err(contract("cross-entropy needs at least one labeled row"));
        }
        if let Some(&(r, k)) = targets.iter().find(|&&(r, k)| r >= n || k >= c) {
            return Err(shape_err("cross_entropy", format!("target ({r}, {k}) outside [{n}x{c}]")));
        }
        let od = self.value(o).data();
        let loss: f64 = targets.iter().map(|&(r, k)| -od[r * c + k].max(LOG_CLAMP).ln()).sum();
        let rg = self.rg(o);
        Ok(self.push(Tensor::scalar(loss), Layout::Dense, Op::CrossEntropy { o, targets }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(contract(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let p = bv.cols();
                if self.rg(*a) {
                    accumulate(grads, *a, &matmul_nt_raw(g, bv.data(), m, p, k));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, &matmul_tn_raw(av.data(), g, m, k, p));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        accumulate(grads, *v, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let ga: Vec<f64> = g.iter().zip(bd).map(|(g, b)| g * b).collect();
                    accumulate(grads, *a, &ga);
                }
                if self.rg(*b) {
                    let gb: Vec<f64> = g.iter().zip(ad).map(|(g, a)| g * a).collect();
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Scale(a, f) => {
                let ga: Vec<f64> = g.iter().map(|g| g * f).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).numel()];
                accumulate(grads, *a, &ga);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(val.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, &gv), &y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = y * (gv - dot);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::ExpKernel { input, gamma } => {
                let ga: Vec<f64> = g.iter().zip(val).map(|(g, y)| -gamma * g * y).collect();
                accumulate(grads, *input, &ga);
            }
            Op::Threshold { input, beta } => {
                let x = self.value(*input).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(&g, &x)| if x > *beta { g } else { 0.0 }).collect();
                accumulate(grads, *input, &ga);
            }
            Op::GaussianAssign { z, v, gamma } => {
                let pat = self.pattern_of(node);
                let zt = self.value(*z);
                let (d, c) = (zt.cols(), self.value(*v).cols());
                let zd = zt.data();
                let vd = self.value(*v).data();
                let mut gz = self.rg(*z).then(|| vec![0.0; zd.len()]);
                // Accumulate the anchor gradient transposed (c×d) so each
                // anchor's entries are contiguous.
                let mut gvt = self.rg(*v).then(|| vec![0.0; c * d]);
                for (i, j, k) in pat.entries() {
                    let coeff = 2.0 * gamma * g[k] * val[k];
                    if coeff == 0.0 {
                        continue;
                    }
                    for t in 0..d {
                        let diff = zd[i * d + t] - vd[t * c + j];
                        if let Some(gv) = gvt.as_mut() {
                            gv[j * d + t] += coeff * diff;
                        }
                        if let Some(gz) = gz.as_mut() {
                            gz[i * d + t] -= coeff * diff;
                        }
                    }
                }
                if let Some(gvt) = gvt {
                    let mut gv = vec![0.0; d * c];
                    for j in 0..c {
                        for t in 0..d {
                            gv[t * c + j] = gvt[j * d + t];
                        }
                    }
                    accumulate(grads, *v, &gv);
                }
                if let Some(gz) = gz {
                    accumulate(grads, *z, &gz);
                }
            }
            Op::WeightedColumnMean { p, z, col_sums } => {
                let pat = self.sparse(*p, "backward").expect("sparse weights");
                let zt = self.value(*z);
                let d = zt.cols();
                let zd = zt.data();
                let pv = self.value(*p).data();
                if self.rg(*p) {
                    let mut gp = vec![0.0; pv.len()];
                    for (i, j, k) in pat.entries() {
                        let gj = &g[j * d..(j + 1) * d];
                        let xj = &val[j * d..(j + 1) * d];
                        let zi = &zd[i * d..(i + 1) * d];
                        let dot: f64 = zi.iter().zip(xj).zip(gj).map(|((z, x), g)| (z - x) * g).sum();
                        gp[k] = dot / col_sums[j];
                    }
                    accumulate(grads, *p, &gp);
                }
                if self.rg(*z) {
                    let mut gz = vec![0.0; zd.len()];
                    for (i, j, k) in pat.entries() {
                        let w = pv[k] / col_sums[j];
                        for (o, &gv) in gz[i * d..(i + 1) * d].iter_mut().zip(&g[j * d..(j + 1) * d]) {
                            *o += w * gv;
                        }
                    }
                    accumulate(grads, *z, &gz);
                }
            }
            Op::SpMM { a, b } => {
                let pat = self.sparse(*a, "backward").expect("sparse lhs");
                let bt = self.value(*b);
                let p = bt.cols();
                let bd = bt.data();
                let av = self.value(*a).data();
                if self.rg(*a) {
                    let ga: Vec<f64> = pat
                        .entries()
                        .map(|(i, j, _)| g[i * p..(i + 1) * p].iter().zip(&bd[j * p..(j + 1) * p]).map(|(x, y)| x * y).sum())
                        .collect();
                    accumulate(grads, *a, &ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; bd.len()];
                    for (i, j, k) in pat.entries() {
                        let w = av[k];
                        for (o, &gv) in gb[j * p..(j + 1) * p].iter_mut().zip(&g[i * p..(i + 1) * p]) {
                            *o += w * gv;
                        }
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::EdgeSqDist { y } => {
                let pat = self.pattern_of(node);
                let yt = self.value(*y);
                let r = yt.cols();
                let yd = yt.data();
                let mut gy = vec![0.0; yd.len()];
                for (i, j, k) in pat.entries() {
                    let coeff = 2.0 * g[k];
                    if coeff == 0.0 || i == j {
                        continue;
                    }
                    for t in 0..r {
                        let diff = coeff * (yd[i * r + t] - yd[j * r + t]);
                        gy[i * r + t] += diff;
                        gy[j * r + t] -= diff;
                    }
                }
                accumulate(grads, *y, &gy);
            }
            Op::Renormalize { a, inv_sqrt_deg, out_pos } => {
                let out_pat = self.pattern_of(node);
                let s = inv_sqrt_deg;
                // val_k = tilde_ij s_i s_j; d val_k / d deg_i picks up
                // -1/2 val_k / deg_i on both the row and the column node.
                let mut g_tilde = vec![0.0; g.len()];
                let mut g_deg = vec![0.0; s.len()];
                for (i, j, k) in out_pat.entries() {
                    g_tilde[k] = g[k] * s[i] * s[j];
                    let contrib = -0.5 * g[k] * val[k];
                    g_deg[i] += contrib * s[i] * s[i];
                    g_deg[j] += contrib * s[j] * s[j];
                }
                let in_pat = self.sparse(*a, "backward").expect("sparse adjacency");
                let ga: Vec<f64> = in_pat.entries().map(|(i, _, k)| g_tilde[out_pos[k]] + g_deg[i]).collect();
                accumulate(grads, *a, &ga);
            }
            Op::CrossEntropy { o, targets } => {
                let ot = self.value(*o);
                let c = ot.cols();
                let od = ot.data();
                let mut go = vec![0.0; od.len()];
                for &(r, k) in targets {
                    let p = od[r * c + k];
                    if p > LOG_CLAMP {
                        go[r * c + k] -= g[0] / p;
                    }
                }
                accumulate(grads, *o, &go);
            }
        }
    }

    fn pattern_of<'a>(&'a self, node: &'a Node) -> &'a SparsePattern {
        match &node.layout {
            Layout::Sparse(p) => p,
            Layout::Dense => unreachable!("sparse op produced a dense node"),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, g: &[f64]) {
    match &mut grads[var.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// `ln(1 + eˣ)` in the overflow-free form `max(x, 0) + ln(1 + e^{-|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
