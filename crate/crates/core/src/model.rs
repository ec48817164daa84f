//! The full differentiable forward pass: soft assignment, projection,
//! dynamic graph convolution layers, re-projection, softmax, and the
//! summed cross-entropy on labeled pixels.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{softmax_in_place, softplus, Tape, Var, LOG_CLAMP};
use crate::data::LabelRaster;
use crate::error::{contract, shape_err, Result};
use crate::graph::{init_metric_factor, record_adjacency};
use crate::segmentation::{Neighborhoods, SegmentationMap};
use crate::tensor::{SparsePattern, Tensor};

/// Graph the convolutions run on.
#[derive(Clone, Debug)]
pub enum GraphStructure {
    /// Pixels are softly assigned to regions; the graph is over regions.
    Projected(Neighborhoods),
    /// No projection: every pixel is a node (`edges` is `n×n`).
    Pixels { edges: Arc<SparsePattern> },
}

impl GraphStructure {
    pub fn from_segmentation(seg: &SegmentationMap) -> Self {
        Self::Projected(Neighborhoods::from_segmentation(seg))
    }

    /// Pixel graph linking each pixel to its (up to) 8 spatial neighbours.
    pub fn pixel_grid(height: usize, width: usize) -> Self {
        let rows: Vec<Vec<usize>> = (0..height * width)
            .map(|p| {
                let (y, x) = ((p / width) as isize, (p % width) as isize);
                let mut ns = Vec::with_capacity(8);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if (dy, dx) != (0, 0) && yy >= 0 && xx >= 0 && (yy as usize) < height && (xx as usize) < width {
                            ns.push(yy as usize * width + xx as usize);
                        }
                    }
                }
                ns
            })
            .collect();
        let edges = SparsePattern::from_rows(height * width, &rows).expect("in-bounds neighbours");
        Self::Pixels { edges: Arc::new(edges) }
    }

    /// Number of graph nodes.
    pub fn nodes(&self) -> usize {
        match self {
            Self::Projected(n) => n.edges.rows(),
            Self::Pixels { edges } => edges.rows(),
        }
    }

    pub fn is_projected(&self) -> bool {
        matches!(self, Self::Projected(_))
    }

    fn edges(&self) -> &Arc<SparsePattern> {
        match self {
            Self::Projected(n) => &n.edges,
            Self::Pixels { edges } => edges,
        }
    }
}

/// All trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `d×c` region anchors; absent when the model has no projection.
    pub anchors: Option<Tensor>,
    /// `W^(l)`, `f_l × f_{l+1}`.
    pub weights: Vec<Tensor>,
    /// `W_d` used to build the adjacency of layer `l`, `f_l × r_l`.
    pub metrics: Vec<Tensor>,
}

impl ModelParams {
    /// Fresh parameters for widths `[d, hidden.., classes]`. Layer weights
    /// are Glorot-uniform, metric factors are the identity plus small noise.
    pub fn init(anchors: Option<Tensor>, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(contract("need at least one layer"));
        }
        if let Some(v) = &anchors {
            if v.rows() != widths[0] {
                return Err(shape_err("ModelParams::init", format!("anchors have {} rows, input width {}", v.rows(), widths[0])));
            }
        }
        let mut weights = Vec::new();
        let mut metrics = Vec::new();
        for pair in widths.windows(2) {
            let (fi, fo) = (pair[0], pair[1]);
            metrics.push(init_metric_factor(fi, rng));
            let limit = (6.0 / (fi + fo) as f64).sqrt();
            let data = (0..fi * fo).map(|_| rng.gen_range(-limit..limit)).collect();
            weights.push(Tensor::matrix(fi, fo, data)?);
        }
        Ok(Self { anchors, weights, metrics })
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.weights.iter().map(Tensor::rows).collect();
        w.extend(self.weights.last().map(Tensor::cols));
        w
    }

    pub fn class_count(&self) -> usize {
        self.weights.last().map_or(0, Tensor::cols)
    }

    /// Tensors in checkpoint order: anchors, then `W^(l)`, `W_d^(l)` per layer.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.anchors.iter().collect();
        for (w, m) in self.weights.iter().zip(&self.metrics) {
            out.push(w);
            out.push(m);
        }
        out
    }

    pub fn validate(&self, z_width: usize, structure: &GraphStructure) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.metrics.len() {
            return Err(contract("weights and metric factors must pair up per layer"));
        }
        let mut width = z_width;
        for (l, (w, m)) in self.weights.iter().zip(&self.metrics).enumerate() {
            if w.rows() != width || m.rows() != width {
                return Err(shape_err("ModelParams", format!("layer {l} expects input width {width}")));
            }
            width = w.cols();
        }
        match (structure, &self.anchors) {
            (GraphStructure::Projected(n), Some(v)) if v.rows() == z_width && v.cols() == n.edges.rows() => Ok(()),
            (GraphStructure::Pixels { .. }, None) => Ok(()),
            _ => Err(contract("anchors do not match the graph structure")),
        }
    }
}

/// Hyperparameters of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub gamma: f64,
    pub beta: f64,
    /// Propagate with `D̃^{-1/2}(F(A) + I)D̃^{-1/2}` instead of `F(A)` itself.
    pub renormalize: bool,
    /// Record the metric factors as trainable.
    pub train_metrics: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { gamma: 0.2, beta: 0.01, renormalize: true, train_metrics: true }
    }
}

/// Tape handles for every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub anchors: Option<Var>,
    pub weights: Vec<Var>,
    pub metrics: Vec<Var>,
    pub assignment: Option<Var>,
    /// `X` (or the pixel matrix without projection).
    pub region_features: Var,
    pub adjacency: Vec<Var>,
    pub filtered: Vec<Var>,
    pub propagation: Vec<Var>,
    pub hidden: Vec<Var>,
    pub logits: Var,
    pub probabilities: Var,
}

impl ForwardTrace {
    /// Trainable handles in the same order as [`ModelParams::tensors`].
    pub fn parameter_vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.anchors.iter().copied().collect();
        for (w, m) in self.weights.iter().zip(&self.metrics) {
            out.push(*w);
            out.push(*m);
        }
        out
    }
}

/// Records the forward pass for pixel features `z` (`n×d`) on `tape`.
pub fn forward(
    tape: &mut Tape,
    z: &Tensor,
    structure: &GraphStructure,
    params: &ModelParams,
    opts: &ForwardOptions,
) -> Result<ForwardTrace> {
    params.validate(z.cols(), structure)?;
    if !(opts.gamma > 0.0) || !(opts.beta >= 0.0) {
        return Err(contract(format!("need gamma > 0 and beta >= 0, got {} and {}", opts.gamma, opts.beta)));
    }
    let zv = tape.constant(z.clone());
    let (anchors, assignment, mut h) = match structure {
        GraphStructure::Projected(n) => {
            let v = tape.param(params.anchors.clone().expect("validated"));
            let p = tape.gaussian_assign(zv, v, n.assignment.clone(), opts.gamma)?;
            let x = tape.weighted_column_mean(p, zv)?;
            (Some(v), Some(p), x)
        }
        GraphStructure::Pixels { .. } => (None, None, zv),
    };
    let region_features = h;
    let edges = structure.edges();
    let mut trace_w = Vec::new();
    let mut trace_m = Vec::new();
    let (mut adjacency, mut filtered, mut propagation, mut hidden) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (w, m) in params.weights.iter().zip(&params.metrics) {
        let mv = if opts.train_metrics { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        let wv = tape.param(w.clone());
        let a = record_adjacency(tape, h, mv, edges.clone(), opts.gamma)?;
        let f = tape.threshold(a, opts.beta);
        let prop = if opts.renormalize { tape.renormalize(f)? } else { f };
        let hw = tape.matmul(h, wv)?;
        let s = tape.spmm(prop, hw)?;
        h = tape.softplus(s);
        trace_w.push(wv);
        trace_m.push(mv);
        adjacency.push(a);
        filtered.push(f);
        propagation.push(prop);
        hidden.push(h);
    }
    let logits = match assignment {
        Some(p) => tape.spmm(p, h)?,
        None => h,
    };
    let probabilities = tape.softmax_rows(logits)?;
    Ok(ForwardTrace {
        anchors,
        weights: trace_w,
        metrics: trace_m,
        assignment,
        region_features,
        adjacency,
        filtered,
        propagation,
        hidden,
        logits,
        probabilities,
    })
}

/// `softplus(Â · H · W)` for a dense propagation matrix.
pub fn gcn_layer(h_prev: &Tensor, a_hat: &Tensor, w: &Tensor) -> Result<Tensor> {
    let hw = h_prev.matmul(w)?;
    Ok(a_hat.matmul(&hw)?.map(softplus))
}

/// One-hot targets for the labeled pixels used in the loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    pub rows: usize,
    pub classes: usize,
    /// `(pixel, class - 1)` for every labeled pixel, ascending by pixel.
    pub targets: Vec<(usize, usize)>,
}

impl LabelMatrix {
    /// Targets for the pixels in `idx` (must all be labeled).
    pub fn from_raster(labels: &LabelRaster, idx: &[usize]) -> Result<Self> {
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            match labels.labels.get(i) {
                Some(&l) if l > 0 => targets.push((i, l as usize - 1)),
                _ => return Err(contract(format!("pixel {i} is not labeled"))),
            }
        }
        targets.sort_unstable();
        Ok(Self { rows: labels.labels.len(), classes: labels.num_classes(), targets })
    }

    pub fn labeled_idx(&self) -> Vec<usize> {
        self.targets.iter().map(|t| t.0).collect()
    }

    /// Dense `Y`.
    pub fn to_dense(&self) -> Tensor {
        let mut y = vec![0.0; self.rows * self.classes];
        for &(r, k) in &self.targets {
            y[r * self.classes + k] = 1.0;
        }
        Tensor::matrix(self.rows, self.classes, y).expect("dims")
    }
}

/// Records the summed cross-entropy of `probabilities` against `y`.
pub fn record_loss(tape: &mut Tape, probabilities: Var, y: &LabelMatrix) -> Result<Var> {
    tape.cross_entropy(probabilities, y.targets.clone())
}

/// `-Σ_g Σ_f Y_gf ln O_gf` over labeled rows, with the log argument clamped.
pub fn loss(o: &Tensor, y: &LabelMatrix) -> Result<f64> {
    if y.targets.is_empty() {
        return Err(contract("no labeled pixels"));
    }
    let (n, c) = o.dims2("loss")?;
    if n != y.rows || c != y.classes {
        return Err(shape_err("loss", format!("outputs [{n}x{c}], labels [{}x{}]", y.rows, y.classes)));
    }
    Ok(y.targets.iter().map(|&(r, k)| -o.get(r, k).max(LOG_CLAMP).ln()).sum())
}

/// Row-wise softmax of a dense matrix.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (n, c) = x.dims2("softmax_rows")?;
    let mut out = x.data().to_vec();
    if c > 0 {
        out.chunks_mut(c).for_each(softmax_in_place);
    }
    Tensor::matrix(n, c, out)
}

/// Class id (1-based) of the largest entry per row; ties go to the lowest id.
pub fn argmax_classes(o: &Tensor) -> Vec<u16> {
    let c = o.cols();
    o.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            (best + 1) as u16
        })
        .collect()
}
