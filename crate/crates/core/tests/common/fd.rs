//! Central finite-difference checks and a small projected test instance.

use std::sync::Arc;

use cadgcn::autodiff::{Tape, Var};
use cadgcn::data::{HsiCube, LabelRaster};
use cadgcn::model::{forward, record_loss, ForwardOptions, GraphStructure, LabelMatrix, ModelParams};
use cadgcn::segmentation::{init_anchors, Neighborhoods, SegmentationMap};
use cadgcn::{Result, SparsePattern, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Records `inputs` as parameters, builds a scalar with `build`, and compares
/// every input gradient entry with a central difference. Returns the worst
/// relative error.
pub fn check(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(&tape, var);
        for e in 0..input.numel() {
            let mut shifted = inputs.to_vec();
            let mut bump = |delta: f64| {
                let mut data = input.data().to_vec();
                data[e] += delta;
                shifted[i] = Tensor::new(input.shape().to_vec(), data).unwrap();
                eval(&shifted)
            };
            let numeric = (bump(STEP) - bump(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    worst
}

/// Weighted sum `Σ r ⊙ x` with fixed random weights, so every entry of `x`
/// matters to the scalar.
pub fn reduce(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let value = tape.value(x).clone();
    let weights: Vec<f64> = (0..value.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = match tape.pattern(x).cloned() {
        Some(p) => tape.sparse_constant(p, weights)?,
        None => tape.constant(Tensor::new(value.shape().to_vec(), weights)?),
    };
    let prod = tape.mul(x, r)?;
    Ok(tape.sum(prod))
}

pub fn ring(n: usize) -> Arc<SparsePattern> {
    let rows: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut r = vec![(i + 1) % n, (i + n - 1) % n];
            r.sort_unstable();
            r.dedup();
            r
        })
        .collect();
    Arc::new(SparsePattern::from_rows(n, &rows).unwrap())
}

/// 4×5 image cut into four regions, three bands, two classes.
pub fn toy_instance(seed: u64) -> (Tensor, GraphStructure, ModelParams, LabelMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, d) = (4, 5, 3);
    let region_of: Vec<usize> = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            usize::from(y >= 2) * 2 + usize::from(x >= 3)
        })
        .collect();
    let seg = SegmentationMap::from_labels(h, w, region_of).unwrap();
    // Distinct region spectra plus noise, so region distances matter.
    let noise = random(&mut rng, h * w, d, 0.0, 0.3);
    let z = Tensor::matrix(
        h * w,
        d,
        (0..h * w * d).map(|k| noise.data()[k] + 0.4 * ((seg.region_of()[k / d] + k % d) % 4) as f64).collect(),
    )
    .unwrap();
    let cube = HsiCube::new(h, w, d, z.data().to_vec()).unwrap();
    let anchors = init_anchors(&cube, &seg).unwrap();
    let mut params = ModelParams::init(Some(anchors), &[d, 4, 2], &mut rng).unwrap();
    // Random metric factors, well away from the identity.
    for m in &mut params.metrics {
        *m = random(&mut rng, m.rows(), m.cols(), -1.0, 1.0);
    }
    let mut labels = vec![0u16; h * w];
    for (i, l) in [(0, 1), (3, 2), (7, 1), (12, 2), (16, 1), (19, 2)] {
        labels[i] = l;
    }
    let raster = LabelRaster::new(h, w, labels).unwrap();
    let y = LabelMatrix::from_raster(&raster, &raster.labeled()).unwrap();
    (z, GraphStructure::Projected(Neighborhoods::from_segmentation(&seg)), params, y)
}

pub fn pipeline_loss(z: &Tensor, s: &GraphStructure, p: &ModelParams, y: &LabelMatrix, o: &ForwardOptions) -> f64 {
    let mut tape = Tape::new();
    let trace = forward(&mut tape, z, s, p, o).unwrap();
    let l = record_loss(&mut tape, trace.probabilities, y).unwrap();
    tape.value(l).item()
}

pub fn with_entry(params: &ModelParams, tensor: usize, entry: usize, delta: f64) -> ModelParams {
    let mut out = params.clone();
    let mut slots: Vec<&mut Tensor> = out.anchors.iter_mut().collect();
    for (w, m) in out.weights.iter_mut().zip(out.metrics.iter_mut()) {
        slots.push(w);
        slots.push(m);
    }
    let t = &mut slots[tensor];
    let mut data = t.data().to_vec();
    data[entry] += delta;
    **t = Tensor::new(t.shape().to_vec(), data).unwrap();
    out
}

/// Worst relative error between analytic and central-difference gradients
/// of the summed cross-entropy with respect to every parameter of a 20-pixel,
/// 4-region, 2-layer instance, with and without re-normalization.
pub fn full_pipeline_worst_error(seed: u64) -> std::result::Result<f64, String> {
    let (z, structure, params, y) = toy_instance(seed);
    // Threshold just above the weakest first-layer edge: drops that edge,
    // keeps the rest, and sits away from every kernel value so the filter
    // is locally smooth.
    let kernel_values = |beta: f64| -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let opts = ForwardOptions { beta, ..ForwardOptions::default() };
        let trace = forward(&mut tape, &z, &structure, &params, &opts).unwrap();
        trace.adjacency.iter().map(|&a| tape.value(a).data().to_vec()).collect()
    };
    let mut first = kernel_values(0.0)[0].clone();
    first.sort_by(f64::total_cmp);
    first.dedup();
    let beta = 0.5 * (first[0] + first[1]);
    for layer in kernel_values(beta) {
        if layer.iter().any(|k| (k - beta).abs() <= 1e-4) {
            return Err("threshold too close to a kernel value".into());
        }
        if !layer.iter().any(|&k| k > beta) {
            return Err("a layer lost every edge".into());
        }
    }
    let mut worst: f64 = 0.0;
    for renormalize in [true, false] {
        let opts = ForwardOptions { beta, renormalize, ..ForwardOptions::default() };
        let mut tape = Tape::new();
        let trace = forward(&mut tape, &z, &structure, &params, &opts).unwrap();
        let loss = record_loss(&mut tape, trace.probabilities, &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (ti, (&var, tensor)) in trace.parameter_vars().iter().zip(params.tensors()).enumerate() {
            let analytic = grads.wrt(&tape, var);
            if !analytic.data().iter().any(|g| g.abs() > 1e-8) {
                return Err(format!("tensor {ti} got no gradient"));
            }
            for e in 0..tensor.numel() {
                let up = pipeline_loss(&z, &structure, &with_entry(&params, ti, e, STEP), &y, &opts);
                let down = pipeline_loss(&z, &structure, &with_entry(&params, ti, e, -STEP), &y, &opts);
                worst = worst.max(rel_err(analytic.data()[e], (up - down) / (2.0 * STEP)));
            }
        }
    }
    Ok(worst)
}
