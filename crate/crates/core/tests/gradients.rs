//! Analytic gradients against central finite differences.

mod common;

use std::sync::Arc;
use std::time::Instant;

use cadgcn::autodiff::Tape;
use cadgcn::data::LabelRaster;
use cadgcn::model::{forward, record_loss, ForwardOptions, GraphStructure, LabelMatrix, ModelParams};
use cadgcn::SparsePattern;
use common::fd::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn elementwise_and_dense_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, 3, 4, -1.0, 1.0);
    let b = random(&mut rng, 4, 2, -1.0, 1.0);
    let c = random(&mut rng, 3, 4, -1.0, 1.0);
    assert!(check(&[a.clone(), b.clone()], &|t, v| {
        let m = t.matmul(v[0], v[1])?;
        reduce(t, m, 1)
    }) <= TOL);
    assert!(check(&[a.clone(), c.clone()], &|t, v| {
        let s = t.add(v[0], v[1])?;
        let p = t.mul(s, v[1])?;
        let k = t.scale(p, -2.5);
        reduce(t, k, 2)
    }) <= TOL);
    assert!(check(&[a.clone()], &|t, v| {
        let s = t.softplus(v[0]);
        reduce(t, s, 3)
    }) <= TOL);
    assert!(check(&[a.clone()], &|t, v| {
        let s = t.softmax_rows(v[0])?;
        reduce(t, s, 4)
    }) <= TOL);
    assert!(check(&[a], &|t, v| {
        let s = t.softmax_rows(v[0])?;
        t.cross_entropy(s, vec![(0, 1), (2, 3), (2, 0)])
    }) <= TOL);
}

#[test]
fn sparse_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let edges = ring(5);
    let y = random(&mut rng, 5, 3, -1.0, 1.0);
    let b = random(&mut rng, 5, 2, -1.0, 1.0);
    let e = edges.clone();
    assert!(check(&[y.clone()], &move |t, v| {
        let d = t.edge_sq_dist(v[0], e.clone())?;
        reduce(t, d, 5)
    }) <= TOL);
    let e = edges.clone();
    assert!(check(&[y.clone()], &move |t, v| {
        let d = t.edge_sq_dist(v[0], e.clone())?;
        let k = t.exp_kernel(d, 0.2);
        let f = t.threshold(k, 0.3);
        reduce(t, f, 6)
    }) <= TOL);
    let e = edges.clone();
    assert!(check(&[y.clone(), b], &move |t, v| {
        let d = t.edge_sq_dist(v[0], e.clone())?;
        let k = t.exp_kernel(d, 0.2);
        let r = t.renormalize(k)?;
        let s = t.spmm(r, v[1])?;
        reduce(t, s, 7)
    }) <= TOL);

    let pattern = Arc::new(SparsePattern::from_rows(3, &[vec![0, 1], vec![1], vec![0, 2], vec![1, 2]]).unwrap());
    let z = random(&mut rng, 4, 2, 0.0, 1.0);
    let anchors = random(&mut rng, 2, 3, 0.0, 1.0);
    assert!(check(&[z, anchors], &move |t, v| {
        let p = t.gaussian_assign(v[0], v[1], pattern.clone(), 0.7)?;
        let x = t.weighted_column_mean(p, v[0])?;
        let back = t.spmm(p, x)?;
        reduce(t, back, 8)
    }) <= TOL);
}

#[test]
fn pixel_graph_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let structure = GraphStructure::pixel_grid(3, 3);
    let z = random(&mut rng, 9, 2, 0.0, 1.0);
    let params = ModelParams::init(None, &[2, 3, 2], &mut rng).unwrap();
    let raster = LabelRaster::new(3, 3, vec![1, 0, 2, 0, 0, 0, 2, 0, 1]).unwrap();
    let y = LabelMatrix::from_raster(&raster, &raster.labeled()).unwrap();
    let opts = ForwardOptions { beta: 0.0, ..ForwardOptions::default() };
    let mut tape = Tape::new();
    let trace = forward(&mut tape, &z, &structure, &params, &opts).unwrap();
    let loss = record_loss(&mut tape, trace.probabilities, &y).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (ti, (&var, tensor)) in trace.parameter_vars().iter().zip(params.tensors()).enumerate() {
        let analytic = grads.wrt(&tape, var);
        for e in 0..tensor.numel() {
            let up = pipeline_loss(&z, &structure, &with_entry(&params, ti, e, STEP), &y, &opts);
            let down = pipeline_loss(&z, &structure, &with_entry(&params, ti, e, -STEP), &y, &opts);
            let err = rel_err(analytic.data()[e], (up - down) / (2.0 * STEP));
            assert!(err <= TOL, "tensor {ti} entry {e}: {err:e}");
        }
    }
}

#[test]
fn full_pipeline_gradients() {
    let start = Instant::now();
    for seed in [3, 4] {
        let worst = full_pipeline_worst_error(seed).unwrap();
        assert!(worst <= TOL, "seed {seed}: max relative error {worst:e}");
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}
