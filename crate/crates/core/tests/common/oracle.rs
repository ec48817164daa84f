//! Straight-line dense reimplementation of the forward pass.

use cadgcn::autodiff::Tape;
use cadgcn::data::HsiCube;
use cadgcn::model::{forward, ForwardOptions, GraphStructure, ModelParams};
use cadgcn::segmentation::{init_anchors, SegmentationMap};
use cadgcn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let p = b[0].len();
    a.iter()
        .map(|row| (0..p).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// 4-adjacency between regions of a labeling, diagonal included.
pub fn region_mask(region_of: &[usize], h: usize, w: usize, c: usize) -> Vec<Vec<bool>> {
    let mut mask = vec![vec![false; c]; c];
    for i in 0..c {
        mask[i][i] = true;
    }
    for y in 0..h {
        for x in 0..w {
            let a = region_of[y * w + x];
            if x + 1 < w {
                let b = region_of[y * w + x + 1];
                mask[a][b] = true;
                mask[b][a] = true;
            }
            if y + 1 < h {
                let b = region_of[(y + 1) * w + x];
                mask[a][b] = true;
                mask[b][a] = true;
            }
        }
    }
    mask
}

/// Straight-line forward pass: soft assignment, weighted region means, and
/// per layer kernel adjacency, threshold, optional self-loop normalization,
/// softplus convolution; finally pixel-level re-projection and softmax.
pub fn oracle_forward(z: &Mat, mask: &[Vec<bool>], region_of: &[usize], params: &ModelParams, gamma: f64, beta: f64, renorm: bool) -> Mat {
    let n = z.len();
    let c = mask.len();
    let v = to_mat(params.anchors.as_ref().unwrap());
    let mut p = vec![vec![0.0; c]; n];
    for i in 0..n {
        for j in 0..c {
            if mask[region_of[i]][j] {
                let d2: f64 = (0..z[i].len()).map(|b| (z[i][b] - v[b][j]).powi(2)).sum();
                p[i][j] = (-gamma * d2).exp();
            }
        }
    }
    let mut h: Mat = (0..c)
        .map(|j| {
            let mass: f64 = (0..n).map(|i| p[i][j]).sum();
            (0..z[0].len()).map(|b| (0..n).map(|i| p[i][j] * z[i][b]).sum::<f64>() / mass).collect()
        })
        .collect();
    for (w, wd) in params.weights.iter().zip(&params.metrics) {
        let (w, wd) = (to_mat(w), to_mat(wd));
        // M = W_d W_dᵀ materialized on purpose.
        let m = mat_mul(&wd, &transpose(&wd));
        let mut a = vec![vec![0.0; c]; c];
        for i in 0..c {
            for j in 0..c {
                if i != j && mask[i][j] {
                    let diff: Vec<f64> = h[i].iter().zip(&h[j]).map(|(x, y)| x - y).collect();
                    let d2: f64 = (0..diff.len()).map(|r| (0..diff.len()).map(|s| diff[r] * m[r][s] * diff[s]).sum::<f64>()).sum();
                    let k = (-gamma * d2).exp();
                    a[i][j] = if k > beta { k } else { 0.0 };
                }
            }
        }
        if renorm {
            for i in 0..c {
                a[i][i] += 1.0;
            }
            let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
            for i in 0..c {
                for j in 0..c {
                    a[i][j] /= (deg[i] * deg[j]).sqrt();
                }
            }
        }
        h = mat_mul(&mat_mul(&a, &h), &w).into_iter().map(|r| r.into_iter().map(softplus).collect()).collect();
    }
    mat_mul(&p, &h)
        .into_iter()
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Largest elementwise gap between `forward` and [`oracle_forward`] on a
/// 12-pixel, 3-region, 2-layer instance over several thresholds.
pub fn forward_oracle_max_diff() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // 3×4 pixels, three vertical-ish regions.
    let (h, w, d) = (3, 4, 2);
    let region_of = vec![0, 0, 1, 1, 0, 2, 2, 1, 2, 2, 2, 1];
    let seg = SegmentationMap::from_labels(h, w, region_of.clone()).unwrap();
    let zt = Tensor::matrix(h * w, d, (0..h * w * d).map(|k| rng.gen_range(0.0..1.0) + 0.5 * (region_of[k / d] as f64)).collect()).unwrap();
    let cube = HsiCube::new(h, w, d, zt.data().to_vec()).unwrap();
    let mut params = ModelParams::init(Some(init_anchors(&cube, &seg).unwrap()), &[d, 3, 2], &mut rng).unwrap();
    for m in &mut params.metrics {
        *m = Tensor::matrix(m.rows(), m.cols(), (0..m.numel()).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    }
    let structure = GraphStructure::from_segmentation(&seg);
    let mask = region_mask(&region_of, h, w, 3);
    let z = to_mat(&zt);
    let mut worst: f64 = 0.0;
    // A threshold between the weakest and strongest first-layer edges.
    let mut probe = Tape::new();
    let trace = forward(&mut probe, &zt, &structure, &params, &ForwardOptions { beta: 0.0, ..ForwardOptions::default() }).unwrap();
    let mut first = probe.value(trace.adjacency[0]).data().to_vec();
    first.sort_by(f64::total_cmp);
    let split = 0.5 * (first[0] + first[first.len() - 1]);
    for (beta, renorm) in [(0.0, true), (0.01, true), (split, true), (split, false), (2.0, true)] {
        let opts = ForwardOptions { gamma: 0.2, beta, renormalize: renorm, train_metrics: true };
        let mut tape = Tape::new();
        let trace = forward(&mut tape, &zt, &structure, &params, &opts).unwrap();
        if beta == split {
            let kept = tape.value(trace.filtered[0]).data().iter().filter(|&&a| a > 0.0).count();
            assert!(kept > 0 && kept < tape.value(trace.filtered[0]).numel(), "threshold should split the edges");
        }
        let got = tape.value(trace.probabilities);
        let want = oracle_forward(&z, &mask, &region_of, &params, 0.2, beta, renorm);
        for i in 0..h * w {
            for k in 0..2 {
                let diff = (got.get(i, k) - want[i][k]).abs();
                worst = worst.max(diff);
            }
        }
    }
    worst
}
