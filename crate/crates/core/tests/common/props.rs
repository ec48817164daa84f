//! Randomized invariants, each runnable for a chosen number of cases.

use std::sync::Arc;

use cadgcn::autodiff::Tape;
use cadgcn::data::{HsiCube, LabelRaster};
use cadgcn::graph::{build_adjacency, edge_filter, mahalanobis_sq, renormalize};
use cadgcn::metrics::Metrics;
use cadgcn::model::{forward, record_loss, softmax_rows, ForwardOptions, GraphStructure, LabelMatrix, ModelParams};
use cadgcn::optim::{adam_step, AdamState};
use cadgcn::projection::{project, reproject, SoftAssignment};
use cadgcn::segmentation::{init_anchors, SegmentationMap};
use cadgcn::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(), TestCaseError>;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random labeling of a small grid, renumbered so ids have no gaps.
pub fn segmentation() -> impl Strategy<Value = SegmentationMap> {
    (2usize..6, 2usize..6, 1usize..6).prop_flat_map(|(h, w, k)| {
        proptest::collection::vec(0..k, h * w).prop_map(move |raw| {
            let mut ids = std::collections::BTreeMap::new();
            let labels: Vec<usize> = raw
                .iter()
                .map(|r| {
                    let next = ids.len();
                    *ids.entry(*r).or_insert(next)
                })
                .collect();
            SegmentationMap::from_labels(h, w, labels).unwrap()
        })
    })
}

fn dense(t: &Tensor) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn adjacency_symmetric_and_masked((seg, f, r, gamma, seed): (SegmentationMap, usize, usize, f64, u64)) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = seg.region_count();
    let h = random(&mut rng, c, f, -1.0, 1.0);
    let wd = random(&mut rng, f, r, -1.0, 1.0);
    let mask = seg.region_adjacency();
    for (i, row) in mask.iter().enumerate() {
        for (j, &m) in row.iter().enumerate() {
            prop_assert_eq!(m, mask[j][i]);
        }
        prop_assert!(row[i]);
    }
    let a = build_adjacency(&h, &wd, Arc::new(seg.edge_pattern()), gamma).unwrap().to_dense();
    for i in 0..c {
        prop_assert_eq!(a.get(i, i), 0.0);
        for j in 0..c {
            prop_assert_eq!(a.get(i, j), a.get(j, i));
            if !mask[i][j] {
                prop_assert_eq!(a.get(i, j), 0.0);
            } else if i != j {
                prop_assert!(a.get(i, j) > 0.0 && a.get(i, j) <= 1.0);
            }
        }
    }
    Ok(())
}

pub fn projected_distance_matches_explicit_metric((c, f, r, seed): (usize, usize, usize, u64)) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = random(&mut rng, c, f, -2.0, 2.0);
    let wd = random(&mut rng, f, r, -2.0, 2.0);
    let d2 = mahalanobis_sq(&h, &wd).unwrap();
    let m = dense(&wd) * dense(&wd).transpose();
    let hm = dense(&h);
    for i in 0..c {
        prop_assert_eq!(d2.get(i, i), 0.0);
        for j in 0..c {
            let delta = (hm.row(i) - hm.row(j)).transpose();
            let want = (delta.transpose() * &m * &delta)[(0, 0)];
            prop_assert!(d2.get(i, j) >= 0.0);
            prop_assert!((d2.get(i, j) - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }
    Ok(())
}

pub fn edge_filter_idempotent_and_monotone((seg, b1, b2, seed): (SegmentationMap, f64, f64, u64)) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = seg.region_count();
    let a = build_adjacency(&random(&mut rng, c, 2, 0.0, 3.0), &Tensor::eye(2), Arc::new(seg.edge_pattern()), 0.5).unwrap();
    let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
    let once = edge_filter(&a, lo).unwrap();
    prop_assert_eq!(&edge_filter(&once, lo).unwrap().values, &once.values);
    let higher = edge_filter(&a, hi).unwrap();
    prop_assert_eq!(&edge_filter(&once, hi).unwrap().values, &higher.values);
    for (k, (&l, &h)) in once.values.iter().zip(&higher.values).enumerate() {
        if h != 0.0 {
            prop_assert!(l != 0.0);
            prop_assert_eq!(h, a.values[k]);
        }
    }
    prop_assert_eq!(&edge_filter(&a, 0.0).unwrap().values, &a.values);
    Ok(())
}

pub fn renormalized_eigenvalues_in_unit_interval((seg, beta, seed): (SegmentationMap, f64, u64)) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = seg.region_count();
    let pattern = Arc::new(seg.edge_pattern());
    let a = build_adjacency(&random(&mut rng, c, 3, 0.0, 2.0), &random(&mut rng, 3, 3, -1.0, 1.0), pattern, 0.2).unwrap();
    let m = dense(&renormalize(&edge_filter(&a, beta).unwrap()).unwrap());
    prop_assert!((&m - m.transpose()).amax() <= 1e-15);
    for ev in nalgebra::SymmetricEigen::new(m).eigenvalues.iter() {
        prop_assert!(*ev >= -1.0 - 1e-12 && *ev <= 1.0 + 1e-12, "eigenvalue {}", ev);
    }
    Ok(())
}

pub fn softmax_rows_sum_to_one((rows, cols, scale, seed): (usize, usize, f64, u64)) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = softmax_rows(&random(&mut rng, rows, cols, -scale, scale)).unwrap();
    for r in 0..rows {
        prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(s.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    Ok(())
}

pub fn assignment_pattern_frozen_across_steps((seg, seed): (SegmentationMap, u64)) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (seg.height, seg.width);
    let z = random(&mut rng, h * w, 2, 0.0, 1.0);
    let cube = HsiCube::new(h, w, 2, z.data().to_vec()).unwrap();
    let mut params = ModelParams::init(Some(init_anchors(&cube, &seg).unwrap()), &[2, 3, 2], &mut rng).unwrap();
    let structure = GraphStructure::from_segmentation(&seg);
    let expected = seg.assignment_pattern();
    // Grids are at least 2×2, so classes 1 and 2 both occur.
    let raster = LabelRaster::new(h, w, (0..h * w).map(|i| (i % 3) as u16).collect()).unwrap();
    let y = LabelMatrix::from_raster(&raster, &raster.labeled()).unwrap();
    let mut state = AdamState::new(params.anchors.as_ref().unwrap().shape());
    for _ in 0..3 {
        let mut tape = Tape::new();
        let trace = forward(&mut tape, &z, &structure, &params, &ForwardOptions::default()).unwrap();
        let p = trace.assignment.unwrap();
        prop_assert_eq!(&**tape.pattern(p).unwrap(), &expected);
        prop_assert!(tape.value(p).data().iter().all(|&v| v > 0.0));
        let loss = record_loss(&mut tape, trace.probabilities, &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(&tape, trace.anchors.unwrap());
        let v = params.anchors.take().unwrap();
        params.anchors = Some(adam_step(&v, &g, &mut state, 0.1).unwrap());
    }
    Ok(())
}

pub fn project_column_scale_invariant((seg, col_scale, seed): (SegmentationMap, Vec<f64>, u64)) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = Arc::new(seg.assignment_pattern());
    let weights: Vec<f64> = (0..pattern.nnz()).map(|_| rng.gen_range(0.05..1.0)).collect();
    let z = random(&mut rng, pattern.rows(), 3, -1.0, 1.0);
    let p = SoftAssignment::new(pattern.clone(), weights.clone()).unwrap();
    let scaled_weights: Vec<f64> = pattern.entries().map(|(_, j, k)| weights[k] * col_scale[j % col_scale.len()]).collect();
    let scaled = SoftAssignment::new(pattern, scaled_weights).unwrap();
    prop_assert!(project(&p, &z).unwrap().max_abs_diff(&project(&scaled, &z).unwrap()) <= 1e-12);
    Ok(())
}

pub fn reproject_linear((seg, a, b, seed): (SegmentationMap, f64, f64, u64)) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = Arc::new(seg.assignment_pattern());
    let weights: Vec<f64> = (0..pattern.nnz()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let p = SoftAssignment::new(pattern, weights).unwrap();
    let c = seg.region_count();
    let (h1, h2) = (random(&mut rng, c, 4, -1.0, 1.0), random(&mut rng, c, 4, -1.0, 1.0));
    let combine = |x: &Tensor, y: &Tensor| {
        Tensor::new(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect()).unwrap()
    };
    let want = combine(&reproject(&p, &h1).unwrap(), &reproject(&p, &h2).unwrap());
    prop_assert!(reproject(&p, &combine(&h1, &h2)).unwrap().max_abs_diff(&want) <= 1e-12);
    Ok(())
}

pub fn kappa_bounds((c, cells, diagonal): (usize, Vec<u64>, bool)) -> Outcome {
    let mut confusion: Vec<Vec<u64>> = (0..c).map(|i| cells[i * 6..i * 6 + c].to_vec()).collect();
    if diagonal {
        for (i, row) in confusion.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if i != j {
                    *v = 0;
                }
            }
        }
    }
    prop_assume!(confusion.iter().flatten().sum::<u64>() > 0);
    let m = Metrics::from_confusion(confusion.clone()).unwrap();
    prop_assert!(m.kappa >= -1.0 - 1e-12 && m.kappa <= 1.0 + 1e-12);
    let is_diagonal = (0..c).all(|i| (0..c).all(|j| i == j || confusion[i][j] == 0));
    prop_assert_eq!((m.kappa - 1.0).abs() < 1e-12, is_diagonal);
    Ok(())
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Outcome) -> Result<(), String> {
    let config = Config { failure_persistence: None, ..Config::with_cases(cases) };
    TestRunner::new(config).run(&strategy, test).map_err(|e| e.to_string())
}

/// A named invariant, runnable with a chosen case count.
pub struct Suite {
    pub name: &'static str,
    pub run: fn(u32) -> Result<(), String>,
}

pub fn suites() -> Vec<Suite> {
    vec![
        Suite {
            name: "adjacency symmetric and masked",
            run: |n| run(n, (segmentation(), 1usize..4, 1usize..4, 0.01f64..2.0, any::<u64>()), adjacency_symmetric_and_masked),
        },
        Suite {
            name: "projected distance equals explicit metric",
            run: |n| run(n, (1usize..6, 1usize..5, 1usize..5, any::<u64>()), projected_distance_matches_explicit_metric),
        },
        Suite {
            name: "edge filter idempotent and monotone",
            run: |n| run(n, (segmentation(), 0.0f64..1.0, 0.0f64..1.0, any::<u64>()), edge_filter_idempotent_and_monotone),
        },
        Suite {
            name: "renormalized eigenvalues in [-1, 1]",
            run: |n| run(n, (segmentation(), 0.0f64..0.9, any::<u64>()), renormalized_eigenvalues_in_unit_interval),
        },
        Suite {
            name: "softmax rows sum to 1",
            run: |n| run(n, (1usize..8, 1usize..8, 0.1f64..50.0, any::<u64>()), softmax_rows_sum_to_one),
        },
        Suite {
            name: "assignment pattern frozen across steps",
            run: |n| run(n, (segmentation(), any::<u64>()), assignment_pattern_frozen_across_steps),
        },
        Suite {
            name: "project invariant to positive column scaling",
            run: |n| {
                run(n, (segmentation(), proptest::collection::vec(0.01f64..100.0, 6), any::<u64>()), project_column_scale_invariant)
            },
        },
        Suite {
            name: "reproject linear",
            run: |n| run(n, (segmentation(), -3.0f64..3.0, -3.0f64..3.0, any::<u64>()), reproject_linear),
        },
        Suite {
            name: "kappa in [-1, 1], 1 iff diagonal",
            run: |n| run(n, (1usize..6, proptest::collection::vec(0u64..20, 36), any::<bool>()), kappa_bounds),
        },
    ]
}
