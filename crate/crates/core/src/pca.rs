//! Principal component projection used as the feature space for
//! superpixel segmentation.

use crate::data::HsiCube;
use crate::error::{contract, Result};
use crate::tensor::{matmul_raw, matmul_tn_raw, Tensor};

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns of a row-major `n×n` matrix.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, n2) = a.dims2("symmetric_eigen")?;
    if n != n2 {
        return Err(contract("symmetric_eigen needs a square matrix"));
    }
    let mut m = a.data().to_vec();
    let mut v = Tensor::eye(n).into_vec();
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vecs[row * n + col] = v[row * n + src];
        }
    }
    Ok((values, Tensor::matrix(n, n, vecs)?))
}

/// Top principal components of a cube's pixel matrix.
#[derive(Clone, Debug)]
pub struct Pca {
    /// `[pixels, k]` projections of the centered pixels.
    pub features: Tensor,
    /// `[bands, k]` unit loadings; the largest-magnitude entry of each column
    /// is positive.
    pub components: Tensor,
    pub mean: Vec<f64>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn explained_variance_ratio(&self) -> f64 {
        let k = self.components.cols();
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        if total == 0.0 {
            return 1.0;
        }
        self.eigenvalues[..k].iter().map(|v| v.max(0.0)).sum::<f64>() / total
    }

    /// Maps features back to band space.
    pub fn reconstruct(&self) -> Tensor {
        let (n, k) = (self.features.rows(), self.features.cols());
        let b = self.mean.len();
        let comp_t = self.components.transpose().expect("matrix");
        let mut out = matmul_raw(self.features.data(), comp_t.data(), n, k, b);
        for px in out.chunks_mut(b) {
            px.iter_mut().zip(&self.mean).for_each(|(v, m)| *v += m);
        }
        Tensor::matrix(n, b, out).expect("shape")
    }
}

/// Projects the cube's mean-centered pixels onto the top `k` principal axes.
pub fn pca_reduce(cube: &HsiCube, k: usize) -> Result<Pca> {
    let b = cube.bands;
    if k == 0 || k > b {
        return Err(contract(format!("component count {k} outside 1..={b}")));
    }
    let n = cube.pixel_count();
    let data = cube.values.data();
    let mut mean = vec![0.0; b];
    for px in data.chunks(b) {
        mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = data.to_vec();
    for px in centered.chunks_mut(b) {
        px.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov: Vec<f64> = matmul_tn_raw(&centered, &centered, n, b, b).into_iter().map(|v| v / denom).collect();
    let (eigenvalues, vecs) = symmetric_eigen(&Tensor::matrix(b, b, cov)?)?;
    let mut comps = vec![0.0; b * k];
    for col in 0..k {
        let column: Vec<f64> = (0..b).map(|r| vecs.get(r, col)).collect();
        let pivot = column
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &v)| if v.abs() > best.1.abs() { (i, v) } else { best });
        let sign = if pivot.1 < 0.0 { -1.0 } else { 1.0 };
        for r in 0..b {
            comps[r * k + col] = sign * column[r];
        }
    }
    let features = matmul_raw(&centered, &comps, n, b, k);
    Ok(Pca {
        features: Tensor::matrix(n, k, features)?,
        components: Tensor::matrix(b, k, comps)?,
        mean,
        eigenvalues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes() {
        let a = Tensor::from_rows(&[&[4.0, 1.0, 0.5], &[1.0, 3.0, 0.2], &[0.5, 0.2, 1.0]]);
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let av = a.matmul(&vecs).unwrap();
        for col in 0..3 {
            for row in 0..3 {
                assert!((av.get(row, col) - vals[col] * vecs.get(row, col)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_one_cube_is_fully_explained() {
        let spectrum = [0.2, 0.5, 0.9, 0.1];
        let scales = [1.0, 2.0, -0.5, 3.0, 0.7, 1.3];
        let values: Vec<f64> = scales.iter().flat_map(|s| spectrum.iter().map(move |v| v * s)).collect();
        let cube = HsiCube::new(2, 3, 4, values).unwrap();
        let pca = pca_reduce(&cube, 1).unwrap();
        assert!((pca.explained_variance_ratio() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_basis_reconstructs() {
        let values: Vec<f64> = (0..30).map(|i| ((i * 7919) % 31) as f64 / 31.0).collect();
        let cube = HsiCube::new(2, 5, 3, values).unwrap();
        let pca = pca_reduce(&cube, 3).unwrap();
        assert!(pca.reconstruct().max_abs_diff(&cube.values) < 1e-9);
    }

    #[test]
    fn sign_convention() {
        let values: Vec<f64> = (0..24).map(|i| ((i * 37) % 11) as f64).collect();
        let cube = HsiCube::new(3, 2, 4, values).unwrap();
        let pca = pca_reduce(&cube, 2).unwrap();
        for col in 0..2 {
            let colv: Vec<f64> = (0..4).map(|r| pca.components.get(r, col)).collect();
            let max = colv.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(max > 0.0);
        }
    }

    #[test]
    fn k_out_of_range() {
        let cube = HsiCube::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(pca_reduce(&cube, 0).is_err());
        assert!(pca_reduce(&cube, 3).is_err());
    }
}
