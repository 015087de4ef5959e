use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{gaussian, median_bandwidth};
use crate::error::{Error, Result};
use crate::{io, linalg, DataMatrix};

const MIN_DEGREE: f64 = 1e-200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmapsModel {
    pub bandwidth: f64,
    pub t: u32,
    #[serde(with = "io::b64")]
    pub train: DataMatrix,
    /// Kernel degrees of the training points.
    pub degrees: Vec<f64>,
    /// Stationary probabilities of the random walk.
    pub stationary: Vec<f64>,
    /// Nontrivial eigenvalues of the transition matrix used by the embedding.
    pub eigenvalues: Vec<f64>,
    /// N x d right eigenvectors of the transition matrix.
    #[serde(with = "io::b64")]
    pub eigenvectors: DMatrix<f64>,
    /// N x d, `lambda^t psi`.
    #[serde(with = "io::b64")]
    pub embedding: DMatrix<f64>,
}

/// Normalised kernel `kappa_ij = k_ij / sqrt(D_i D_j)` with the kernel degrees
/// and the row sums of kappa.
fn normalized_kernel(x: &DataMatrix, h: f64) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    let n = x.nrows();
    let k = linalg::pairwise_sq_dists(x).map(|s| gaussian(s, h));
    let deg: Vec<f64> = k.row_iter().map(|r| r.sum()).collect();
    // k_ii = 1, so a point is isolated when nothing else carries weight
    if let Some(i) = deg.iter().position(|&d| !(d - 1.0 > 1e-12)) {
        return Err(Error::invalid(format!("diffusion kernel isolates sample {i}; increase the bandwidth")));
    }
    let kappa = DMatrix::from_fn(n, n, |i, j| k[(i, j)] / (deg[i] * deg[j]).sqrt());
    let row: Vec<f64> = kappa.row_iter().map(|r| r.sum()).collect();
    Ok((kappa, deg, row))
}

/// Row-stochastic transition matrix.
pub fn transition_matrix(x: &DataMatrix, h: f64) -> Result<DMatrix<f64>> {
    let (kappa, _, row) = normalized_kernel(x, h)?;
    Ok(DMatrix::from_fn(kappa.nrows(), kappa.ncols(), |i, j| kappa[(i, j)] / row[i]))
}

pub fn fit(x: &DataMatrix, d: usize, bandwidth: Option<f64>, t: u32) -> Result<(DmapsModel, DataMatrix)> {
    let n = x.nrows();
    if d > n - 1 {
        return Err(Error::invalid(format!("diffusion maps with {n} samples supports d <= {}", n - 1)));
    }
    let h = match bandwidth {
        Some(h) => h,
        None => median_bandwidth(&linalg::pairwise_sq_dists(x))?,
    };
    let (kappa, deg, row) = normalized_kernel(x, h)?;
    // P = diag(row)^-1 kappa is similar to the symmetric S = diag(row)^-1/2 kappa diag(row)^-1/2
    let s = DMatrix::from_fn(n, n, |i, j| kappa[(i, j)] / (row[i] * row[j]).sqrt());
    let s = (&s + s.transpose()) * 0.5;
    let (vals, vecs) = linalg::sym_eig_desc(&s)?;
    let total: f64 = row.iter().sum();
    let stationary: Vec<f64> = row.iter().map(|r| r / total).collect();
    // psi = u / sqrt(pi), so that sum_i pi_i psi_i^2 = 1
    let mut psi = DMatrix::from_fn(n, d, |i, c| vecs[(i, c + 1)] / stationary[i].sqrt());
    linalg::fix_signs(&mut psi);
    let eigenvalues: Vec<f64> = vals[1..=d].to_vec();
    if let Some(c) = eigenvalues.iter().position(|l| l.abs() < 1e-14) {
        return Err(Error::numerical(format!("diffusion eigenvalue {} vanishes; lower d or the bandwidth", c + 2)));
    }
    let mut y = psi.clone();
    for (mut col, lam) in y.column_iter_mut().zip(&eigenvalues) {
        col *= lam.powi(t as i32);
    }
    Ok((
        DmapsModel {
            bandwidth: h,
            t,
            train: x.clone(),
            degrees: deg,
            stationary,
            eigenvalues,
            eigenvectors: psi,
            embedding: y.clone(),
        },
        y,
    ))
}

impl DmapsModel {
    /// Nystrom extension `psi_k(x) = (1/lambda_k) sum_j p(x, j) psi_k(j)`.
    pub fn transform(&self, x: &DataMatrix) -> Result<DataMatrix> {
        let k = linalg::cross_sq_dists(x, &self.train).map(|s| gaussian(s, self.bandwidth));
        let d = self.eigenvalues.len();
        let mut out = DMatrix::zeros(x.nrows(), d);
        for i in 0..x.nrows() {
            let deg_x: f64 = k.row(i).sum();
            if !(deg_x > MIN_DEGREE) {
                return Err(Error::invalid(format!("sample {i} is isolated from the training set")));
            }
            let kappa: Vec<f64> = (0..self.train.nrows()).map(|j| k[(i, j)] / (deg_x * self.degrees[j]).sqrt()).collect();
            let total: f64 = kappa.iter().sum();
            for c in 0..d {
                let acc: f64 = kappa.iter().enumerate().map(|(j, w)| w * self.eigenvectors[(j, c)]).sum();
                let lam = self.eigenvalues[c];
                out[(i, c)] = acc / total / lam * lam.powi(self.t as i32);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(seed: u64) -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DataMatrix::from_fn(40, 3, |i, _| if i < 20 { 0.0 } else { 6.0 } + rng.random_range(-0.5..0.5))
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let x = blobs(1);
        let p = transition_matrix(&x, 1.0).unwrap();
        for r in p.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let eig = p.clone().complex_eigenvalues();
        assert!(eig.iter().all(|l| l.norm() <= 1.0 + 1e-10));
    }

    #[test]
    fn separates_two_clusters() {
        let x = blobs(2);
        let (_, y) = fit(&x, 1, Some(1.5), 1).unwrap();
        let left = y[(0, 0)].signum();
        assert!((0..20).all(|i| y[(i, 0)].signum() == left));
        assert!((20..40).all(|i| y[(i, 0)].signum() == -left));
    }

    #[test]
    fn diffusion_time_only_rescales() {
        let x = blobs(3);
        let (_, y0) = fit(&x, 2, None, 0).unwrap();
        let (m2, y2) = fit(&x, 2, None, 2).unwrap();
        for c in 0..2 {
            let f = m2.eigenvalues[c].powi(2);
            assert!((y0.column(c) * f - y2.column(c)).amax() < 1e-12);
        }
    }

    #[test]
    fn nystrom_reproduces_training() {
        let x = blobs(4);
        let (m, y) = fit(&x, 3, None, 1).unwrap();
        assert!((m.transform(&x).unwrap() - y).amax() < 1e-8);
    }

    #[test]
    fn isolated_points_rejected() {
        let x = DataMatrix::from_row_slice(3, 1, &[0.0, 1.0, 1e6]);
        assert!(fit(&x, 1, Some(1e-3), 1).is_err());
    }
}
