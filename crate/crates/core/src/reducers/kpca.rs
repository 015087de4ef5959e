use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{gaussian, median_bandwidth, Kernel};
use crate::error::{Error, Result};
use crate::{io, linalg, DataMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpcaModel {
    /// Kernel with the bandwidth resolved.
    pub kernel: Kernel,
    #[serde(with = "io::b64")]
    pub train: DataMatrix,
    /// Column means of the uncentered training kernel.
    pub kernel_col_means: Vec<f64>,
    pub kernel_mean: f64,
    /// Eigenvalues of the centered kernel, nonincreasing (all of them).
    pub eigenvalues: Vec<f64>,
    /// N x d, column k is `v_k / sqrt(mu_k)`.
    #[serde(with = "io::b64")]
    pub alphas: DMatrix<f64>,
}

fn kernel_matrix(kernel: Kernel, a: &DataMatrix, b: &DataMatrix) -> DMatrix<f64> {
    match kernel {
        Kernel::Linear => a * b.transpose(),
        Kernel::Polynomial { c, p } => (a * b.transpose()).map(|v| (v + c).powi(p as i32)),
        Kernel::Gaussian { bandwidth } => {
            let h = bandwidth.expect("bandwidth resolved at fit time");
            linalg::cross_sq_dists(a, b).map(|s| gaussian(s, h))
        }
    }
}

pub fn fit(x: &DataMatrix, d: usize, kernel: Kernel) -> Result<(KpcaModel, DataMatrix)> {
    let n = x.nrows();
    if d > n - 1 {
        return Err(Error::invalid(format!("kernel PCA with {n} samples supports d <= {}", n - 1)));
    }
    let kernel = match kernel {
        Kernel::Gaussian { bandwidth: None } => {
            Kernel::Gaussian { bandwidth: Some(median_bandwidth(&linalg::pairwise_sq_dists(x))?) }
        }
        k => k,
    };
    let mut k = kernel_matrix(kernel, x, x);
    k = (&k + k.transpose()) * 0.5;
    let col_means: Vec<f64> = k.column_iter().map(|c| c.mean()).collect();
    let grand = col_means.iter().sum::<f64>() / n as f64;
    let kc = DMatrix::from_fn(n, n, |i, j| k[(i, j)] - col_means[i] - col_means[j] + grand);
    let (vals, vecs) = linalg::sym_eig_desc(&kc)?;
    let scale = vals[0].abs().max(k.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max));
    if let Some(&neg) = vals.iter().find(|&&v| v < -1e-8 * scale) {
        return Err(Error::invalid(format!("kernel matrix is not positive semi-definite (eigenvalue {neg:e})")));
    }
    let cutoff = 1e-12 * scale.max(f64::MIN_POSITIVE) * n as f64;
    let mut alphas = DMatrix::zeros(n, d);
    let mut degenerate = 0;
    for c in 0..d {
        if vals[c] > cutoff {
            alphas.set_column(c, &(vecs.column(c) / vals[c].sqrt()));
        } else {
            degenerate += 1;
        }
    }
    if degenerate > 0 {
        log::warn!("kernel PCA: {degenerate} of {d} components have zero eigenvalue");
    }
    let z = &kc * &alphas;
    Ok((
        KpcaModel {
            kernel,
            train: x.clone(),
            kernel_col_means: col_means,
            kernel_mean: grand,
            eigenvalues: vals,
            alphas,
        },
        z,
    ))
}

impl KpcaModel {
    /// Nystrom extension with the centered cross-kernel.
    pub fn transform(&self, x: &DataMatrix) -> Result<DataMatrix> {
        let kx = kernel_matrix(self.kernel, x, &self.train);
        let n = self.train.nrows() as f64;
        let mut kc = kx.clone();
        for i in 0..kx.nrows() {
            let row_mean = kx.row(i).sum() / n;
            for j in 0..kx.ncols() {
                kc[(i, j)] = kx[(i, j)] - self.kernel_col_means[j] - row_mean + self.kernel_mean;
            }
        }
        Ok(kc * &self.alphas)
    }
}
