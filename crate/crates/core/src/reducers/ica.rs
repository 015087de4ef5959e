use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::pca;
use crate::error::{Error, Result};
use crate::{io, linalg, DataMatrix};

pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaModel {
    pub mean: Vec<f64>,
    /// d x D, maps centered data to whitened coordinates.
    #[serde(with = "io::b64")]
    pub whitening: DMatrix<f64>,
    /// d x d, orthonormal rows in whitened space.
    #[serde(with = "io::b64")]
    pub unmixing: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Excess kurtosis of each recovered source on the training data.
    pub kurtosis: Vec<f64>,
    /// False when no source departs from Gaussianity beyond sampling noise.
    pub identifiable: bool,
}

/// `E[s^4] - 3 (E[s^2])^2`.
pub fn kurtosis(s: &[f64]) -> f64 {
    let n = s.len() as f64;
    let m2 = s.iter().map(|v| v * v).sum::<f64>() / n;
    let m4 = s.iter().map(|v| v.powi(4)).sum::<f64>() / n;
    m4 - 3.0 * m2 * m2
}

/// Symmetric decorrelation `(W W')^{-1/2} W`.
fn decorrelate(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = w * w.transpose();
    Ok(linalg::inv_sqrt_spd(&((&g + g.transpose()) * 0.5))? * w)
}

/// PCA whitening followed by symmetric FastICA on the kurtosis contrast.
pub fn fit(x: &DataMatrix, d: usize, seed: u64, max_iter: usize) -> Result<IcaModel> {
    let p = pca::fit(x, d)?;
    if p.components.ncols() < d {
        return Err(Error::invalid(format!("ICA needs d <= rank of the centered data ({})", p.components.ncols())));
    }
    let scale = DVector::from_iterator(d, p.variances.iter().take(d).map(|v| 1.0 / v.sqrt()));
    let whitening = DMatrix::from_diagonal(&scale) * p.components.transpose();
    let mean = DVector::from_column_slice(&p.mean);
    let z = linalg::center_rows(x, &mean) * whitening.transpose();
    let n = z.nrows() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = decorrelate(&DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng)))?;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        // row i: E[z (w_i'z)^3] - 3 w_i
        let proj = &z * w.transpose();
        let cubed = proj.map(|v| v * v * v);
        let next = decorrelate(&((cubed.transpose() * &z) / n - &w * 3.0))?;
        let change = (0..d)
            .map(|i| 1.0 - next.row(i).dot(&w.row(i)).abs())
            .fold(0.0f64, |a, b| a.max(b.abs()));
        w = next;
        if change < TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("FastICA did not converge in {max_iter} iterations");
    }
    for mut row in w.row_iter_mut() {
        let top = row.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if top < 0.0 {
            row.neg_mut();
        }
    }
    let sources = &z * w.transpose();
    let kurt: Vec<f64> = sources.column_iter().map(|c| kurtosis(c.as_slice())).collect();
    let noise = (24.0 / n).sqrt();
    let identifiable = kurt.iter().any(|k| k.abs() > 5.0 * noise);
    if !identifiable {
        log::warn!("ICA sources are indistinguishable from Gaussian; the unmixing is not identifiable");
    }
    Ok(IcaModel {
        mean: p.mean,
        whitening,
        unmixing: w,
        iterations,
        converged,
        kurtosis: kurt,
        identifiable,
    })
}

impl IcaModel {
    pub fn whiten(&self, x: &DataMatrix) -> DataMatrix {
        linalg::center_rows(x, &DVector::from_column_slice(&self.mean)) * self.whitening.transpose()
    }

    pub fn transform(&self, x: &DataMatrix) -> Result<DataMatrix> {
        Ok(self.whiten(x) * self.unmixing.transpose())
    }
}
