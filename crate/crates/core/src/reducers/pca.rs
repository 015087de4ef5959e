use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{io, linalg, DataMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// D x d, orthonormal columns.
    #[serde(with = "io::b64")]
    pub components: DMatrix<f64>,
    /// Variances along every available principal direction, nonincreasing.
    pub variances: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Principal directions of the centered data with population covariance `(1/N) Xc' Xc`.
///
/// The eigenproblem is solved on whichever of the D x D covariance and the
/// N x N Gram matrix is smaller.
pub fn fit(x: &DataMatrix, d: usize) -> Result<PcaModel> {
    let (n, dim) = x.shape();
    let mean = linalg::column_means(x);
    let xc = linalg::center_rows(x, &mean);
    let nf = n as f64;
    let (variances, mut directions) = if dim <= n {
        let cov = xc.transpose() * &xc / nf;
        let cov = symmetrize(cov);
        linalg::sym_eig_desc(&cov)?
    } else {
        let gram = symmetrize(&xc * xc.transpose() / nf);
        let (vals, vecs) = linalg::sym_eig_desc(&gram)?;
        // w = Xc' v / sqrt(N lambda); zero-variance directions are left at zero
        let mut w = DMatrix::zeros(dim, vals.len());
        for (k, &lam) in vals.iter().enumerate() {
            if lam > 0.0 {
                let col = xc.transpose() * vecs.column(k) / (nf * lam).sqrt();
                w.set_column(k, &col);
            }
        }
        (vals, w)
    };
    let variances: Vec<f64> = variances.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = variances.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("PCA input has zero variance"));
    }
    let lmax = variances[0];
    let rank = variances.iter().take_while(|&&v| v > 1e-12 * lmax).count();
    let keep = if rank < d {
        log::warn!("PCA: data rank {rank} is below d={d}; keeping {rank} components");
        rank
    } else {
        d
    };
    directions = directions.columns(0, keep).into_owned();
    linalg::fix_signs(&mut directions);
    Ok(PcaModel {
        mean: mean.iter().copied().collect(),
        components: directions,
        explained_variance_ratio: variances.iter().map(|v| v / total).collect(),
        variances,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

impl PcaModel {
    pub fn transform(&self, x: &DataMatrix) -> Result<DataMatrix> {
        if x.ncols() != self.mean.len() {
            return Err(Error::dim("PCA input width mismatch"));
        }
        Ok(linalg::center_rows(x, &DVector::from_column_slice(&self.mean)) * &self.components)
    }

    pub fn inverse_transform(&self, z: &DataMatrix) -> DataMatrix {
        let mut out = z * self.components.transpose();
        for mut row in out.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DataMatrix::from_fn(n, d, |_, j| rng.random_range(-1.0..1.0) * (j as f64 + 1.0))
    }

    #[test]
    fn collinear_data() {
        let x = DataMatrix::from_row_slice(4, 2, &[1.0, 1.0, -1.0, -1.0, 2.0, 2.0, -2.0, -2.0]);
        let m = fit(&x, 1).unwrap();
        let s = 0.5f64.sqrt();
        assert!((m.components[(0, 0)] - s).abs() < 1e-12 && (m.components[(1, 0)] - s).abs() < 1e-12);
        assert!((m.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_basis_reconstructs() {
        let x = random(30, 6, 1);
        let m = fit(&x, 6).unwrap();
        let back = m.inverse_transform(&m.transform(&x).unwrap());
        assert!((back - &x).amax() < 1e-10);
        let s: f64 = m.explained_variance_ratio.iter().sum();
        assert!((s - 1.0).abs() < 1e-10);
        assert!(m.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        let x = random(8, 20, 2);
        let wide = fit(&x, 3).unwrap();
        let z = wide.transform(&x).unwrap();
        let gram = z.transpose() * &z / 8.0;
        for i in 0..3 {
            assert!((gram[(i, i)] - wide.variances[i]).abs() < 1e-10);
        }
        let g = wide.components.transpose() * &wide.components;
        assert!((g - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn rank_deficiency_shrinks_d() {
        let x = DataMatrix::from_fn(10, 5, |i, j| (i as f64) * (j as f64 + 1.0));
        let m = fit(&x, 3).unwrap();
        assert_eq!(m.components.ncols(), 1);
        assert!(fit(&DataMatrix::from_element(4, 3, 2.0), 1).is_err());
    }
}
