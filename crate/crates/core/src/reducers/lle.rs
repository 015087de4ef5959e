use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::exact_match;
use crate::error::{Error, Result};
use crate::{io, linalg, DataMatrix};

pub const REGULARIZATION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LleModel {
    pub k_neighbors: usize,
    #[serde(with = "io::b64")]
    pub train: DataMatrix,
    #[serde(with = "io::b64")]
    pub embedding: DMatrix<f64>,
}

/// Weights summing to one that best reconstruct `center` from `neighbors`.
///
/// The local Gram matrix is regularised by `1e-3 * trace` when it is singular
/// (more neighbours than dimensions, or numerically rank deficient).
pub fn barycentric_weights(center: &[f64], neighbors: &[&[f64]]) -> Result<Vec<f64>> {
    let k = neighbors.len();
    let diffs: Vec<Vec<f64>> = neighbors
        .iter()
        .map(|nb| nb.iter().zip(center).map(|(a, b)| a - b).collect())
        .collect();
    let mut c = DMatrix::from_fn(k, k, |i, j| diffs[i].iter().zip(&diffs[j]).map(|(a, b)| a * b).sum());
    let trace = c.trace();
    if trace == 0.0 {
        // every neighbour coincides with the centre; any convex combination reconstructs it
        return Ok(vec![1.0 / k as f64; k]);
    }
    let singular = k > center.len() || {
        let (vals, _) = linalg::sym_eig_desc(&c)?;
        vals[k - 1] <= 1e-10 * vals[0]
    };
    if singular {
        for i in 0..k {
            c[(i, i)] += REGULARIZATION * trace;
        }
    }
    let w = c
        .cholesky()
        .map(|ch| ch.solve(&DVector::from_element(k, 1.0)))
        .ok_or_else(|| Error::numerical("neighbourhood Gram matrix is singular even after regularisation"))?;
    let s = w.sum();
    if !(s.abs() > 0.0) || !w.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("degenerate reconstruction weights"));
    }
    Ok(w.iter().map(|v| v / s).collect())
}

/// Sparse reconstruction weights, one row per sample over its k nearest neighbours.
pub fn weight_rows(x: &DataMatrix, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let rows = linalg::rows_of(x);
    let sq = linalg::pairwise_sq_dists(x);
    let knn = linalg::knn_from_sq_dists(&sq, k);
    knn.par_iter()
        .enumerate()
        .map(|(i, nbrs)| {
            let refs: Vec<&[f64]> = nbrs.iter().map(|&j| rows[j].as_slice()).collect();
            let w = barycentric_weights(&rows[i], &refs)?;
            Ok(nbrs.iter().copied().zip(w).collect())
        })
        .collect()
}

/// `M = (I - W)'(I - W)`, symmetrised.
pub fn cost_matrix(w: &[Vec<(usize, f64)>]) -> DMatrix<f64> {
    let n = w.len();
    let mut iw = DMatrix::<f64>::identity(n, n);
    for (i, row) in w.iter().enumerate() {
        for &(j, v) in row {
            iw[(i, j)] -= v;
        }
    }
    let m = iw.transpose() * &iw;
    (&m + m.transpose()) * 0.5
}

pub fn fit(x: &DataMatrix, d: usize, k: usize) -> Result<(LleModel, DataMatrix)> {
    let n = x.nrows();
    if d + 1 >= n {
        return Err(Error::invalid(format!("LLE with {n} samples supports d <= {}", n - 2)));
    }
    let m = cost_matrix(&weight_rows(x, k)?);
    let (_, vecs) = linalg::sym_eig_asc(&m)?;
    let mut y = vecs.columns(1, d).into_owned();
    linalg::fix_signs(&mut y);
    Ok((LleModel { k_neighbors: k, train: x.clone(), embedding: y.clone() }, y))
}

/// Barycentric out-of-sample map shared by LLE and t-SNE.
pub fn barycentric_transform(train: &DataMatrix, embedding: &DMatrix<f64>, k: usize, x: &DataMatrix) -> Result<DataMatrix> {
    let cross = linalg::cross_sq_dists(x, train);
    let rows = linalg::rows_of(train);
    let xs = linalg::rows_of(x);
    let d = embedding.ncols();
    let out: Vec<Vec<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let sq: Vec<f64> = cross.row(i).iter().copied().collect();
            if let Some(j) = exact_match(&sq) {
                return Ok(embedding.row(j).iter().copied().collect());
            }
            let nbrs = linalg::nearest(&sq, k.min(train.nrows()));
            let refs: Vec<&[f64]> = nbrs.iter().map(|&j| rows[j].as_slice()).collect();
            let w = barycentric_weights(&xs[i], &refs)?;
            Ok((0..d).map(|c| nbrs.iter().zip(&w).map(|(&j, wj)| wj * embedding[(j, c)]).sum()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(x.nrows(), d, |i, c| out[i][c]))
}

impl LleModel {
    pub fn transform(&self, x: &DataMatrix) -> Result<DataMatrix> {
        barycentric_transform(&self.train, &self.embedding, self.k_neighbors, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn swiss(n: usize, seed: u64) -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DataMatrix::from_fn(n, 3, |_, _| 0.0).map_with_location(|i, j, _| {
            let t = 1.0 + 3.0 * i as f64 / n as f64;
            match j {
                0 => t * t.cos(),
                1 => t * t.sin(),
                _ => rng.random_range(0.0..1.0),
            }
        })
    }

    #[test]
    fn symmetric_line_neighbours_get_half() {
        let x = DataMatrix::from_row_slice(5, 1, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let w = weight_rows(&x, 2).unwrap();
        let mut row = w[2].clone();
        row.sort_by_key(|p| p.0);
        assert_eq!(row.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 3]);
        assert!(row.iter().all(|p| (p.1 - 0.5).abs() < 1e-12));
    }

    #[test]
    fn weights_sum_to_one_and_m_is_psd() {
        let x = swiss(60, 1);
        let w = weight_rows(&x, 8).unwrap();
        for row in &w {
            assert!((row.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let (vals, _) = linalg::sym_eig_asc(&cost_matrix(&w)).unwrap();
        assert!(vals[0] > -1e-10);
        let (m, y) = fit(&x, 2, 8).unwrap();
        let g = y.transpose() * &y;
        assert!((g - DMatrix::identity(2, 2)).amax() < 1e-8);
        assert!((m.transform(&x).unwrap() - &y).amax() < 1e-8);
    }

    #[test]
    fn new_points_interpolate() {
        let x = swiss(80, 2);
        let (m, _) = fit(&x, 1, 6).unwrap();
        let mid = DataMatrix::from_fn(1, 3, |_, j| 0.5 * (x[(10, j)] + x[(11, j)]));
        let z = m.transform(&mid).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
    }
}
