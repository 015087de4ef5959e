use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{exact_match, gaussian, median_bandwidth};
use crate::error::{Error, Result};
use crate::{io, linalg, DataMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeModel {
    pub k_neighbors: usize,
    pub bandwidth: f64,
    #[serde(with = "io::b64")]
    pub train: DataMatrix,
    /// Generalised eigenvalues of `L v = lambda M v` for the kept vectors.
    pub eigenvalues: Vec<f64>,
    #[serde(with = "io::b64")]
    pub embedding: DMatrix<f64>,
}

/// Gaussian-weighted adjacency on the union k-NN graph.
pub fn adjacency(x: &DataMatrix, k: usize, h: f64) -> Result<DMatrix<f64>> {
    let sq = linalg::pairwise_sq_dists(x);
    let graph = linalg::union_graph(&linalg::knn_from_sq_dists(&sq, k));
    let components = linalg::connected_components(&graph);
    if components > 1 {
        return Err(Error::Disconnected(components));
    }
    let n = x.nrows();
    let mut w = DMatrix::zeros(n, n);
    for (i, nb) in graph.iter().enumerate() {
        for &j in nb {
            w[(i, j)] = gaussian(sq[(i, j)], h);
        }
    }
    Ok(w)
}

/// `L = M - W` with `M` the diagonal degree matrix.
pub fn laplacian(w: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let deg: Vec<f64> = w.row_iter().map(|r| r.sum()).collect();
    let mut l = -w.clone();
    for (i, d) in deg.iter().enumerate() {
        l[(i, i)] += d;
    }
    (l, deg)
}

pub fn fit(x: &DataMatrix, d: usize, k: usize, bandwidth: Option<f64>) -> Result<(LeModel, DataMatrix)> {
    let n = x.nrows();
    if d + 1 >= n {
        return Err(Error::invalid(format!("Laplacian eigenmaps with {n} samples supports d <= {}", n - 2)));
    }
    let h = match bandwidth {
        Some(h) => h,
        None => median_bandwidth(&linalg::pairwise_sq_dists(x))?,
    };
    let w = adjacency(x, k, h)?;
    let (l, deg) = laplacian(&w);
    if let Some(i) = deg.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::invalid(format!("sample {i} has zero kernel weight to its neighbours; increase the bandwidth")));
    }
    // L v = lambda M v  <=>  M^-1/2 L M^-1/2 u = lambda u,  v = M^-1/2 u
    let s = DMatrix::from_fn(n, n, |i, j| l[(i, j)] / (deg[i] * deg[j]).sqrt());
    let (vals, vecs) = linalg::sym_eig_asc(&((&s + s.transpose()) * 0.5))?;
    let mut y = DMatrix::from_fn(n, d, |i, c| vecs[(i, c + 1)] / deg[i].sqrt());
    linalg::fix_signs(&mut y);
    Ok((
        LeModel { k_neighbors: k, bandwidth: h, train: x.clone(), eigenvalues: vals[1..=d].to_vec(), embedding: y.clone() },
        y,
    ))
}

impl LeModel {
    /// Nystrom extension through the random-walk matrix `M^-1 W`, whose
    /// eigenvalues are `1 - lambda`.
    pub fn transform(&self, x: &DataMatrix) -> Result<DataMatrix> {
        let cross = linalg::cross_sq_dists(x, &self.train);
        let d = self.embedding.ncols();
        let mut out = DMatrix::zeros(x.nrows(), d);
        for i in 0..x.nrows() {
            let sq: Vec<f64> = cross.row(i).iter().copied().collect();
            if let Some(j) = exact_match(&sq) {
                out.set_row(i, &self.embedding.row(j));
                continue;
            }
            let nbrs = linalg::nearest(&sq, self.k_neighbors);
            let weights: Vec<f64> = nbrs.iter().map(|&j| gaussian(sq[j], self.bandwidth)).collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                return Err(Error::invalid(format!("sample {i} has zero kernel weight to the training set")));
            }
            for c in 0..d {
                let acc: f64 = nbrs.iter().zip(&weights).map(|(&j, w)| w * self.embedding[(j, c)]).sum();
                out[(i, c)] = acc / total / (1.0 - self.eigenvalues[c]);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DataMatrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn laplacian_kernel_contains_constants() {
        let x = cloud(40, 1);
        let w = adjacency(&x, 6, 1.0).unwrap();
        let (l, deg) = laplacian(&w);
        for r in l.row_iter() {
            assert!(r.sum().abs() < 1e-12);
        }
        assert!((&l * DVector::from_element(40, 1.0)).amax() < 1e-12);
        // generalised eigenvalues are nonnegative
        let s = DMatrix::from_fn(40, 40, |i, j| l[(i, j)] / (deg[i] * deg[j]).sqrt());
        let (vals, _) = linalg::sym_eig_asc(&s).unwrap();
        assert!(vals[0].abs() < 1e-10 && vals.iter().all(|&v| v > -1e-10));
    }

    #[test]
    fn bisects_two_cliques() {
        // two tight groups; k=6 forces a few weak edges between them
        let mut x = DataMatrix::zeros(12, 2);
        for i in 0..6 {
            x[(i, 0)] = i as f64 * 0.01;
            x[(i + 6, 0)] = 1.0 + i as f64 * 0.01;
        }
        let (_, y) = fit(&x, 1, 6, Some(0.3)).unwrap();
        let s = y[(0, 0)].signum();
        assert!((0..6).all(|i| y[(i, 0)].signum() == s));
        assert!((6..12).all(|i| y[(i, 0)].signum() == -s));
    }

    #[test]
    fn disconnected_graph_rejected() {
        let x = DataMatrix::from_row_slice(6, 1, &[0.0, 0.1, 0.2, 5.0, 5.1, 5.2]);
        assert!(matches!(fit(&x, 1, 2, None), Err(Error::Disconnected(2))));
    }

    #[test]
    fn training_rows_map_to_their_embedding() {
        let x = cloud(30, 2);
        let (m, y) = fit(&x, 2, 8, None).unwrap();
        assert_eq!(m.transform(&x).unwrap(), y);
        let z = m.transform(&(cloud(5, 3) * 0.5)).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
    }
}
