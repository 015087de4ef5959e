use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{io, linalg, DataMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsomapModel {
    pub k_neighbors: usize,
    #[serde(with = "io::b64")]
    pub train: DataMatrix,
    /// N x N geodesic distances.
    #[serde(with = "io::b64")]
    pub geodesics: DMatrix<f64>,
    /// Column means of the squared geodesics.
    pub sq_col_means: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// N x d eigenvectors of the double-centred matrix.
    #[serde(with = "io::b64")]
    pub vectors: DMatrix<f64>,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then index
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest paths on a weighted adjacency list.
pub fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Entry(0.0, source));
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Entry(nd, v));
            }
        }
    }
    dist
}

/// All-pairs geodesic distances over the union k-NN graph.
pub fn geodesic_distances(x: &DataMatrix, k: usize) -> Result<DMatrix<f64>> {
    let sq = linalg::pairwise_sq_dists(x);
    let knn = linalg::knn_from_sq_dists(&sq, k);
    let graph = linalg::union_graph(&knn);
    let components = linalg::connected_components(&graph);
    if components > 1 {
        return Err(Error::Disconnected(components));
    }
    let adj: Vec<Vec<(usize, f64)>> = graph
        .iter()
        .enumerate()
        .map(|(i, nb)| nb.iter().map(|&j| (j, sq[(i, j)].sqrt())).collect())
        .collect();
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|s| dijkstra(&adj, s)).collect();
    let mut g = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    // the graph is undirected; average out summation-order differences
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Classical MDS on squared distances: top eigenpairs of `-1/2 H D2 H`.
///
/// Eigenvalues below `1e-10 * lambda_max` are not used, which can shrink d.
pub fn classical_mds(sq: &DMatrix<f64>, d: usize) -> Result<(Vec<f64>, DMatrix<f64>, Vec<f64>)> {
    let n = sq.nrows();
    let col_means: Vec<f64> = sq.column_iter().map(|c| c.mean()).collect();
    let grand = col_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - col_means[i] - col_means[j] + grand));
    let (vals, vecs) = linalg::sym_eig_desc(&b)?;
    let lmax = vals[0];
    if !(lmax > 0.0) {
        return Err(Error::invalid("all points coincide"));
    }
    let keep = vals.iter().take(d).take_while(|&&v| v > 1e-10 * lmax).count();
    if keep < d {
        log::warn!("MDS: only {keep} positive eigenvalues; embedding dimension reduced from {d}");
    }
    Ok((vals[..keep].to_vec(), vecs.columns(0, keep).into_owned(), col_means))
}

pub fn fit(x: &DataMatrix, d: usize, k: usize) -> Result<(IsomapModel, DataMatrix)> {
    let geodesics = geodesic_distances(x, k)?;
    let sq = geodesics.map(|v| v * v);
    let (eigenvalues, vectors, sq_col_means) = classical_mds(&sq, d)?;
    let mut y = vectors.clone();
    for (mut col, lam) in y.column_iter_mut().zip(&eigenvalues) {
        col *= lam.sqrt();
    }
    Ok((IsomapModel { k_neighbors: k, train: x.clone(), geodesics, sq_col_means, eigenvalues, vectors }, y))
}

impl IsomapModel {
    /// Landmark-MDS extension: geodesics to every training point go through the
    /// new point's k nearest training neighbours.
    pub fn transform(&self, x: &DataMatrix) -> Result<DataMatrix> {
        let cross = linalg::cross_sq_dists(x, &self.train);
        let n = self.train.nrows();
        let d = self.vectors.ncols();
        let rows: Vec<Vec<f64>> = (0..x.nrows())
            .into_par_iter()
            .map(|i| {
                let row: Vec<f64> = cross.row(i).iter().copied().collect();
                let nbrs = linalg::nearest(&row, self.k_neighbors);
                let g2: Vec<f64> = (0..n)
                    .map(|j| {
                        let g = nbrs
                            .iter()
                            .map(|&m| row[m].sqrt() + self.geodesics[(m, j)])
                            .fold(f64::INFINITY, f64::min);
                        g * g
                    })
                    .collect();
                (0..d)
                    .map(|c| {
                        let dot: f64 = (0..n).map(|j| self.vectors[(j, c)] * (g2[j] - self.sq_col_means[j])).sum();
                        -0.5 * dot / self.eigenvalues[c].sqrt()
                    })
                    .collect()
            })
            .collect();
        Ok(DMatrix::from_fn(x.nrows(), d, |i, c| rows[i][c]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_line_is_isometric() {
        let t: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).powf(1.3)).collect();
        let x = DMatrix::from_fn(25, 3, |i, j| t[i] * [1.0, -2.0, 0.5][j]);
        let (m, y) = fit(&x, 1, 3).unwrap();
        for i in 0..25 {
            for j in 0..i {
                let want = ((x.row(i) - x.row(j)).norm()).max(1e-300);
                let got = (y[(i, 0)] - y[(j, 0)]).abs();
                assert!(((got - want) / want).abs() < 1e-8);
            }
        }
        assert!((m.transform(&x).unwrap() - &y).amax() < 1e-8);
    }

    #[test]
    fn square_matches_mds_oracle() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let (_, y) = fit(&x, 2, 3).unwrap();
        // graph is complete, so geodesics are Euclidean and MDS recovers the square
        for i in 0..4 {
            for j in 0..4 {
                let want = (x.row(i) - x.row(j)).norm();
                let got = (y.row(i) - y.row(j)).norm();
                assert!((got - want).abs() < 1e-10);
            }
        }
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }

    #[test]
    fn arc_in_ten_dims_is_unrolled_in_order() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let theta: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..1.5 * std::f64::consts::PI)).collect();
        // orthonormal 2-frame in R^10
        let q = DMatrix::<f64>::from_fn(10, 2, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let x = DMatrix::from_fn(200, 10, |i, j| q[(j, 0)] * theta[i].cos() + q[(j, 1)] * theta[i].sin());
        let (_, y) = fit(&x, 1, 8).unwrap();
        let (rt, ry) = (ranks(&theta), ranks(y.column(0).as_slice()));
        let n = 200.0f64;
        let d2: f64 = rt.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        let rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!(rho.abs() >= 0.99, "spearman {rho}");
    }

    #[test]
    fn disconnected_graph_is_reported() {
        let x = DMatrix::from_row_slice(6, 1, &[0.0, 0.1, 0.2, 10.0, 10.1, 10.2]);
        match fit(&x, 1, 2) {
            Err(Error::Disconnected(2)) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dijkstra_small_graph() {
        let adj = vec![vec![(1, 1.0), (2, 5.0)], vec![(0, 1.0), (2, 1.0)], vec![(0, 5.0), (1, 1.0)]];
        assert_eq!(dijkstra(&adj, 0), vec![0.0, 1.0, 2.0]);
    }
}
