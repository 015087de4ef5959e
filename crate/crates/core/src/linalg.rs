//! Dense linear-algebra helpers shared by the generators, reducers and surrogates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::DataMatrix;

/// Eigenpairs of a symmetric matrix, values nonincreasing.
///
/// Each eigenvector is flipped so that its largest-magnitude entry is positive.
pub fn sym_eig_desc(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_symmetric(m, 1e-8)?;
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::numerical("symmetric eigensolver did not converge"))?;
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    fix_signs(&mut vectors);
    Ok((values, vectors))
}

/// Eigenpairs of a symmetric matrix, values nondecreasing.
pub fn sym_eig_asc(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (mut values, vectors) = sym_eig_desc(m)?;
    values.reverse();
    let n = vectors.ncols();
    let flipped = DMatrix::from_fn(vectors.nrows(), n, |i, j| vectors[(i, n - 1 - j)]);
    Ok((values, flipped))
}

pub fn check_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(format!("matrix is {}x{}, not square", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return Err(Error::invalid(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Flip columns so the largest-magnitude entry of each is positive.
pub fn fix_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() {
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

/// Copy of the rows of `m` as contiguous slices.
pub fn rows_of(m: &DataMatrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared Euclidean distances between every row of `a` and every row of `b`.
pub fn cross_sq_dists(a: &DataMatrix, b: &DataMatrix) -> DMatrix<f64> {
    let ra = rows_of(a);
    let rb = rows_of(b);
    let rows: Vec<Vec<f64>> = ra
        .par_iter()
        .map(|x| rb.iter().map(|y| sq_dist(x, y)).collect())
        .collect();
    DMatrix::from_fn(ra.len(), rb.len(), |i, j| rows[i][j])
}

pub fn pairwise_sq_dists(x: &DataMatrix) -> DMatrix<f64> {
    let mut d = cross_sq_dists(x, x);
    for i in 0..d.nrows() {
        d[(i, i)] = 0.0;
        for j in 0..i {
            let v = 0.5 * (d[(i, j)] + d[(j, i)]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Median of the strictly off-diagonal pairwise distances (not squared).
pub fn median_pairwise_distance(sq: &DMatrix<f64>) -> f64 {
    let n = sq.nrows();
    let mut v: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in 0..i {
            v.push(sq[(i, j)].max(0.0).sqrt());
        }
    }
    median(&mut v)
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Indices of the `k` nearest columns in each row of a squared-distance
/// matrix, excluding the diagonal, ties broken by index.
pub fn knn_from_sq_dists(sq: &DMatrix<f64>, k: usize) -> Vec<Vec<usize>> {
    (0..sq.nrows())
        .map(|i| {
            let mut idx: Vec<usize> = (0..sq.ncols()).filter(|&j| j != i).collect();
            idx.sort_by(|&a, &b| sq[(i, a)].total_cmp(&sq[(i, b)]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect()
}

/// Indices of the `k` nearest columns of row `row` of a cross-distance matrix.
pub fn nearest(sq_row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sq_row.len()).collect();
    idx.sort_by(|&a, &b| sq_row[a].total_cmp(&sq_row[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Undirected adjacency lists from a k-NN list, symmetrized by edge union.
pub fn union_graph(knn: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = knn.len();
    let mut adj = vec![Vec::new(); n];
    for (i, nbrs) in knn.iter().enumerate() {
        for &j in nbrs {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

pub fn connected_components(adj: &[Vec<usize>]) -> usize {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut count = 0;
    let mut stack = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        stack.push(s);
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    count
}

/// Moore-Penrose pseudo-inverse with singular values below `rcond * s_max` dropped.
pub fn pinv(m: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>> {
    let svd = m.clone().try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::numerical("SVD did not converge"))?;
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let smax = svd.singular_values.max();
    let cutoff = rcond * smax;
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += (vt.row(k).transpose() / s) * u.column(k).transpose();
        }
    }
    Ok(out)
}

/// `m^{-1/2}` for a symmetric positive-definite matrix.
pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eig_desc(m)?;
    if vals.iter().any(|&v| v <= 0.0) {
        return Err(Error::numerical("matrix is not positive definite"));
    }
    let scale = DVector::from_iterator(vals.len(), vals.iter().map(|v| 1.0 / v.sqrt()));
    Ok(&vecs * DMatrix::from_diagonal(&scale) * vecs.transpose())
}

/// Column means of a row-per-sample matrix.
pub fn column_means(x: &DataMatrix) -> DVector<f64> {
    let n = x.nrows().max(1) as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Subtract `mean` from every row.
pub fn center_rows(x: &DataMatrix, mean: &DVector<f64>) -> DataMatrix {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(mean.iter()) {
            *v -= m;
        }
    }
    out
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_ordering_and_signs() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 5.0]);
        let (vals, vecs) = sym_eig_desc(&m).unwrap();
        assert_eq!(vals, vec![5.0, 2.0, -1.0]);
        for col in vecs.column_iter() {
            let top = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(top > 0.0);
        }
        let (asc, _) = sym_eig_asc(&m).unwrap();
        assert_eq!(asc, vec![-1.0, 2.0, 5.0]);
    }

    #[test]
    fn nonsymmetric_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(sym_eig_desc(&m).is_err());
    }

    #[test]
    fn pinv_of_rank_deficient() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let p = pinv(&m, 1e-10).unwrap();
        // A A+ A = A
        let r = &m * &p * &m - &m;
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn components_and_union() {
        let knn = vec![vec![1], vec![0], vec![3], vec![2]];
        let adj = union_graph(&knn);
        assert_eq!(connected_components(&adj), 2);
        let knn = vec![vec![1], vec![2], vec![3], vec![0]];
        assert_eq!(connected_components(&union_graph(&knn)), 1);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
