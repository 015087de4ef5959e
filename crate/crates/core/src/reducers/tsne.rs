use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lle;
use crate::error::{Error, Result};
use crate::{io, linalg, DataMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(N / (4 * exaggeration), 50)`.
    pub learning_rate: Option<f64>,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    /// Neighbours used by the barycentric out-of-sample map.
    pub k_neighbors: usize,
}

impl Default for TsneOptions {
    fn default() -> Self {
        TsneOptions {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            k_neighbors: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneModel {
    pub k_neighbors: usize,
    #[serde(with = "io::b64")]
    pub train: DataMatrix,
    #[serde(with = "io::b64")]
    pub embedding: DMatrix<f64>,
    /// KL divergence (unexaggerated) after every iteration.
    pub kl_trace: Vec<f64>,
}

/// Conditional row `p_{j|i}` at precision `beta = 1/(2 sigma^2)`, with its entropy.
fn conditional_row(sq: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let dmin = sq.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = sq
        .iter()
        .enumerate()
        .map(|(j, &d)| if j == i { 0.0 } else { (-beta * (d - dmin)).exp() })
        .collect();
    let sum: f64 = p.iter().sum();
    let mut h = 0.0;
    for (j, v) in p.iter_mut().enumerate() {
        *v /= sum;
        if j != i && *v > 0.0 {
            h -= *v * v.ln();
        }
    }
    (p, h)
}

/// Symmetrised joint similarities `p_ij = (p_{j|i} + p_{i|j}) / 2N`, with
/// each conditional bandwidth set by bisection so the entropy matches `ln(perplexity)`.
pub fn joint_probabilities(sq: &DMatrix<f64>, perplexity: f64) -> Result<DMatrix<f64>> {
    let n = sq.nrows();
    if !(perplexity >= 1.0) || 3.0 * perplexity > n as f64 {
        return Err(Error::invalid(format!("perplexity {perplexity} is too large for {n} samples (need N >= 3 perplexity)")));
    }
    let target = perplexity.ln();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = sq.row(i).iter().copied().collect();
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let mut beta = 1.0 / row.iter().filter(|&&v| v > 0.0).fold(f64::INFINITY, |a, &b| a.min(b)).max(1e-300);
            let mut best = conditional_row(&row, i, beta);
            for _ in 0..200 {
                let diff = best.1 - target;
                if diff.abs() < 1e-5 {
                    break;
                }
                if diff > 0.0 {
                    lo = beta;
                    beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = 0.5 * (beta + lo);
                }
                best = conditional_row(&row, i, beta);
            }
            best.0
        })
        .collect();
    let denom = 2.0 * n as f64;
    Ok(DMatrix::from_fn(n, n, |i, j| (rows[i][j] + rows[j][i]) / denom))
}

/// Student-t affinities `(1 + |y_i - y_j|^2)^-1` (zero diagonal) and their sum.
fn student_t(y: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sq = linalg::pairwise_sq_dists(y);
    let mut w = sq.map(|d| 1.0 / (1.0 + d));
    w.fill_diagonal(0.0);
    let z = w.sum();
    (w, z)
}

/// `KL(P || Q)` for the embedding `y`.
pub fn kl_divergence(p: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let (w, z) = student_t(y);
    let mut kl = 0.0;
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            let pij = p[(i, j)];
            if i != j && pij > 0.0 {
                kl += pij * (pij / (w[(i, j)] / z).max(f64::MIN_POSITIVE)).ln();
            }
        }
    }
    kl
}

/// `dC/dy_i = 4 sum_j (p_ij - q_ij)(y_i - y_j)(1 + |y_i - y_j|^2)^-1`.
pub fn kl_gradient(p: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let (w, z) = student_t(y);
    let (n, d) = y.shape();
    let mut g = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let coeff = 4.0 * (p[(i, j)] - w[(i, j)] / z) * w[(i, j)];
            for c in 0..d {
                g[(i, c)] += coeff * (y[(i, c)] - y[(j, c)]);
            }
        }
    }
    g
}

pub fn fit(x: &DataMatrix, d: usize, opts: &TsneOptions, seed: u64) -> Result<(TsneModel, DataMatrix)> {
    let n = x.nrows();
    let p = joint_probabilities(&linalg::pairwise_sq_dists(x), opts.perplexity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-2).expect("valid normal");
    let mut y = DMatrix::from_fn(n, d, |_, _| init.sample(&mut rng));
    let mut update = DMatrix::<f64>::zeros(n, d);
    let mut gains = DMatrix::<f64>::from_element(n, d, 1.0);
    let mut trace = Vec::with_capacity(opts.iterations);
    let p_exag = &p * opts.exaggeration;
    let lr = opts.learning_rate.unwrap_or_else(|| (n as f64 / (4.0 * opts.exaggeration)).max(50.0));
    for it in 0..opts.iterations {
        let early = it < opts.exaggeration_iters;
        let grad = kl_gradient(if early { &p_exag } else { &p }, &y);
        let momentum = if early { opts.momentum_initial } else { opts.momentum_final };
        for k in 0..n * d {
            let same = (grad[k] > 0.0) == (update[k] > 0.0);
            gains[k] = if same { (gains[k] * 0.8).max(0.01) } else { gains[k] + 0.2 };
            update[k] = momentum * update[k] - lr * gains[k] * grad[k];
            y[k] += update[k];
        }
        let mean = linalg::column_means(&y);
        y = linalg::center_rows(&y, &mean);
        let kl = kl_divergence(&p, &y);
        if !kl.is_finite() {
            return Err(Error::numerical(format!("t-SNE objective became non-finite at iteration {it}")));
        }
        trace.push(kl);
    }
    Ok((TsneModel { k_neighbors: opts.k_neighbors, train: x.clone(), embedding: y.clone(), kl_trace: trace }, y))
}

impl TsneModel {
    pub fn transform(&self, x: &DataMatrix) -> Result<DataMatrix> {
        lle::barycentric_transform(&self.train, &self.embedding, self.k_neighbors, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(n: usize, seed: u64) -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DataMatrix::from_fn(n, 5, |i, _| (i % 3) as f64 * 4.0 + rng.random_range(-1.0..1.0))
    }

    #[test]
    fn joint_p_is_symmetric_and_normalised() {
        let x = cloud(30, 1);
        let p = joint_probabilities(&linalg::pairwise_sq_dists(&x), 5.0).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-10);
        assert!((&p - p.transpose()).amax() < 1e-15);
        assert!(joint_probabilities(&linalg::pairwise_sq_dists(&x), 11.0).is_err());
    }

    #[test]
    fn conditional_entropy_matches_perplexity() {
        let x = cloud(25, 2);
        let sq = linalg::pairwise_sq_dists(&x);
        let row: Vec<f64> = sq.row(3).iter().copied().collect();
        // recover the bisection result by rerunning it on one row
        let p = joint_probabilities(&sq, 6.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        let (_, h_small) = conditional_row(&row, 3, 1e-6);
        assert!((h_small - (24f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = cloud(12, 3);
        let p = joint_probabilities(&linalg::pairwise_sq_dists(&x), 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = DMatrix::from_fn(12, 2, |_, _| rng.random_range(-2.0..2.0));
        let g = kl_gradient(&p, &y);
        let eps = 1e-6;
        for k in 0..y.len() {
            let mut a = y.clone();
            let mut b = y.clone();
            a[k] += eps;
            b[k] -= eps;
            let fd = (kl_divergence(&p, &a) - kl_divergence(&p, &b)) / (2.0 * eps);
            assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1e-3), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn late_objective_does_not_increase() {
        let x = cloud(45, 5);
        let opts = TsneOptions { perplexity: 10.0, ..Default::default() };
        let (m, y) = fit(&x, 2, &opts, 7).unwrap();
        let tail = &m.kl_trace[m.kl_trace.len() - 100..];
        for w in tail.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
        }
        assert_eq!(m.transform(&x).unwrap(), y);
    }
}
