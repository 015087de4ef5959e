use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{io, DataMatrix};

pub const TOLERANCE: f64 = 1e-6;
const EPS: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmfModel {
    /// Added to every entry before factorizing.
    pub shift: f64,
    /// d x D nonnegative factor F with `X + shift ~ G F`.
    #[serde(with = "io::b64")]
    pub factor: DMatrix<f64>,
    /// Squared Frobenius objective after each iteration.
    pub objective: Vec<f64>,
}

fn objective(x: &DMatrix<f64>, g: &DMatrix<f64>, f: &DMatrix<f64>) -> f64 {
    (x - g * f).norm_squared()
}

/// Lee-Seung multiplicative updates on `|X - G F|_F^2`.
///
/// Returns the model and the training coefficients G (N x d).
pub fn fit(x: &DataMatrix, d: usize, seed: u64, max_iter: usize) -> Result<(NmfModel, DataMatrix)> {
    let (n, dim) = x.shape();
    if d > n.min(dim) {
        return Err(Error::invalid(format!("NMF rank {d} exceeds min(N, D) = {}", n.min(dim))));
    }
    let shift = (-x.min()).max(0.0);
    let xs = x.add_scalar(shift);
    if xs.max() == xs.min() {
        return Err(Error::invalid("NMF input is constant"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (xs.mean() / d as f64).sqrt();
    let mut g = DMatrix::from_fn(n, d, |_, _| scale * rng.random_range(0.01..1.0));
    let mut f = DMatrix::from_fn(d, dim, |_, _| scale * rng.random_range(0.01..1.0));
    let mut trace = vec![objective(&xs, &g, &f)];
    for _ in 0..max_iter {
        let gt = g.transpose();
        let num = &gt * &xs;
        let den = (&gt * &g) * &f;
        f.zip_zip_apply(&num, &den, |v, a, b| *v *= a / b.max(EPS));
        let ft = f.transpose();
        let num = &xs * &ft;
        let den = &g * (&f * &ft);
        g.zip_zip_apply(&num, &den, |v, a, b| *v *= a / b.max(EPS));
        let obj = objective(&xs, &g, &f);
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if prev - obj < TOLERANCE * prev {
            break;
        }
    }
    Ok((NmfModel { shift, factor: f, objective: trace }, g))
}

impl NmfModel {
    /// Nonnegative least-squares coefficients of each shifted row against the factor.
    pub fn transform(&self, x: &DataMatrix) -> Result<DataMatrix> {
        let f = &self.factor;
        let gram = f * f.transpose();
        let xs = x.add_scalar(self.shift);
        let rhs = f * xs.transpose();
        let d = f.nrows();
        let mut out = DataMatrix::zeros(x.nrows(), d);
        for i in 0..x.nrows() {
            let g = nnls(&gram, &rhs.column(i).into_owned(), 1e-12, 10_000);
            out.set_row(i, &g.transpose());
        }
        Ok(out)
    }
}

/// Projected coordinate descent for `min_{g >= 0} g' A g - 2 b' g`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64, max_sweeps: usize) -> DVector<f64> {
    let d = b.len();
    let mut g = DVector::<f64>::zeros(d);
    let scale = b.amax().max(f64::MIN_POSITIVE);
    for _ in 0..max_sweeps {
        let mut change = 0.0f64;
        for j in 0..d {
            if a[(j, j)] <= 0.0 {
                continue;
            }
            let grad = a.row(j).dot(&g.transpose()) - b[j];
            let new = (g[j] - grad / a[(j, j)]).max(0.0);
            change = change.max((new - g[j]).abs());
            g[j] = new;
        }
        if change <= tol * scale {
            break;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = DMatrix::from_fn(4, 2, |_, _| rng.random_range(0.1..1.0));
        let f = DMatrix::from_fn(2, 6, |_, _| rng.random_range(0.1..1.0));
        let x = &g * &f;
        let (m, gg) = fit(&x, 2, 0, 20_000).unwrap();
        assert_eq!(m.shift, 0.0);
        let resid = (&x - &gg * &m.factor).norm();
        assert!(resid < 1e-3 * x.norm(), "{resid}");
        assert!(m.factor.iter().all(|&v| v >= 0.0) && gg.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn objective_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(30, 12, |_, _| rng.random_range(-1.0..1.0));
        let (m, _) = fit(&x, 3, 1, 1000).unwrap();
        assert!(m.shift > 0.0);
        for w in m.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn rank_one_recovery_and_transform() {
        let g: Vec<f64> = vec![1.0, 2.0, 0.5, 3.0];
        let f: Vec<f64> = vec![0.2, 1.0, 0.0, 4.0, 2.0];
        let x = DMatrix::from_fn(4, 5, |i, j| g[i] * f[j]);
        let (m, gg) = fit(&x, 1, 3, 20_000).unwrap();
        let approx = &gg * &m.factor;
        assert!((approx - &x).amax() < 1e-6);
        // recovered factor is proportional to f
        let ratio = m.factor[(0, 1)] / f[1];
        for j in 0..5 {
            assert!((m.factor[(0, j)] - ratio * f[j]).abs() < 1e-6);
        }
        let z = m.transform(&x).unwrap();
        assert!((z - gg).amax() < 1e-6);
    }

    #[test]
    fn constant_input_rejected() {
        assert!(fit(&DMatrix::from_element(5, 4, -2.0), 1, 0, 10).is_err());
    }
}
