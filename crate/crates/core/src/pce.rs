//! Total-degree polynomial chaos surrogates on reduced coordinates.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{io, linalg, DataMatrix};

/// Total-degree multi-index set in graded-lexicographic order.
///
/// Within a degree the first component runs from high to low, so for `k = 2`
/// the order is `(0,0) (1,0) (0,1) (2,0) (1,1) (0,2)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiIndexSet {
    pub k: usize,
    pub s_max: usize,
    /// Flattened, `k` entries per multi-index.
    indices: Vec<u16>,
}

/// `(s_max + k)! / (s_max! k!)`, evaluated without overflow for the sizes used here.
pub fn total_degree_cardinality(k: usize, s_max: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 1..=s_max.min(k) as u128 {
        let n = (s_max + k) as u128;
        c = c * (n - i + 1) / i;
    }
    c
}

impl MultiIndexSet {
    pub fn total_degree(k: usize, s_max: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("multi-index dimension must be at least 1"));
        }
        if s_max > u16::MAX as usize {
            return Err(Error::invalid("polynomial degree too large"));
        }
        let mut indices = Vec::new();
        let mut cur = vec![0u16; k];
        for deg in 0..=s_max {
            compositions(deg, 0, &mut cur, &mut indices);
        }
        Ok(MultiIndexSet { k, s_max, indices })
    }

    /// Build from explicit tuples (any order, no duplicates).
    pub fn from_indices(k: usize, tuples: &[Vec<u16>]) -> Result<Self> {
        if k == 0 || tuples.iter().any(|t| t.len() != k) {
            return Err(Error::dim("every multi-index must have k entries"));
        }
        let mut seen = std::collections::HashSet::new();
        if !tuples.iter().all(|t| seen.insert(t.clone())) {
            return Err(Error::invalid("duplicate multi-index"));
        }
        let s_max = tuples.iter().map(|t| t.iter().map(|&v| v as usize).sum()).max().unwrap_or(0);
        Ok(MultiIndexSet { k, s_max, indices: tuples.concat() })
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, s: usize) -> &[u16] {
        &self.indices[s * self.k..(s + 1) * self.k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u16]> {
        self.indices.chunks_exact(self.k)
    }

    fn max_component(&self) -> usize {
        self.indices.iter().copied().max().unwrap_or(0) as usize
    }
}

fn compositions(remaining: usize, pos: usize, cur: &mut Vec<u16>, out: &mut Vec<u16>) {
    let k = cur.len();
    if pos == k - 1 {
        cur[pos] = remaining as u16;
        out.extend_from_slice(cur);
        return;
    }
    for v in (0..=remaining).rev() {
        cur[pos] = v as u16;
        compositions(remaining - v, pos + 1, cur, out);
    }
    cur[pos] = 0;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Uniform latent variables on the scaled box.
    #[default]
    Legendre,
    /// Standard-normal latent variables after standardization.
    Hermite,
}

/// `sqrt(2n+1) P_n(x)` for `n = 0..=max`, orthonormal under U[-1, 1].
pub fn legendre_orthonormal_all(max: usize, x: f64, out: &mut [f64]) {
    out[0] = 1.0;
    if max == 0 {
        return;
    }
    out[1] = x;
    for n in 1..max {
        let nf = n as f64;
        out[n + 1] = ((2.0 * nf + 1.0) * x * out[n] - nf * out[n - 1]) / (nf + 1.0);
    }
    for (n, v) in out.iter_mut().enumerate().take(max + 1) {
        *v *= ((2 * n + 1) as f64).sqrt();
    }
}

pub fn legendre_orthonormal(degree: usize, x: f64) -> f64 {
    let mut buf = vec![0.0; degree + 1];
    legendre_orthonormal_all(degree, x, &mut buf);
    buf[degree]
}

/// Probabilists' Hermite `He_n(x) / sqrt(n!)`, orthonormal under N(0, 1).
pub fn hermite_orthonormal_all(max: usize, x: f64, out: &mut [f64]) {
    out[0] = 1.0;
    if max == 0 {
        return;
    }
    out[1] = x;
    for n in 1..max {
        out[n + 1] = x * out[n] - n as f64 * out[n - 1];
    }
    let mut fact = 1.0;
    for (n, v) in out.iter_mut().enumerate().take(max + 1).skip(1) {
        fact *= n as f64;
        *v /= fact.sqrt();
    }
}

/// Tensor-product basis evaluated at already-scaled inputs.
pub fn design_matrix(z: &DataMatrix, mset: &MultiIndexSet, family: Family) -> Result<DMatrix<f64>> {
    if z.ncols() != mset.k {
        return Err(Error::dim(format!("inputs have {} columns, basis expects {}", z.ncols(), mset.k)));
    }
    let k = mset.k;
    let deg = mset.max_component();
    let rows: Vec<Vec<f64>> = (0..z.nrows())
        .into_par_iter()
        .map(|i| {
            let mut uni = vec![0.0; k * (deg + 1)];
            for j in 0..k {
                let slot = &mut uni[j * (deg + 1)..(j + 1) * (deg + 1)];
                match family {
                    Family::Legendre => legendre_orthonormal_all(deg, z[(i, j)], slot),
                    Family::Hermite => hermite_orthonormal_all(deg, z[(i, j)], slot),
                }
            }
            mset.iter()
                .map(|alpha| {
                    alpha.iter().enumerate().fold(1.0, |acc, (j, &a)| {
                        if a == 0 {
                            acc
                        } else {
                            acc * uni[j * (deg + 1) + a as usize]
                        }
                    })
                })
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(z.nrows(), mset.len(), |i, s| rows[i][s]))
}

/// Affine map from reduced coordinates to the polynomial domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
    /// Scaled values beyond `+-limit` are clipped (bounded families only).
    pub limit: Option<f64>,
}

impl InputScaler {
    /// Box scaler on the training support expanded by `margin` of its width on
    /// each side. Points may extrapolate up to `1 + extrapolation` before clipping.
    pub fn fit_box(z: &DataMatrix, margin: f64, extrapolation: f64) -> Result<Self> {
        let mut center = Vec::with_capacity(z.ncols());
        let mut half_width = Vec::with_capacity(z.ncols());
        for (j, col) in z.column_iter().enumerate() {
            let lo = col.min();
            let hi = col.max();
            if !(hi > lo) {
                return Err(Error::invalid(format!("reduced coordinate {j} is constant over the training set")));
            }
            let pad = margin * (hi - lo);
            center.push(0.5 * (lo + hi));
            half_width.push(0.5 * (hi - lo) + pad);
        }
        Ok(InputScaler { center, half_width, limit: Some(1.0 + extrapolation) })
    }

    /// Standardizing scaler (sample mean, population std).
    pub fn fit_standard(z: &DataMatrix) -> Result<Self> {
        let n = z.nrows() as f64;
        let mut center = Vec::new();
        let mut half_width = Vec::new();
        for (j, col) in z.column_iter().enumerate() {
            let m = col.sum() / n;
            let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            if !(sd > 0.0) {
                return Err(Error::invalid(format!("reduced coordinate {j} is constant over the training set")));
            }
            center.push(m);
            half_width.push(sd);
        }
        Ok(InputScaler { center, half_width, limit: None })
    }

    /// Scaled copy of `z` and the number of entries outside the training box.
    pub fn apply(&self, z: &DataMatrix) -> Result<(DataMatrix, usize)> {
        if z.ncols() != self.center.len() {
            return Err(Error::dim(format!("inputs have {} columns, scaler expects {}", z.ncols(), self.center.len())));
        }
        let mut outside = 0;
        let mut out = z.clone();
        for j in 0..z.ncols() {
            for i in 0..z.nrows() {
                let mut s = (z[(i, j)] - self.center[j]) / self.half_width[j];
                if let Some(limit) = self.limit {
                    if s.abs() > 1.0 {
                        outside += 1;
                    }
                    s = s.clamp(-limit, limit);
                }
                out[(i, j)] = s;
            }
        }
        Ok((out, outside))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Regression {
    #[default]
    Ols,
    Ridge,
    Lasso,
}

impl Regression {
    pub fn default_lambda(self) -> f64 {
        match self {
            Regression::Ols => 0.0,
            Regression::Ridge => 1e-8,
            Regression::Lasso => 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceParams {
    pub s_max: usize,
    #[serde(default)]
    pub family: Family,
    #[serde(default)]
    pub regression: Regression,
    /// Penalty weight; `None` picks the per-regression default.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// How far past the box (in half-widths) a Legendre input may extrapolate before it is clipped.
    #[serde(default = "default_extrapolation")]
    pub extrapolation: f64,
}

fn default_margin() -> f64 {
    0.01
}

fn default_extrapolation() -> f64 {
    0.25
}

impl Default for PceParams {
    fn default() -> Self {
        PceParams { s_max: 2, family: Family::Legendre, regression: Regression::Ols, lambda: None, margin: 0.01, extrapolation: 0.25 }
    }
}

impl PceParams {
    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| self.regression.default_lambda())
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.lambda();
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::invalid("regression penalty must be finite and nonnegative"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::invalid("scaler margin must be nonnegative"));
        }
        if !(self.extrapolation >= 0.0 && self.extrapolation.is_finite()) {
            return Err(Error::invalid("extrapolation allowance must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceSurrogate {
    pub family: Family,
    pub regression: Regression,
    pub lambda: f64,
    pub mset: MultiIndexSet,
    pub scaler: InputScaler,
    /// S x M, one column per output.
    #[serde(with = "io::b64")]
    pub coefficients: DMatrix<f64>,
}

/// Fit one coefficient column per output of `y` against a shared design.
pub fn pce_fit(z: &DataMatrix, y: &DataMatrix, params: &PceParams) -> Result<PceSurrogate> {
    params.validate()?;
    if z.nrows() == 0 {
        return Err(Error::invalid("no training rows"));
    }
    if z.nrows() != y.nrows() {
        return Err(Error::dim(format!("{} input rows but {} output rows", z.nrows(), y.nrows())));
    }
    if !linalg::all_finite(z) || !linalg::all_finite(y) {
        return Err(Error::invalid("training data contains non-finite values"));
    }
    let mset = MultiIndexSet::total_degree(z.ncols(), params.s_max)?;
    let scaler = match params.family {
        Family::Legendre => InputScaler::fit_box(z, params.margin, params.extrapolation)?,
        Family::Hermite => InputScaler::fit_standard(z)?,
    };
    let (zs, _) = scaler.apply(z)?;
    let phi = design_matrix(&zs, &mset, params.family)?;
    if params.regression == Regression::Ols && phi.nrows() < phi.ncols() {
        log::warn!("OLS with {} samples for {} basis terms is underdetermined", phi.nrows(), phi.ncols());
    }
    let lambda = params.lambda();
    let coefficients = solve_coefficients(&phi, y, params.regression, lambda)?;
    if !linalg::all_finite(&coefficients) {
        return Err(Error::numerical("PCE coefficients are not finite"));
    }
    Ok(PceSurrogate { family: params.family, regression: params.regression, lambda, mset, scaler, coefficients })
}

/// Coefficients minimising `(1/N) sum res^2 + lambda J(c)` for each column of `y`.
pub fn solve_coefficients(phi: &DMatrix<f64>, y: &DataMatrix, regression: Regression, lambda: f64) -> Result<DMatrix<f64>> {
    let n = phi.nrows() as f64;
    match regression {
        Regression::Ols => Ok(linalg::pinv(phi, 1e-10)? * y),
        Regression::Ridge => {
            let mut a = phi.transpose() * phi / n;
            for i in 0..a.nrows() {
                a[(i, i)] += lambda;
            }
            let b = phi.transpose() * y / n;
            match a.clone().cholesky() {
                Some(ch) => Ok(ch.solve(&b)),
                None => Ok(linalg::pinv(&a, 1e-14)? * b),
            }
        }
        Regression::Lasso => {
            let gram = phi.transpose() * phi / n;
            let b = phi.transpose() * y / n;
            let cols: Vec<DVector<f64>> = (0..y.ncols())
                .into_par_iter()
                .map(|m| lasso_cd(&gram, &b.column(m).into_owned(), lambda, 1e-8, 100_000))
                .collect();
            Ok(DMatrix::from_fn(phi.ncols(), y.ncols(), |s, m| cols[m][s]))
        }
    }
}

/// Coordinate descent on `c' G c - 2 b' c + lambda |c|_1` (covariance updates).
fn lasso_cd(gram: &DMatrix<f64>, b: &DVector<f64>, lambda: f64, tol: f64, max_sweeps: usize) -> DVector<f64> {
    let s = b.len();
    let mut c = DVector::<f64>::zeros(s);
    // g = G c, kept up to date
    let mut g = DVector::<f64>::zeros(s);
    for sweep in 0..max_sweeps {
        let mut max_change = 0.0f64;
        for j in 0..s {
            let gjj = gram[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let rho = b[j] - (g[j] - gjj * c[j]);
            let new = soft_threshold(rho, 0.5 * lambda) / gjj;
            let delta = new - c[j];
            if delta != 0.0 {
                for i in 0..s {
                    g[i] += gram[(i, j)] * delta;
                }
                c[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < tol {
            return c;
        }
        if sweep + 1 == max_sweeps {
            log::warn!("LASSO coordinate descent stopped at {max_sweeps} sweeps (last change {max_change:e})");
        }
    }
    c
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

impl PceSurrogate {
    pub fn input_dim(&self) -> usize {
        self.mset.k
    }

    pub fn output_dim(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn predict(&self, z: &DataMatrix) -> Result<DataMatrix> {
        let (y, outside) = self.predict_counting_clips(z)?;
        if outside > 0 {
            log::warn!("{outside} reduced coordinates fell outside the training box");
        }
        Ok(y)
    }

    /// Predictions and the count of reduced coordinates outside the training box.
    pub fn predict_counting_clips(&self, z: &DataMatrix) -> Result<(DataMatrix, usize)> {
        let (zs, outside) = self.scaler.apply(z)?;
        let phi = design_matrix(&zs, &self.mset, self.family)?;
        Ok((phi * &self.coefficients, outside))
    }

    /// Analytic mean and variance per output from orthonormality.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let zero = self.mset.iter().position(|a| a.iter().all(|&v| v == 0));
        let m = self.output_dim();
        let mut mean = vec![0.0; m];
        let mut var = vec![0.0; m];
        for s in 0..self.mset.len() {
            for o in 0..m {
                let c = self.coefficients[(s, o)];
                if Some(s) == zero {
                    mean[o] = c;
                } else {
                    var[o] += c * c;
                }
            }
        }
        (mean, var)
    }
}
