//! Gaussian and non-Gaussian random field ensembles.
//!
//! Fields are sampled with a discrete Karhunen-Loeve expansion (KLE) of a
//! covariance matrix evaluated at grid points, or with the 2-D spectral
//! representation method (SRM), a random-phase cosine series built from a
//! power spectrum. Every sampler is a pure function of its inputs and seed;
//! sample `i` draws from its own ChaCha stream so results do not depend on
//! thread scheduling.

use std::f64::consts::{PI, SQRT_2};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, MatrixFormat};
use crate::linalg;
use crate::DataMatrix;

/// RNG for sample `index` of a run seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform 1-D or 2-D grid. Points are flattened row-major with x fastest,
/// i.e. flat index `iy * nx + ix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: usize,
    pub extents: Vec<(f64, f64)>,
    pub points_per_axis: Vec<usize>,
    /// Points sit at cell centers instead of spanning the closed interval.
    #[serde(default)]
    pub cell_centered: bool,
}

impl GridSpec {
    /// `n` nodes spanning `[a, b]` including both endpoints.
    pub fn line(a: f64, b: f64, n: usize) -> Self {
        GridSpec { dims: 1, extents: vec![(a, b)], points_per_axis: vec![n], cell_centered: false }
    }

    /// Cell centers of an `n x n` partition of the unit square.
    pub fn unit_square_cells(n: usize) -> Self {
        GridSpec {
            dims: 2,
            extents: vec![(0.0, 1.0), (0.0, 1.0)],
            points_per_axis: vec![n, n],
            cell_centered: true,
        }
    }

    pub fn rect(x: (f64, f64), y: (f64, f64), nx: usize, ny: usize) -> Self {
        GridSpec { dims: 2, extents: vec![x, y], points_per_axis: vec![nx, ny], cell_centered: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 1 && self.dims != 2 {
            return Err(Error::invalid(format!("grid must be 1-D or 2-D, got {}", self.dims)));
        }
        if self.extents.len() != self.dims || self.points_per_axis.len() != self.dims {
            return Err(Error::invalid("grid extents/points do not match dims"));
        }
        for (&(a, b), &n) in self.extents.iter().zip(&self.points_per_axis) {
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(Error::invalid(format!("empty grid interval [{a}, {b}]")));
            }
            if n == 0 || (n == 1 && !self.cell_centered) {
                return Err(Error::invalid("grid needs at least two nodes per axis"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points_per_axis.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let (a, b) = self.extents[axis];
        let n = self.points_per_axis[axis];
        if self.cell_centered {
            (b - a) / n as f64
        } else {
            (b - a) / (n - 1) as f64
        }
    }

    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        let (a, _) = self.extents[axis];
        let h = self.spacing(axis);
        let off = if self.cell_centered { 0.5 } else { 0.0 };
        (0..self.points_per_axis[axis]).map(|i| a + (i as f64 + off) * h).collect()
    }

    /// Coordinates of every point in flattening order; `y` is 0 on 1-D grids.
    pub fn coords(&self) -> Vec<(f64, f64)> {
        let xs = self.axis_coords(0);
        if self.dims == 1 {
            return xs.into_iter().map(|x| (x, 0.0)).collect();
        }
        let ys = self.axis_coords(1);
        ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect()
    }

    /// Flat index of the grid point nearest to `p`.
    pub fn nearest_index(&self, p: &[f64]) -> Result<usize> {
        if p.len() != self.dims {
            return Err(Error::dim(format!("point has {} coordinates, grid is {}-D", p.len(), self.dims)));
        }
        let mut flat = 0;
        let mut stride = 1;
        for axis in 0..self.dims {
            let (a, b) = self.extents[axis];
            if !(p[axis] >= a && p[axis] <= b) {
                return Err(Error::invalid(format!("point {p:?} lies outside the domain")));
            }
            let coords = self.axis_coords(axis);
            let i = (0..coords.len())
                .min_by(|&i, &j| (coords[i] - p[axis]).abs().total_cmp(&(coords[j] - p[axis]).abs()))
                .unwrap();
            flat += i * stride;
            stride *= self.points_per_axis[axis];
        }
        Ok(flat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    /// `sigma^2 exp(-(x - x')^2 / l^2)`
    SquaredExponential1d,
    /// `sigma^2 exp(-|x - x'| / lx - |y - y'| / ly)`
    SeparableExponential2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub kind: CovarianceKind,
    pub sigma: f64,
    pub lengthscales: Vec<f64>,
}

impl CovarianceSpec {
    pub fn squared_exponential(sigma: f64, lc: f64) -> Self {
        CovarianceSpec { kind: CovarianceKind::SquaredExponential1d, sigma, lengthscales: vec![lc] }
    }

    pub fn separable_exponential(lx: f64, ly: f64) -> Self {
        CovarianceSpec { kind: CovarianceKind::SeparableExponential2d, sigma: 1.0, lengthscales: vec![lx, ly] }
    }

    fn dims(&self) -> usize {
        match self.kind {
            CovarianceKind::SquaredExponential1d => 1,
            CovarianceKind::SeparableExponential2d => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("covariance sigma must be positive"));
        }
        if self.lengthscales.len() != self.dims() || self.lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::invalid("covariance lengthscales must be positive, one per axis"));
        }
        Ok(())
    }

    /// Kernel value at separation `(dx, dy)`.
    pub fn eval(&self, dx: f64, dy: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        match self.kind {
            CovarianceKind::SquaredExponential1d => {
                let l = self.lengthscales[0];
                s2 * (-(dx * dx) / (l * l)).exp()
            }
            CovarianceKind::SeparableExponential2d => {
                s2 * (-dx.abs() / self.lengthscales[0] - dy.abs() / self.lengthscales[1]).exp()
            }
        }
    }
}

/// Covariance matrix of `spec` evaluated at every pair of grid points.
pub fn cov_matrix(grid: &GridSpec, spec: &CovarianceSpec) -> Result<DMatrix<f64>> {
    grid.validate()?;
    spec.validate()?;
    if grid.dims != spec.dims() {
        return Err(Error::dim(format!(
            "{:?} kernel needs a {}-D grid, got {}-D",
            spec.kind,
            spec.dims(),
            grid.dims
        )));
    }
    let pts = grid.coords();
    let p = pts.len();
    Ok(DMatrix::from_fn(p, p, |i, j| spec.eval(pts[i].0 - pts[j].0, pts[i].1 - pts[j].1)))
}

/// Truncated discrete KLE: `f = mean + sum_i sqrt(lambda_i) theta_i f_i`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KleBasis {
    pub eigenvalues: Vec<f64>,
    /// P x rank, orthonormal columns.
    #[serde(with = "io::b64")]
    pub eigenvectors: DMatrix<f64>,
    pub mean: Vec<f64>,
    pub grid: GridSpec,
}

impl KleBasis {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `sum_i lambda_i f_i f_i^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = self.scaled_modes();
        &scaled * scaled.transpose()
    }

    /// Columns `sqrt(lambda_i) f_i`.
    fn scaled_modes(&self) -> DMatrix<f64> {
        let mut a = self.eigenvectors.clone();
        for (mut col, &l) in a.column_iter_mut().zip(&self.eigenvalues) {
            col *= l.max(0.0).sqrt();
        }
        a
    }

    /// Standard deviation of the Gaussian part at each grid point.
    pub fn pointwise_std(&self) -> Vec<f64> {
        (0..self.eigenvectors.nrows())
            .map(|i| {
                self.eigenvalues
                    .iter()
                    .enumerate()
                    .map(|(k, &l)| l * self.eigenvectors[(i, k)].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

fn clamp_and_truncate(mut values: Vec<f64>, vectors: DMatrix<f64>, rank: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let lmax = values.first().copied().unwrap_or(0.0).max(0.0);
    for v in values.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-8 * lmax {
                return Err(Error::invalid(format!(
                    "covariance is not positive semi-definite (eigenvalue {v:e})"
                )));
            }
            *v = 0.0;
        }
    }
    values.truncate(rank);
    Ok((values, vectors.columns(0, rank).into_owned()))
}

/// Eigen-decompose a symmetric PSD covariance matrix and keep `rank` modes.
///
/// The returned basis carries a placeholder 1-D grid on `[0, 1]`; use
/// [`kle_from_spec`] to keep the real grid.
pub fn kle_decompose(cov: &DMatrix<f64>, mean: &[f64], rank: usize) -> Result<KleBasis> {
    let p = cov.nrows();
    if mean.len() != p {
        return Err(Error::dim(format!("mean has {} entries, covariance is {p}x{p}", mean.len())));
    }
    if rank == 0 || rank > p {
        return Err(Error::invalid(format!("KLE rank must be in 1..={p}, got {rank}")));
    }
    let (values, vectors) = linalg::sym_eig_desc(cov)?;
    let (eigenvalues, eigenvectors) = clamp_and_truncate(values, vectors, rank)?;
    Ok(KleBasis { eigenvalues, eigenvectors, mean: mean.to_vec(), grid: GridSpec::line(0.0, 1.0, p.max(2)) })
}

/// KLE of a covariance kernel on a grid.
///
/// The 2-D separable kernel factors as a Kronecker product of two 1-D
/// kernels, so its eigenpairs are products of per-axis eigenpairs and only
/// `nx x nx` and `ny x ny` eigenproblems are solved.
pub fn kle_from_spec(grid: &GridSpec, spec: &CovarianceSpec, mean: &[f64], rank: usize) -> Result<KleBasis> {
    grid.validate()?;
    spec.validate()?;
    match spec.kind {
        CovarianceKind::SquaredExponential1d => {
            let cov = cov_matrix(grid, spec)?;
            let mut basis = kle_decompose(&cov, mean, rank)?;
            basis.grid = grid.clone();
            Ok(basis)
        }
        CovarianceKind::SeparableExponential2d => kle_separable(grid, spec, mean, rank),
    }
}

fn kle_separable(grid: &GridSpec, spec: &CovarianceSpec, mean: &[f64], rank: usize) -> Result<KleBasis> {
    if grid.dims != 2 {
        return Err(Error::dim("separable exponential kernel needs a 2-D grid"));
    }
    let p = grid.len();
    if mean.len() != p {
        return Err(Error::dim(format!("mean has {} entries, grid has {p} points", mean.len())));
    }
    if rank == 0 || rank > p {
        return Err(Error::invalid(format!("KLE rank must be in 1..={p}, got {rank}")));
    }
    let axis = |a: usize| -> Result<(Vec<f64>, DMatrix<f64>)> {
        let c = grid.axis_coords(a);
        let l = spec.lengthscales[a];
        let k = DMatrix::from_fn(c.len(), c.len(), |i, j| (-(c[i] - c[j]).abs() / l).exp());
        linalg::sym_eig_desc(&k)
    };
    let (lx, vx) = axis(0)?;
    let (ly, vy) = axis(1)?;
    let s2 = spec.sigma * spec.sigma;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(p);
    for (j, &b) in ly.iter().enumerate() {
        for (i, &a) in lx.iter().enumerate() {
            pairs.push((s2 * a.max(0.0) * b.max(0.0), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    pairs.truncate(rank);
    let nx = grid.points_per_axis[0];
    let mut vectors = DMatrix::zeros(p, rank);
    for (k, &(_, i, j)) in pairs.iter().enumerate() {
        for iy in 0..grid.points_per_axis[1] {
            for ix in 0..nx {
                vectors[(iy * nx + ix, k)] = vy[(iy, j)] * vx[(ix, i)];
            }
        }
    }
    linalg::fix_signs(&mut vectors);
    Ok(KleBasis {
        eigenvalues: pairs.iter().map(|t| t.0).collect(),
        eigenvectors: vectors,
        mean: mean.to_vec(),
        grid: grid.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    KleGaussian,
    KleUniform,
    SrmGaussian,
    /// Deterministic transform of another ensemble (e.g. `exp` of a Gaussian field).
    Derived,
}

/// Field realizations on a grid, one row per realization.
#[derive(Debug, Clone)]
pub struct FieldEnsemble {
    pub grid: GridSpec,
    pub values: DataMatrix,
    pub provenance: Provenance,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    grid: GridSpec,
    provenance: Provenance,
    seed: u64,
}

impl FieldEnsemble {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// Writes `<stem>.<csv|mpce>` and `<stem>.grid.json`.
    pub fn save(&self, dir: &Path, stem: &str, format: MatrixFormat) -> Result<()> {
        io::save_matrix(&dir.join(format!("{stem}.{}", format.extension())), &self.values, format)?;
        io::write_json(
            &dir.join(format!("{stem}.grid.json")),
            &Sidecar { grid: self.grid.clone(), provenance: self.provenance, seed: self.seed },
        )
    }

    /// Loads a matrix file and the `.grid.json` sidecar next to it.
    pub fn load(path: &Path) -> Result<Self> {
        let values = io::load_matrix(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("fields");
        let side: Sidecar = io::read_json(&path.with_file_name(format!("{stem}.grid.json")))?;
        if side.grid.len() != values.ncols() {
            return Err(Error::dim(format!(
                "grid has {} points but matrix has {} columns",
                side.grid.len(),
                values.ncols()
            )));
        }
        Ok(FieldEnsemble { grid: side.grid, values, provenance: side.provenance, seed: side.seed })
    }
}

/// Draw `n` Gaussian realizations from a KLE basis.
pub fn kle_sample_gaussian(basis: &KleBasis, n: usize, seed: u64) -> Result<FieldEnsemble> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let r = basis.rank();
    let thetas: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            (0..r).map(|_| rng.sample(StandardNormal)).collect()
        })
        .collect();
    let theta = DMatrix::from_fn(n, r, |i, k| thetas[i][k]);
    let mut values = theta * basis.scaled_modes().transpose();
    for mut row in values.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&basis.mean) {
            *v += m;
        }
    }
    Ok(FieldEnsemble { grid: basis.grid.clone(), values, provenance: Provenance::KleGaussian, seed })
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(z / SQRT_2))
}

/// Map the Gaussian part `g = f - f0` of each realization to `U[a, b]`
/// pointwise through `a + (b - a) * Phi(g / sigma(x))`, then add `f0` back.
pub fn translate_gaussian_to_uniform(ensemble: &FieldEnsemble, basis: &KleBasis, a: f64, b: f64) -> Result<FieldEnsemble> {
    if !(b > a) {
        return Err(Error::invalid(format!("uniform target needs b > a, got [{a}, {b}]")));
    }
    if ensemble.provenance != Provenance::KleGaussian {
        return Err(Error::invalid("translation expects a Gaussian KLE ensemble"));
    }
    if ensemble.values.ncols() != basis.mean.len() {
        return Err(Error::dim("ensemble and basis disagree on grid size"));
    }
    let sigma = basis.pointwise_std();
    if let Some(i) = sigma.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::invalid(format!("field standard deviation is zero at grid point {i}")));
    }
    let mut values = ensemble.values.clone();
    for mut row in values.row_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            let f0 = basis.mean[j];
            *v = f0 + a + (b - a) * normal_cdf((*v - f0) / sigma[j]);
        }
    }
    Ok(FieldEnsemble { grid: ensemble.grid.clone(), values, provenance: Provenance::KleUniform, seed: ensemble.seed })
}

/// Power spectrum `alpha2 (k1^2 + k2^2) exp(-alpha1 sqrt(k1^2 + k2^2))`.
pub fn srm_spectrum_eval(kappa1: f64, kappa2: f64, alpha1: f64, alpha2: f64) -> f64 {
    let r2 = kappa1 * kappa1 + kappa2 * kappa2;
    alpha2 * r2 * (-alpha1 * r2.sqrt()).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrmSpectrum {
    pub alpha1: f64,
    pub alpha2: f64,
    #[serde(default = "default_dkappa")]
    pub dkappa: f64,
    #[serde(default = "default_kappa_upper")]
    pub kappa_upper: f64,
}

fn default_dkappa() -> f64 {
    0.01
}

fn default_kappa_upper() -> f64 {
    1.28
}

impl SrmSpectrum {
    pub fn new(alpha1: f64, alpha2: f64) -> Self {
        SrmSpectrum { alpha1, alpha2, dkappa: default_dkappa(), kappa_upper: default_kappa_upper() }
    }

    /// Wavenumber bins per axis.
    pub fn m(&self) -> usize {
        (self.kappa_upper / self.dkappa).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.alpha1, self.alpha2, self.dkappa, self.kappa_upper].iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::invalid("SRM spectrum parameters must be positive"));
        }
        if self.m() == 0 {
            return Err(Error::invalid("SRM needs at least one wavenumber bin"));
        }
        Ok(())
    }

    /// Wavenumbers `i * dkappa` for `i = 1..=M`.
    pub fn wavenumbers(&self) -> Vec<f64> {
        (1..=self.m()).map(|i| i as f64 * self.dkappa).collect()
    }

    pub fn eval(&self, k1: f64, k2: f64) -> f64 {
        srm_spectrum_eval(k1, k2, self.alpha1, self.alpha2)
    }

    /// Pointwise variance of the cosine series, `2 sum (S(k1,k2) + S(k1,-k2)) dk^2`.
    pub fn variance(&self) -> f64 {
        let ks = self.wavenumbers();
        let dk2 = self.dkappa * self.dkappa;
        let mut v = 0.0;
        for &k1 in &ks {
            for &k2 in &ks {
                v += 2.0 * (self.eval(k1, k2) + self.eval(k1, -k2)) * dk2;
            }
        }
        v
    }
}

/// Sample `n` zero-mean 2-D fields with the spectral representation method:
///
/// `A(x,y) = sqrt(2) sum_ij [ a1_ij cos(k1i x + k2j y + phi1_ij) + a2_ij cos(k1i x - k2j y + phi2_ij) ]`
///
/// with `a_ij = sqrt(2 S dk1 dk2)` and phases uniform on `[0, 2 pi)`.
pub fn srm2d_sample(spectrum: &SrmSpectrum, grid: &GridSpec, n: usize, seed: u64) -> Result<FieldEnsemble> {
    spectrum.validate()?;
    grid.validate()?;
    if grid.dims != 2 {
        return Err(Error::dim("SRM sampling needs a 2-D grid"));
    }
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let ks = spectrum.wavenumbers();
    let m = ks.len();
    let dk2 = spectrum.dkappa * spectrum.dkappa;
    let mut amp_plus = vec![0.0; m * m];
    let mut amp_minus = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            amp_plus[i * m + j] = (2.0 * spectrum.eval(ks[i], ks[j]) * dk2).sqrt();
            amp_minus[i * m + j] = (2.0 * spectrum.eval(ks[i], -ks[j]) * dk2).sqrt();
        }
    }
    let xs = grid.axis_coords(0);
    let ys = grid.axis_coords(1);
    let (nx, ny) = (xs.len(), ys.len());
    // cos/sin of k * coordinate, indexed [k * len + point]
    let table = |coords: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut c = Vec::with_capacity(m * coords.len());
        let mut s = Vec::with_capacity(m * coords.len());
        for &k in &ks {
            for &x in coords {
                c.push((k * x).cos());
                s.push((k * x).sin());
            }
        }
        (c, s)
    };
    let (cx, sx) = table(&xs);
    let (cy, sy) = table(&ys);

    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut rng = sample_rng(seed, s as u64);
            let phases: Vec<f64> = (0..2 * m * m).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            let (phi1, phi2) = phases.split_at(m * m);
            // B_i(y) = sum_j a1 e^{i(k_j y + phi1)} + a2 e^{i(-k_j y + phi2)}
            let mut bre = vec![0.0; m * ny];
            let mut bim = vec![0.0; m * ny];
            for i in 0..m {
                for j in 0..m {
                    let a1 = amp_plus[i * m + j];
                    let a2 = amp_minus[i * m + j];
                    if a1 == 0.0 && a2 == 0.0 {
                        continue;
                    }
                    let (s1, c1) = phi1[i * m + j].sin_cos();
                    let (s2, c2) = phi2[i * m + j].sin_cos();
                    for y in 0..ny {
                        let (c, sn) = (cy[j * ny + y], sy[j * ny + y]);
                        bre[i * ny + y] += a1 * (c * c1 - sn * s1) + a2 * (c * c2 + sn * s2);
                        bim[i * ny + y] += a1 * (sn * c1 + c * s1) + a2 * (c * s2 - sn * c2);
                    }
                }
            }
            let mut field = vec![0.0; nx * ny];
            for i in 0..m {
                for y in 0..ny {
                    let (br, bi) = (bre[i * ny + y], bim[i * ny + y]);
                    for x in 0..nx {
                        field[y * nx + x] += cx[i * nx + x] * br - sx[i * nx + x] * bi;
                    }
                }
            }
            field.iter_mut().for_each(|v| *v *= SQRT_2);
            field
        })
        .collect();
    let values = DMatrix::from_fn(n, nx * ny, |i, j| rows[i][j]);
    Ok(FieldEnsemble { grid: grid.clone(), values, provenance: Provenance::SrmGaussian, seed })
}

/// Map a unit-interval sample to `[lo, hi]` with density biased toward `lo`.
pub fn low_bias_map(u: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * u * u
}

/// Latin-hypercube design of `(lx, ly)` lengthscale pairs, biased toward
/// short lengthscales by [`low_bias_map`].
pub fn lengthscale_design(n_pairs: usize, bounds: (f64, f64), seed: u64) -> Result<Vec<(f64, f64)>> {
    let (lo, hi) = bounds;
    if n_pairs == 0 {
        return Err(Error::invalid("need at least one lengthscale pair"));
    }
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::invalid(format!("lengthscale bounds must satisfy 0 < lo < hi, got {bounds:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut axis = || -> Vec<f64> {
        let mut strata: Vec<usize> = (0..n_pairs).collect();
        strata.shuffle(&mut rng);
        strata
            .into_iter()
            .map(|k| (k as f64 + rng.random::<f64>()) / n_pairs as f64)
            .collect()
    };
    let ux = axis();
    let uy = axis();
    Ok(ux.into_iter().zip(uy).map(|(a, b)| (low_bias_map(a, lo, hi), low_bias_map(b, lo, hi))).collect())
}

/// `k x k` grid of lengthscale pairs at the stratum midpoints of `bounds`.
pub fn uniform_lengthscale_grid(k: usize, bounds: (f64, f64)) -> Vec<(f64, f64)> {
    let (lo, hi) = bounds;
    let vals: Vec<f64> = (0..k).map(|i| lo + (i as f64 + 0.5) * (hi - lo) / k as f64).collect();
    vals.iter().flat_map(|&ly| vals.iter().map(move |&lx| (lx, ly))).collect()
}

/// Elementwise `exp` of a Gaussian ensemble (log-normal field).
pub fn exp_field(ensemble: &FieldEnsemble) -> FieldEnsemble {
    FieldEnsemble {
        grid: ensemble.grid.clone(),
        values: ensemble.values.map(f64::exp),
        provenance: Provenance::Derived,
        seed: ensemble.seed,
    }
}

/// Mean vector helper for the Poisson forcing, `0.1 sin(pi x)`.
pub fn poisson_mean(grid: &GridSpec) -> Vec<f64> {
    grid.coords().iter().map(|&(x, _)| 0.1 * (PI * x).sin()).collect()
}

pub fn dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn poisson_grid() -> GridSpec {
        GridSpec::line(-1.0, 1.0, 1024)
    }

    #[test]
    fn kernel_values() {
        let spec = CovarianceSpec::squared_exponential(20f64.sqrt(), 0.2);
        assert!(close(spec.eval(0.0, 0.0), 20.0, 1e-12));
        assert!(close(spec.eval(0.2, 0.0), 20.0 * (-1.0f64).exp(), 1e-12));
        assert!(close(20.0 * (-1.0f64).exp(), 7.3576, 1e-4));
        let spec2 = CovarianceSpec::separable_exponential(0.3, 0.5);
        assert_eq!(spec2.eval(0.0, 0.0), 1.0);
    }

    #[test]
    fn cov_matrix_checks_dims() {
        let spec2 = CovarianceSpec::separable_exponential(0.3, 0.5);
        assert!(matches!(cov_matrix(&GridSpec::line(0.0, 1.0, 5), &spec2), Err(Error::Dimension(_))));
        let spec1 = CovarianceSpec::squared_exponential(1.0, 0.2);
        assert!(cov_matrix(&GridSpec::unit_square_cells(3), &spec1).is_err());
    }

    #[test]
    fn cov_matrix_is_symmetric_psd() {
        let grid = GridSpec::line(-1.0, 1.0, 200);
        let c = cov_matrix(&grid, &CovarianceSpec::squared_exponential(20f64.sqrt(), 0.2)).unwrap();
        assert_eq!(c, c.transpose());
        let (vals, _) = linalg::sym_eig_desc(&c).unwrap();
        assert!(vals.iter().all(|&v| v > -1e-8 * vals[0]));
        assert!(c.diagonal().iter().all(|&d| (d - 20.0).abs() < 1e-12));
    }

    #[test]
    fn identity_and_rank_one_spectra() {
        let b = kle_decompose(&DMatrix::identity(3, 3), &[0.0; 3], 3).unwrap();
        assert!(b.eigenvalues.iter().all(|&l| close(l, 1.0, 1e-12)));
        let gram = b.eigenvectors.transpose() * &b.eigenvectors;
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-12);

        let v = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let b = kle_decompose(&(&v * v.transpose()), &[0.0; 3], 2).unwrap();
        assert!(close(b.eigenvalues[0], 9.0, 1e-12));
        assert!(close(b.eigenvalues[1], 0.0, 1e-12));
    }

    #[test]
    fn kle_errors() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(kle_decompose(&m, &[0.0; 2], 2).is_err());
        assert!(kle_decompose(&DMatrix::identity(2, 2), &[0.0; 2], 3).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(kle_decompose(&neg, &[0.0; 2], 2).is_err());
    }

    #[test]
    fn poisson_kle_trace_and_reconstruction() {
        let grid = poisson_grid();
        let spec = CovarianceSpec::squared_exponential(20f64.sqrt(), 0.2);
        let cov = cov_matrix(&grid, &spec).unwrap();
        let basis = kle_from_spec(&grid, &spec, &poisson_mean(&grid), 1024).unwrap();
        let total: f64 = basis.eigenvalues.iter().sum();
        assert!((total - 1024.0 * 20.0).abs() / (1024.0 * 20.0) < 1e-6);
        assert!(basis.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let rel = (basis.reconstruct() - &cov).norm() / cov.norm();
        assert!(rel < 1e-6, "reconstruction error {rel}");
        let gram = basis.eigenvectors.transpose() * &basis.eigenvectors;
        // orthonormality only holds for modes the eigensolver resolved
        assert!((gram - DMatrix::identity(1024, 1024)).amax() < 1e-8);
    }

    #[test]
    fn separable_route_matches_dense_route() {
        let grid = GridSpec::unit_square_cells(6);
        let spec = CovarianceSpec::separable_exponential(0.3, 0.7);
        let cov = cov_matrix(&grid, &spec).unwrap();
        let fast = kle_from_spec(&grid, &spec, &vec![0.0; 36], 36).unwrap();
        let dense = kle_decompose(&cov, &vec![0.0; 36], 36).unwrap();
        for (a, b) in fast.eigenvalues.iter().zip(&dense.eigenvalues) {
            assert!(close(*a, *b, 1e-10));
        }
        assert!((fast.reconstruct() - &cov).amax() < 1e-10);
    }

    #[test]
    fn zero_spectrum_samples_are_the_mean() {
        let mut b = kle_decompose(&DMatrix::identity(4, 4), &[1.0, 2.0, 3.0, 4.0], 4).unwrap();
        b.eigenvalues = vec![0.0; 4];
        let e = kle_sample_gaussian(&b, 5, 3).unwrap();
        for row in e.values.row_iter() {
            assert_eq!(row.iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 4.0]);
        }
        assert!(kle_sample_gaussian(&b, 0, 3).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let b = kle_decompose(&DMatrix::identity(4, 4), &[0.0; 4], 4).unwrap();
        let a = kle_sample_gaussian(&b, 20, 11).unwrap();
        let c = kle_sample_gaussian(&b, 20, 11).unwrap();
        assert_eq!(a.values, c.values);
        let d = kle_sample_gaussian(&b, 20, 12).unwrap();
        assert_ne!(a.values, d.values);
    }

    #[test]
    fn translation_endpoints() {
        let b = kle_decompose(&DMatrix::identity(2, 2), &[0.5, -0.5], 2).unwrap();
        let values = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, 1e6, -1e6]);
        let e = FieldEnsemble { grid: b.grid.clone(), values, provenance: Provenance::KleGaussian, seed: 0 };
        let t = translate_gaussian_to_uniform(&e, &b, -15.0, 15.0).unwrap();
        assert!(close(t.values[(0, 0)], 0.5, 1e-12));
        assert!(close(t.values[(0, 1)], -0.5, 1e-12));
        assert!(close(t.values[(1, 0)], 0.5 + 15.0, 1e-12));
        assert!(close(t.values[(1, 1)], -0.5 - 15.0, 1e-12));
        assert!(translate_gaussian_to_uniform(&e, &b, 1.0, 1.0).is_err());
        let mut zero = b.clone();
        zero.eigenvalues = vec![0.0, 0.0];
        assert!(translate_gaussian_to_uniform(&e, &zero, -1.0, 1.0).is_err());
    }

    #[test]
    fn spectrum_values() {
        assert_eq!(srm_spectrum_eval(0.0, 0.0, 50.0, 10.0), 0.0);
        assert!(close(srm_spectrum_eval(0.01, 0.0, 50.0, 10.0), 6.065e-4, 1e-7));
        assert!(close(srm_spectrum_eval(0.001, 0.0, 3e3, 25.0), 1.245e-6, 1e-9));
        let s = SrmSpectrum::new(3e3, 25.0);
        assert_eq!(s.m(), 128);
        assert_eq!(2 * s.m() * s.m(), 32768);
    }

    #[test]
    fn srm_matches_direct_cosine_sum() {
        let spec = SrmSpectrum { alpha1: 5.0, alpha2: 10.0, dkappa: 0.25, kappa_upper: 1.0 };
        let grid = GridSpec::rect((0.0, 6.0), (0.0, 4.0), 5, 4);
        let e = srm2d_sample(&spec, &grid, 2, 9).unwrap();
        let ks = spec.wavenumbers();
        let m = ks.len();
        for s in 0..2 {
            let mut rng = sample_rng(9, s as u64);
            let phases: Vec<f64> = (0..2 * m * m).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            for (p, &(x, y)) in grid.coords().iter().enumerate() {
                let mut direct = 0.0;
                for i in 0..m {
                    for j in 0..m {
                        let a1 = (2.0 * spec.eval(ks[i], ks[j]) * 0.0625).sqrt();
                        let a2 = (2.0 * spec.eval(ks[i], -ks[j]) * 0.0625).sqrt();
                        direct += a1 * (ks[i] * x + ks[j] * y + phases[i * m + j]).cos()
                            + a2 * (ks[i] * x - ks[j] * y + phases[m * m + i * m + j]).cos();
                    }
                }
                direct *= SQRT_2;
                assert!(close(e.values[(s, p)], direct, 1e-12), "{} vs {direct}", e.values[(s, p)]);
            }
        }
    }

    #[test]
    fn srm_zero_spectrum_and_validation() {
        let spec = SrmSpectrum { alpha1: 1e6, alpha2: 1.0, dkappa: 0.5, kappa_upper: 2.0 };
        let e = srm2d_sample(&spec, &GridSpec::unit_square_cells(3), 2, 1).unwrap();
        assert!(e.values.iter().all(|&v| v == 0.0));
        assert!(srm2d_sample(&spec, &GridSpec::line(0.0, 1.0, 4), 2, 1).is_err());
    }

    #[test]
    fn lengthscale_design_is_latin_and_low_biased() {
        let pairs = lengthscale_design(60, (0.05, 1.0), 4).unwrap();
        assert_eq!(pairs.len(), 60);
        assert!(pairs.iter().all(|&(a, b)| (0.05..=1.0).contains(&a) && (0.05..=1.0).contains(&b)));
        // one point per stratum in u-space on each axis
        let mut strata: Vec<usize> = pairs
            .iter()
            .map(|&(a, _)| ((((a - 0.05) / 0.95).sqrt()) * 60.0).floor().min(59.0) as usize)
            .collect();
        strata.sort_unstable();
        assert_eq!(strata, (0..60).collect::<Vec<_>>());
        assert_eq!(low_bias_map(0.0, 0.05, 1.0), 0.05);

        let big = lengthscale_design(10_000, (0.05, 1.0), 5).unwrap();
        let mut xs: Vec<f64> = big.iter().map(|p| p.0).collect();
        assert!(linalg::median(&mut xs) < 0.525);
        assert!(lengthscale_design(0, (0.05, 1.0), 1).is_err());
        assert!(lengthscale_design(3, (0.0, 1.0), 1).is_err());
    }

    #[test]
    fn nearest_index_on_cells() {
        let g = GridSpec::unit_square_cells(32);
        let idx = g.nearest_index(&[0.323, 0.645]).unwrap();
        let (x, y) = g.coords()[idx];
        assert!((x - 0.323).abs() <= 1.0 / 64.0 && (y - 0.645).abs() <= 1.0 / 64.0);
        assert!(g.nearest_index(&[1.2, 0.5]).is_err());
    }
}
