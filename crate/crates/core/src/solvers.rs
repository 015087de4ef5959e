//! Deterministic forward models for the three benchmarks.
//!
//! * 1-D Poisson `-u'' = f` on `[-1, 1]`, homogeneous Dirichlet, central
//!   differences and a tridiagonal solve.
//! * 2-D steady diffusion `div(D grad u) = 0` on the unit square, cell-centered
//!   finite volumes, `u = 1` at `x = 0`, `u = 0` at `x = 1`, zero flux on the
//!   `y` faces, solved with Jacobi-preconditioned conjugate gradients.
//! * 2-D Brusselator reaction-diffusion with zero-flux boundaries, IMEX Euler
//!   (implicit diffusion, explicit reaction) with internal substeps.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone)]
pub struct PoissonProblem {
    /// Number of grid nodes on `[-1, 1]`, endpoints included.
    pub points: usize,
    pub forcing: Vec<f64>,
}

/// Solve `-u'' = f` with `u(-1) = u(1) = 0`; returns `u` at every node.
pub fn solve_poisson1d(problem: &PoissonProblem) -> Result<Vec<f64>> {
    let t = problem.points;
    if t < 3 {
        return Err(Error::invalid("Poisson grid needs at least 3 points"));
    }
    if problem.forcing.len() != t {
        return Err(Error::dim(format!("forcing has {} values for {t} nodes", problem.forcing.len())));
    }
    let h = 2.0 / (t - 1) as f64;
    let m = t - 2;
    // Thomas algorithm on tridiag(-1, 2, -1) u = h^2 f
    let mut c_prime = vec![0.0; m];
    let mut d_prime = vec![0.0; m];
    for i in 0..m {
        let rhs = h * h * problem.forcing[i + 1];
        let (denom, prev_d): (f64, f64) = if i == 0 { (2.0, 0.0) } else { (2.0 + c_prime[i - 1], d_prime[i - 1]) };
        assert!(denom.abs() > 0.0, "Poisson system is SPD; zero pivot is impossible");
        c_prime[i] = -1.0 / denom;
        d_prime[i] = (rhs + prev_d) / denom;
    }
    let mut u = vec![0.0; t];
    for i in (0..m).rev() {
        let next = if i + 1 < m { u[i + 2] } else { 0.0 };
        u[i + 1] = d_prime[i] - c_prime[i] * next;
    }
    Ok(u)
}

#[derive(Debug, Clone)]
pub struct HeatProblem {
    /// Cells per axis.
    pub n: usize,
    /// Diffusivity per cell, flattened `iy * n + ix`.
    pub diffusivity: Vec<f64>,
}

impl HeatProblem {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.diffusivity.len() != self.n * self.n {
            return Err(Error::dim(format!(
                "diffusivity has {} values for a {n}x{n} grid",
                self.diffusivity.len(),
                n = self.n
            )));
        }
        if let Some(i) = self.diffusivity.iter().position(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::invalid(format!("diffusivity must be positive; cell {i} is {}", self.diffusivity[i])));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeatSolution {
    pub u: Vec<f64>,
    pub iterations: usize,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Face transmissibilities of the FV system: (east, north) per cell, plus the
/// Dirichlet conductances at the x=0 and x=1 faces per row.
struct HeatOperator<'a> {
    n: usize,
    d: &'a [f64],
}

impl HeatOperator<'_> {
    fn east(&self, iy: usize, ix: usize) -> f64 {
        harmonic(self.d[iy * self.n + ix], self.d[iy * self.n + ix + 1])
    }

    fn north(&self, iy: usize, ix: usize) -> f64 {
        harmonic(self.d[iy * self.n + ix], self.d[(iy + 1) * self.n + ix])
    }

    /// Half-cell conductance from a cell center to a Dirichlet face.
    fn wall(&self, iy: usize, ix: usize) -> f64 {
        2.0 * self.d[iy * self.n + ix]
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.iter_mut().for_each(|v| *v = 0.0);
        for iy in 0..n {
            for ix in 0..n {
                let k = iy * n + ix;
                if ix + 1 < n {
                    let t = self.east(iy, ix);
                    let flux = t * (u[k] - u[k + 1]);
                    out[k] += flux;
                    out[k + 1] -= flux;
                }
                if iy + 1 < n {
                    let t = self.north(iy, ix);
                    let flux = t * (u[k] - u[k + n]);
                    out[k] += flux;
                    out[k + n] -= flux;
                }
                if ix == 0 || ix == n - 1 {
                    out[k] += self.wall(iy, ix) * u[k];
                }
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let n = self.n;
        let mut diag = vec![0.0; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let k = iy * n + ix;
                if ix + 1 < n {
                    let t = self.east(iy, ix);
                    diag[k] += t;
                    diag[k + 1] += t;
                }
                if iy + 1 < n {
                    let t = self.north(iy, ix);
                    diag[k] += t;
                    diag[k + n] += t;
                }
                if ix == 0 || ix == n - 1 {
                    diag[k] += self.wall(iy, ix);
                }
            }
        }
        diag
    }

    fn rhs(&self) -> Vec<f64> {
        let n = self.n;
        let mut b = vec![0.0; n * n];
        for iy in 0..n {
            // u = 1 on the x = 0 face
            b[iy * n] += self.wall(iy, 0);
        }
        b
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve the steady diffusion problem to a relative residual of `1e-12`.
pub fn solve_heat2d(problem: &HeatProblem) -> Result<HeatSolution> {
    solve_heat2d_tol(problem, 1e-12)
}

pub fn solve_heat2d_tol(problem: &HeatProblem, rel_tol: f64) -> Result<HeatSolution> {
    problem.validate()?;
    let op = HeatOperator { n: problem.n, d: &problem.diffusivity };
    let size = problem.n * problem.n;
    let b = op.rhs();
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();
    let bnorm = dot(&b, &b).sqrt();

    let mut u = vec![0.0; size];
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; size];
    let mut rz = dot(&r, &z);
    let max_iter = 10 * size;
    for it in 0..max_iter {
        if dot(&r, &r).sqrt() <= rel_tol * bnorm {
            return Ok(HeatSolution { u, iterations: it });
        }
        op.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for k in 0..size {
            u[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        for k in 0..size {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..size {
            p[k] = z[k] + beta * p[k];
        }
    }
    if dot(&r, &r).sqrt() <= rel_tol * bnorm {
        return Ok(HeatSolution { u, iterations: max_iter });
    }
    Err(Error::numerical(format!("conjugate gradients did not converge in {max_iter} iterations")))
}

/// Total flux entering through `x = 0` and leaving through `x = 1`.
pub fn heat_boundary_fluxes(problem: &HeatProblem, u: &[f64]) -> (f64, f64) {
    let op = HeatOperator { n: problem.n, d: &problem.diffusivity };
    let n = problem.n;
    let mut inflow = 0.0;
    let mut outflow = 0.0;
    for iy in 0..n {
        inflow += op.wall(iy, 0) * (1.0 - u[iy * n]);
        outflow += op.wall(iy, n - 1) * u[iy * n + n - 1];
    }
    (inflow, outflow)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrusselatorParams {
    pub a: f64,
    pub b: f64,
    pub d0: f64,
    pub d1: f64,
    /// Cells per axis on the unit square.
    pub n: usize,
    pub horizon: f64,
    /// Reporting interval; snapshots must be multiples of it.
    pub report_dt: f64,
    pub snapshots: Vec<f64>,
    /// Upper bound on the internal IMEX step.
    pub max_substep: f64,
    /// Bound on `dt * |J_reaction|_inf` per substep.
    pub reaction_cfl: f64,
    /// Multiplies the internal substep count (2 halves the step).
    #[serde(default = "one")]
    pub refine: usize,
}

fn one() -> usize {
    1
}

impl Default for BrusselatorParams {
    fn default() -> Self {
        BrusselatorParams {
            a: 1.0,
            b: 3.0,
            d0: 1.0,
            d1: 0.1,
            n: 28,
            horizon: 1.0,
            report_dt: 0.01,
            snapshots: (1..=10).map(|k| k as f64 / 10.0).collect(),
            max_substep: 1e-3,
            reaction_cfl: 0.25,
            refine: 1,
        }
    }
}

impl BrusselatorParams {
    pub fn validate(&self) -> Result<()> {
        if ![self.a, self.b, self.d0, self.d1].iter().all(|&v| v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid("Brusselator constants must be nonnegative"));
        }
        if self.n == 0 || !(self.report_dt > 0.0) || !(self.horizon > 0.0) || !(self.max_substep > 0.0) {
            return Err(Error::invalid("Brusselator grid and time steps must be positive"));
        }
        if !(self.reaction_cfl > 0.0) || self.refine == 0 {
            return Err(Error::invalid("reaction CFL and refinement must be positive"));
        }
        for &t in &self.snapshots {
            let k = t / self.report_dt;
            if t < 0.0 || t > self.horizon + 1e-12 || (k - k.round()).abs() > 1e-9 {
                return Err(Error::invalid(format!("snapshot time {t} is not a reporting time")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BrusselatorProblem {
    pub params: BrusselatorParams,
    /// Initial `v`, flattened `iy * n + ix`; `u` starts at `a` everywhere.
    pub v0: Vec<f64>,
}

/// Implicit Euler diffusion on a cell-centered zero-flux grid, diagonalized
/// by the eigenbasis of the 1-D Neumann Laplacian.
#[derive(Debug, Clone)]
pub struct NeumannDiffusion {
    n: usize,
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl NeumannDiffusion {
    pub fn new(n: usize, h: f64) -> Result<Self> {
        let mut lap = DMatrix::zeros(n, n);
        for i in 0..n {
            if i > 0 {
                lap[(i, i - 1)] = 1.0;
                lap[(i, i)] -= 1.0;
            }
            if i + 1 < n {
                lap[(i, i + 1)] = 1.0;
                lap[(i, i)] -= 1.0;
            }
        }
        lap /= h * h;
        let (eigenvalues, basis) = linalg::sym_eig_desc(&lap)?;
        Ok(NeumannDiffusion { n, basis, eigenvalues })
    }

    /// Apply the 5-point zero-flux Laplacian.
    pub fn laplacian(&self, field: &[f64], h: f64) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let k = iy * n + ix;
                let mut acc = 0.0;
                if ix > 0 {
                    acc += field[k - 1] - field[k];
                }
                if ix + 1 < n {
                    acc += field[k + 1] - field[k];
                }
                if iy > 0 {
                    acc += field[k - n] - field[k];
                }
                if iy + 1 < n {
                    acc += field[k + n] - field[k];
                }
                out[k] = acc / (h * h);
            }
        }
        out
    }

    /// Solve `(I - c L) w = field` in place, `c = dt * D`.
    pub fn implicit_step(&self, field: &mut [f64], c: f64) {
        if c == 0.0 {
            return;
        }
        let n = self.n;
        let v = DMatrix::from_row_slice(n, n, field);
        let mut hat = self.basis.transpose() * v * &self.basis;
        for iy in 0..n {
            for ix in 0..n {
                hat[(iy, ix)] /= 1.0 - c * (self.eigenvalues[iy] + self.eigenvalues[ix]);
            }
        }
        let w = &self.basis * hat * self.basis.transpose();
        for iy in 0..n {
            for ix in 0..n {
                field[iy * n + ix] = w[(iy, ix)];
            }
        }
    }
}

/// Solve the Brusselator and return `v` at every snapshot time, concatenated
/// snapshot after snapshot (`snapshots.len() * n^2` values).
pub fn solve_brusselator2d(problem: &BrusselatorProblem) -> Result<Vec<f64>> {
    let p = &problem.params;
    p.validate()?;
    let cells = p.n * p.n;
    if problem.v0.len() != cells {
        return Err(Error::dim(format!("initial field has {} values for {cells} cells", problem.v0.len())));
    }
    let h = 1.0 / p.n as f64;
    let diffusion = NeumannDiffusion::new(p.n, h)?;
    let mut u = vec![p.a; cells];
    let mut v = problem.v0.clone();
    let mut out = Vec::with_capacity(p.snapshots.len() * cells);
    let reports = (p.horizon / p.report_dt).round() as usize;
    let snapshot_steps: Vec<usize> = p.snapshots.iter().map(|t| (t / p.report_dt).round() as usize).collect();

    // snapshots may be requested in any order; collect per step then reorder
    let mut by_step: Vec<(usize, Vec<f64>)> = Vec::new();
    if snapshot_steps.contains(&0) {
        by_step.push((0, v.clone()));
    }

    let mut ru = vec![0.0; cells];
    let mut rv = vec![0.0; cells];
    for step in 1..=reports {
        let jac = u
            .iter()
            .zip(&v)
            .map(|(&uu, &vv)| {
                let r1 = (-(1.0 + p.b) + 2.0 * uu * vv).abs() + uu * uu;
                let r2 = (p.b - 2.0 * uu * vv).abs() + uu * uu;
                r1.max(r2)
            })
            .fold(0.0f64, f64::max);
        let by_cap = (p.report_dt / p.max_substep - 1e-9).ceil().max(1.0);
        let by_cfl = (p.report_dt * jac / p.reaction_cfl - 1e-9).ceil().max(1.0);
        let substeps = by_cap.max(by_cfl) as usize * p.refine;
        let dt = p.report_dt / substeps as f64;
        for _ in 0..substeps {
            for k in 0..cells {
                let uv2 = v[k] * u[k] * u[k];
                ru[k] = p.a - (1.0 + p.b) * u[k] + uv2;
                rv[k] = p.b * u[k] - uv2;
            }
            for k in 0..cells {
                u[k] += dt * ru[k];
                v[k] += dt * rv[k];
            }
            diffusion.implicit_step(&mut u, dt * p.d0);
            diffusion.implicit_step(&mut v, dt * p.d1);
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!(
                "Brusselator state became non-finite at t = {}",
                step as f64 * p.report_dt
            )));
        }
        if snapshot_steps.contains(&step) {
            by_step.push((step, v.clone()));
        }
    }
    for &s in &snapshot_steps {
        let (_, snap) = by_step.iter().find(|(k, _)| *k == s).expect("snapshot recorded");
        out.extend_from_slice(snap);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn poisson_grid(t: usize) -> Vec<f64> {
        (0..t).map(|i| -1.0 + 2.0 * i as f64 / (t - 1) as f64).collect()
    }

    fn poisson_max_err(t: usize, f: impl Fn(f64) -> f64, exact: impl Fn(f64) -> f64) -> f64 {
        let x = poisson_grid(t);
        let u = solve_poisson1d(&PoissonProblem { points: t, forcing: x.iter().map(|&x| f(x)).collect() }).unwrap();
        x.iter().zip(&u).map(|(&x, &u)| (u - exact(x)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn poisson_analytic_cases() {
        let u = solve_poisson1d(&PoissonProblem { points: 1024, forcing: vec![0.0; 1024] }).unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
        let e = poisson_max_err(1024, |x| (PI * x).sin(), |x| (PI * x).sin() / (PI * PI));
        assert!(e < 1e-4, "sin case error {e}");
        let e = poisson_max_err(1024, |_| 1.0, |x| (1.0 - x * x) / 2.0);
        assert!(e < 1e-6, "quadratic case error {e}");
    }

    #[test]
    fn poisson_second_order() {
        let f = |x: f64| (PI * x).sin();
        let exact = |x: f64| (PI * x).sin() / (PI * PI);
        let e1 = poisson_max_err(65, f, exact);
        let e2 = poisson_max_err(129, f, exact);
        let order = (e1 / e2).log2();
        assert!((1.8..=2.2).contains(&order), "observed order {order}");
    }

    #[test]
    fn poisson_validation() {
        assert!(solve_poisson1d(&PoissonProblem { points: 2, forcing: vec![0.0; 2] }).is_err());
        assert!(solve_poisson1d(&PoissonProblem { points: 5, forcing: vec![0.0; 4] }).is_err());
    }

    #[test]
    fn heat_constant_diffusivity_is_linear() {
        let n = 32;
        let sol = solve_heat2d(&HeatProblem { n, diffusivity: vec![2.5; n * n] }).unwrap();
        for iy in 0..n {
            for ix in 0..n {
                let x = (ix as f64 + 0.5) / n as f64;
                assert!((sol.u[iy * n + ix] - (1.0 - x)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn heat_two_slab_series_resistance() {
        let n = 32;
        let (d1, d2) = (1.0, 4.0);
        let d: Vec<f64> = (0..n * n).map(|k| if (k % n) < n / 2 { d1 } else { d2 }).collect();
        let sol = solve_heat2d(&HeatProblem { n, diffusivity: d }).unwrap();
        // u at the interface from two resistors of length 1/2 in series
        let r1 = 0.5 / d1;
        let r2 = 0.5 / d2;
        let u_mid = r2 / (r1 + r2);
        let left = sol.u[n / 2 - 1];
        let right = sol.u[n / 2];
        let interface = 0.5 * (left + right);
        // cell-center values straddle the interface; correct for the half-cell gradients
        let q = 1.0 / (r1 + r2);
        let h = 1.0 / n as f64;
        let from_left = left - q * 0.5 * h / d1;
        let from_right = right + q * 0.5 * h / d2;
        assert!((from_left - u_mid).abs() < 1e-3, "{from_left} vs {u_mid}");
        assert!((from_right - u_mid).abs() < 1e-3, "{from_right} vs {u_mid}");
        assert!((interface - u_mid).abs() < 0.05);
    }

    #[test]
    fn heat_flux_balance_and_bounds() {
        let n = 16;
        let d: Vec<f64> = (0..n * n).map(|k| (0.7 * ((k * 37 % 11) as f64 - 5.0)).exp()).collect();
        let problem = HeatProblem { n, diffusivity: d };
        let sol = solve_heat2d(&problem).unwrap();
        let (fin, fout) = heat_boundary_fluxes(&problem, &sol.u);
        assert!((fin - fout).abs() <= 1e-8 * fin.abs());
        assert!(sol.u.iter().all(|&u| (-1e-12..=1.0 + 1e-12).contains(&u)));
    }

    #[test]
    fn heat_rejects_nonpositive_diffusivity() {
        let err = solve_heat2d(&HeatProblem { n: 2, diffusivity: vec![1.0, 0.0, 1.0, 1.0] });
        assert!(matches!(err, Err(Error::Invalid(_))));
    }

    #[test]
    fn diffusion_step_conserves_mean() {
        let n = 12;
        let h = 1.0 / n as f64;
        let diff = NeumannDiffusion::new(n, h).unwrap();
        let mut f: Vec<f64> = (0..n * n).map(|k| ((k * 7919) % 97) as f64 / 97.0).collect();
        let mean0: f64 = f.iter().sum::<f64>() / (n * n) as f64;
        for _ in 0..50 {
            diff.implicit_step(&mut f, 0.01);
            let mean: f64 = f.iter().sum::<f64>() / (n * n) as f64;
            assert!((mean - mean0).abs() < 1e-10);
        }
    }

    #[test]
    fn diffusion_step_inverts_operator() {
        let n = 6;
        let h = 1.0 / n as f64;
        let diff = NeumannDiffusion::new(n, h).unwrap();
        let rhs: Vec<f64> = (0..n * n).map(|k| (k as f64).sin()).collect();
        let mut w = rhs.clone();
        let c = 0.003;
        diff.implicit_step(&mut w, c);
        let lw = diff.laplacian(&w, h);
        for k in 0..n * n {
            assert!((w[k] - c * lw[k] - rhs[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn brusselator_fixed_point_is_stationary() {
        let params = BrusselatorParams { horizon: 0.1, snapshots: vec![0.05, 0.1], ..Default::default() };
        let cells = params.n * params.n;
        let out = solve_brusselator2d(&BrusselatorProblem { v0: vec![3.0; cells], params }).unwrap();
        assert!(out.iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn brusselator_rejects_misaligned_snapshots() {
        let params = BrusselatorParams { snapshots: vec![0.123], ..Default::default() };
        let cells = params.n * params.n;
        assert!(solve_brusselator2d(&BrusselatorProblem { v0: vec![0.0; cells], params }).is_err());
    }
}
