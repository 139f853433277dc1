//! Implicit-Euler evolution of `∂_t u = L_h u` and the certification suite:
//! dissipativity margins, duality-set pairings and exhaustive sign-pattern
//! checks.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::rng::stream_rng;
use crate::sparse::SparseOperator;

pub const MAX_SOLVER_ITERATIONS: usize = 10_000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Jacobi-preconditioned BiCGSTAB for `A x = b` starting from `x`.
/// Converged when `Σ|b - A x| ≤ target`. Returns the iteration count.
fn bicgstab(a: &SparseOperator, inv_diag: &[f64], b: &[f64], x: &mut [f64], target: f64) -> Result<usize> {
    let n = b.len();
    let mut ax = a.apply(x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
    if l1(&r) <= target {
        return Ok(0);
    }
    let mut r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut restart = false;
    for it in 1..=MAX_SOLVER_ITERATIONS {
        let rho_new = dot(&r_hat, &r);
        if restart || rho_new == 0.0 || omega == 0.0 {
            // breakdown or drifted recursive residual: restart from the true residual
            restart = false;
            a.apply_into(x, &mut ax);
            for i in 0..n {
                r[i] = b[i] - ax[i];
            }
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            v.iter_mut().for_each(|e| *e = 0.0);
            p.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            p_hat[i] = inv_diag[i] * p[i];
        }
        a.apply_into(&p_hat, &mut v);
        let denom = dot(&r_hat, &v);
        if denom == 0.0 {
            omega = 0.0;
            continue;
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if l1(&s) <= target {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            if true_residual(a, b, x, &mut ax) <= target {
                return Ok(it);
            }
            restart = true;
            continue;
        }
        for i in 0..n {
            s_hat[i] = inv_diag[i] * s[i];
        }
        a.apply_into(&s_hat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        if l1(&r) <= target {
            if true_residual(a, b, x, &mut ax) <= target {
                return Ok(it);
            }
            restart = true;
        }
    }
    Err(Error::SolverDiverged { iterations: MAX_SOLVER_ITERATIONS, residual: true_residual(a, b, x, &mut ax) })
}

fn true_residual(a: &SparseOperator, b: &[f64], x: &[f64], scratch: &mut [f64]) -> f64 {
    a.apply_into(x, scratch);
    b.iter().zip(scratch.iter()).map(|(b, ax)| (b - ax).abs()).sum()
}

/// The resolvent system `(I - dt L_h) v = u`, factored once per `dt`.
pub struct ImplicitEuler {
    system: SparseOperator,
    inv_diag: Vec<f64>,
    pub dt: f64,
    pub tol: f64,
}

impl ImplicitEuler {
    pub fn new(l: &SparseOperator, dt: f64, tol: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("time step dt={dt} must be positive")));
        }
        if !(tol > 0.0) {
            return Err(Error::invalid(format!("solver tolerance {tol} must be positive")));
        }
        let system = l.scale(-dt).shift_identity(1.0);
        let inv_diag = system.diagonal().into_iter().map(|d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
        Ok(ImplicitEuler { system, inv_diag, dt, tol })
    }

    /// Solves to `‖u - (I - dt L)v‖₁ ≤ tol·‖u‖₁`; returns `v` and the
    /// iteration count.
    pub fn step(&self, u: &GridFunction) -> Result<(GridFunction, usize)> {
        if u.values.len() != self.system.dim() {
            return Err(Error::Dimension { expected: self.system.dim(), got: u.values.len() });
        }
        let mut v = u.values.clone();
        let target = self.tol * l1(&u.values);
        let iterations = bicgstab(&self.system, &self.inv_diag, &u.values, &mut v, target)?;
        Ok((GridFunction { grid: u.grid, values: v }, iterations))
    }
}

/// One resolvent step `v = (I - dt L_h)⁻¹ u`.
pub fn step_implicit_euler(l: &SparseOperator, u: &GridFunction, dt: f64, tol: f64) -> Result<GridFunction> {
    Ok(ImplicitEuler::new(l, dt, tol)?.step(u)?.0)
}

#[derive(Clone, Debug)]
pub struct EvolveOptions {
    pub tol: f64,
    /// Width (in cells) of the boundary layer monitored for escaping mass.
    pub boundary_cells: usize,
    /// Largest tolerated `‖u‖₁` inside the boundary layer, relative to `‖u0‖₁`.
    pub boundary_tol: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions { tol: 1e-12, boundary_cells: 2, boundary_tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct EvolutionReport {
    pub times: Vec<f64>,
    pub l1_norms: Vec<f64>,
    pub masses: Vec<f64>,
    pub min_values: Vec<f64>,
    pub boundary_mass: Vec<f64>,
    pub iterations: Vec<usize>,
    pub final_state: GridFunction,
}

impl EvolutionReport {
    /// Largest relative per-step growth `‖u_{n+1}‖₁ / ‖u_n‖₁ - 1`.
    pub fn max_norm_growth(&self) -> f64 {
        self.l1_norms.windows(2).map(|w| w[1] / w[0] - 1.0).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_contractive(&self, rel: f64) -> bool {
        self.l1_norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + rel))
    }

    pub fn max_mass_drift(&self) -> f64 {
        let m0 = self.masses[0];
        self.masses.iter().map(|m| (m - m0).abs()).fold(0.0, f64::max)
    }

    /// Most negative value reached, relative to `‖u0‖_∞`.
    pub fn worst_negativity(&self, u0_sup: f64) -> f64 {
        self.min_values.iter().copied().fold(0.0, f64::min) / u0_sup
    }

    /// Columns `step,time,l1_norm,mass,min_value,boundary_mass,iterations`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "time", "l1_norm", "mass", "min_value", "boundary_mass", "iterations"])?;
        for k in 0..self.times.len() {
            out.write_record([
                k.to_string(),
                format!("{:.10e}", self.times[k]),
                format!("{:.16e}", self.l1_norms[k]),
                format!("{:.16e}", self.masses[k]),
                format!("{:.16e}", self.min_values[k]),
                format!("{:.16e}", self.boundary_mass[k]),
                self.iterations[k].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn boundary_norm(u: &GridFunction, cells: usize) -> f64 {
    let g = &u.grid;
    g.cell_volume()
        * u.values
            .iter()
            .enumerate()
            .filter(|(i, _)| g.cells_to_boundary(*i) < cells)
            .map(|(_, v)| v.abs())
            .sum::<f64>()
}

/// Evolves `u0`, normalized to `‖u0‖₁ = 1`, over `[0, T]` by implicit Euler.
pub fn evolve(l: &SparseOperator, u0: &GridFunction, t_end: f64, dt: f64, opts: &EvolveOptions) -> Result<EvolutionReport> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::invalid(format!("final time T={t_end} must be positive")));
    }
    if u0.values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("initial density must be finite and nonnegative"));
    }
    let norm0 = u0.norm_1();
    if norm0 == 0.0 {
        return Err(Error::invalid("initial density is identically zero"));
    }
    let n_steps = (t_end / dt).round().max(1.0) as usize;
    let dt = t_end / n_steps as f64;
    let stepper = ImplicitEuler::new(l, dt, opts.tol)?;
    let mut u = GridFunction { grid: u0.grid, values: u0.values.iter().map(|v| v / norm0).collect() };
    let mut report = EvolutionReport {
        times: vec![0.0],
        l1_norms: vec![u.norm_1()],
        masses: vec![u.mass()],
        min_values: vec![u.min()],
        boundary_mass: vec![boundary_norm(&u, opts.boundary_cells)],
        iterations: vec![0],
        final_state: u.clone(),
    };
    for k in 1..=n_steps {
        let time = k as f64 * dt;
        let (next, its) = stepper.step(&u).map_err(|e| Error::Step { time, source: Box::new(e) })?;
        u = next;
        let edge = boundary_norm(&u, opts.boundary_cells);
        report.times.push(time);
        report.l1_norms.push(u.norm_1());
        report.masses.push(u.mass());
        report.min_values.push(u.min());
        report.boundary_mass.push(edge);
        report.iterations.push(its);
        if edge > opts.boundary_tol {
            report.final_state = u;
            return Err(Error::Step {
                time,
                source: Box::new(Error::SupportMargin(format!(
                    "‖u‖₁ within {} cells of the boundary reached {edge:e}",
                    opts.boundary_cells
                ))),
            });
        }
    }
    report.final_state = u;
    Ok(report)
}

/// Norm in which dissipativity is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    /// h^d-weighted L¹, for forward operators.
    L1,
    /// Sup norm, for generators.
    LInf,
}

impl Norm {
    pub fn of(self, u: &GridFunction) -> f64 {
        match self {
            Norm::L1 => u.norm_1(),
            Norm::LInf => u.norm_inf(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DissipativityReport {
    pub lambda: f64,
    /// `‖(λ - B)u‖ - λ‖u‖` per test function.
    pub margins: Vec<f64>,
    /// `‖u‖` per test function.
    pub norms: Vec<f64>,
    pub min_margin: f64,
}

impl DissipativityReport {
    /// Most negative `margin / ‖u‖`, or 0 if every margin is nonnegative.
    pub fn worst_relative_deficit(&self) -> f64 {
        self.margins.iter().zip(&self.norms).map(|(m, n)| (m / n).min(0.0)).fold(0.0, f64::min)
    }
}

/// Writes `operator,lambda,function,norm,margin` rows for labelled reports.
pub fn write_dissipativity_csv<W: Write>(reports: &[(&str, &DissipativityReport)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["operator", "lambda", "function", "norm", "margin"])?;
    for (label, r) in reports {
        for (k, (m, n)) in r.margins.iter().zip(&r.norms).enumerate() {
            out.write_record([
                label.to_string(),
                format!("{:.6e}", r.lambda),
                k.to_string(),
                format!("{n:.16e}"),
                format!("{m:.16e}"),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Random smooth bump functions: sums of up to five Gaussians with random
/// signs, widths in `[4h, max(4h, max_width)]`, centers in `[-R, R]^d`, cut
/// to zero beyond four widths. Support stays within `R + 4 max(4h, max_width)`.
#[derive(Clone, Debug)]
pub struct BumpFamily {
    pub center_radius: f64,
    pub max_width: f64,
    pub seed: u64,
    pub signed: bool,
}

impl BumpFamily {
    pub fn sample(&self, grid: &Grid, index: u64) -> GridFunction {
        let mut rng = stream_rng(self.seed, index);
        let h = grid.h;
        let w_max = (4.0 * h).max(self.max_width);
        let n_bumps = rng.random_range(1..=5);
        let bumps: Vec<(Vec<f64>, f64, f64)> = (0..n_bumps)
            .map(|_| {
                let c: Vec<f64> = (0..grid.d).map(|_| rng.random_range(-self.center_radius..=self.center_radius)).collect();
                let width = rng.random_range(4.0 * h..=w_max);
                let sign = if self.signed && rng.random_bool(0.5) { -1.0 } else { 1.0 };
                let amp = sign * rng.random_range(0.5..=1.5);
                (c, width, amp)
            })
            .collect();
        GridFunction::from_fn(*grid, |x| {
            bumps
                .iter()
                .map(|(c, width, amp)| {
                    let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (width * width);
                    if r2 > 16.0 {
                        0.0
                    } else {
                        amp * (-0.5 * r2).exp()
                    }
                })
                .sum()
        })
    }
}

/// Margins `‖(λ - op)u‖ - λ‖u‖` over `n_functions` test functions and each λ.
pub fn dissipativity_check(
    op: &SparseOperator,
    grid: &Grid,
    lambdas: &[f64],
    n_functions: usize,
    family: &BumpFamily,
    norm: Norm,
) -> Result<Vec<DissipativityReport>> {
    if op.dim() != grid.len() {
        return Err(Error::Dimension { expected: grid.len(), got: op.dim() });
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::invalid(format!("λ={l} must be positive")));
    }
    // (u, op·u, ‖u‖) per test function
    let data: Vec<(GridFunction, Vec<f64>, f64)> = (0..n_functions as u64)
        .into_par_iter()
        .map(|k| {
            let u = family.sample(grid, k);
            let bu = op.apply(&u.values);
            let nu = norm.of(&u);
            (u, bu, nu)
        })
        .collect();
    Ok(lambdas
        .iter()
        .map(|&lambda| {
            let (margins, norms): (Vec<f64>, Vec<f64>) = data
                .iter()
                .map(|(u, bu, nu)| {
                    let res = GridFunction {
                        grid: *grid,
                        values: u.values.iter().zip(bu).map(|(a, b)| lambda * a - b).collect(),
                    };
                    (norm.of(&res) - lambda * nu, *nu)
                })
                .unzip();
            let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
            DissipativityReport { lambda, margins, norms, min_margin }
        })
        .collect())
}

/// `⟨J_r u, f_u⟩_h` with `f_u = ‖u‖₁ sign(u)`, `sign(0) = 0`.
pub fn duality_set_pairing(jr: &SparseOperator, u: &GridFunction) -> Result<f64> {
    let n1 = u.norm_1();
    if n1 == 0.0 {
        return Err(Error::invalid("duality set of the zero function"));
    }
    let f = GridFunction {
        grid: u.grid,
        values: u.values.iter().map(|v| if *v == 0.0 { 0.0 } else { n1 * v.signum() }).collect(),
    };
    let ju = GridFunction { grid: u.grid, values: jr.apply(&u.values) };
    ju.pairing(&f)
}

#[derive(Clone, Debug)]
pub struct ExhaustiveReport {
    pub cases: usize,
    pub violations: usize,
    /// Smallest `‖(λ - op)u‖₁ - λ‖u‖₁` over all patterns and λ.
    pub min_margin: f64,
}

/// Checks `‖(λ - op)u‖₁ ≥ λ‖u‖₁ - tol` for every `u ∈ {-1, 0, 1}^N`, N ≤ 12.
pub fn exhaustive_sign_check(op: &SparseOperator, lambdas: &[f64], tol: f64) -> Result<ExhaustiveReport> {
    let n = op.dim();
    if n > 12 {
        return Err(Error::invalid(format!("exhaustive check limited to N ≤ 12, got {n}")));
    }
    let total = 3usize.pow(n as u32);
    let (violations, min_margin) = (0..total)
        .into_par_iter()
        .map(|mut code| {
            let u: Vec<f64> = (0..n)
                .map(|_| {
                    let digit = code % 3;
                    code /= 3;
                    digit as f64 - 1.0
                })
                .collect();
            let bu = op.apply(&u);
            let nu = l1(&u);
            let mut bad = 0usize;
            let mut worst = f64::INFINITY;
            for &lambda in lambdas {
                let res: f64 = u.iter().zip(&bu).map(|(a, b)| (lambda * a - b).abs()).sum();
                let margin = res - lambda * nu;
                worst = worst.min(margin);
                if margin < -tol {
                    bad += 1;
                }
            }
            (bad, worst)
        })
        .reduce(|| (0, f64::INFINITY), |a, b| (a.0 + b.0, a.1.min(b.1)));
    Ok(ExhaustiveReport { cases: total * lambdas.len(), violations, min_margin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::OperatorPart;
    use approx::assert_abs_diff_eq;

    fn bump(g: Grid, c: f64, w: f64) -> GridFunction {
        GridFunction::from_fn(g, |x| (-(x[0] - c).powi(2) / (2.0 * w * w)).exp())
    }

    #[test]
    fn zero_operator_step_is_identity() {
        let g = Grid::new(1, 1.0, 0.1).unwrap();
        let u = bump(g, 0.0, 0.2);
        let v = step_implicit_euler(&SparseOperator::zero(g.len(), OperatorPart::L), &u, 0.1, 1e-12).unwrap();
        assert_eq!(v, u);
    }

    #[test]
    fn scalar_resolvent() {
        let g = Grid::new(1, 1.0, 0.1).unwrap();
        let l = SparseOperator::zero(g.len(), OperatorPart::Other).shift_identity(-2.0);
        let u = bump(g, 0.1, 0.3);
        let v = step_implicit_euler(&l, &u, 0.5, 1e-13).unwrap();
        for (a, b) in v.values.iter().zip(&u.values) {
            assert_abs_diff_eq!(*a, b / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_operator_evolution_keeps_everything() {
        let g = Grid::new(1, 2.0, 0.1).unwrap();
        let u = bump(g, 0.0, 0.2);
        let rep = evolve(&SparseOperator::zero(g.len(), OperatorPart::L), &u, 1.0, 0.1, &EvolveOptions::default()).unwrap();
        assert_eq!(rep.times.len(), 11);
        assert!(rep.l1_norms.iter().all(|n| (n - 1.0).abs() < 1e-14));
        assert_abs_diff_eq!(rep.final_state.norm_1(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn breakdown_free_on_nonsymmetric_system() {
        // upwind transport with a strong sink
        let n = 50;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, -3.0));
            if i > 0 {
                t.push((i, i - 1, 2.0));
            }
        }
        let l = SparseOperator::from_triplets(n, &t, OperatorPart::Other).unwrap();
        let g = Grid::new(1, 4.9 / 2.0, 0.1).unwrap();
        let u = GridFunction::from_fn(g, |x| 1.0 + x[0].sin());
        let (v, its) = ImplicitEuler::new(&l, 0.7, 1e-13).unwrap().step(&u).unwrap();
        assert!(its > 0);
        let back = l.scale(-0.7).shift_identity(1.0).apply(&v.values);
        for (a, b) in back.iter().zip(&u.values) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_operator_margins_vanish() {
        let g = Grid::new(1, 2.0, 0.05).unwrap();
        let fam = BumpFamily { center_radius: 1.0, max_width: 0.3, seed: 3, signed: true };
        let reps = dissipativity_check(&SparseOperator::zero(g.len(), OperatorPart::Other), &g, &[0.5, 2.0], 10, &fam, Norm::L1).unwrap();
        for r in reps {
            assert!(r.margins.iter().all(|m| m.abs() < 1e-12));
        }
    }

    #[test]
    fn margins_obey_lambda_scaling() {
        let g = Grid::new(1, 2.0, 0.05).unwrap();
        let fam = BumpFamily { center_radius: 1.0, max_width: 0.3, seed: 9, signed: true };
        let n = g.len();
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, -1.0));
            if i + 3 < n {
                t.push((i, i + 3, 0.8));
            }
            if i > 0 {
                t.push((i, i - 1, -0.3));
            }
        }
        let op = SparseOperator::from_triplets(n, &t, OperatorPart::Other).unwrap();
        let reps = dissipativity_check(&op, &g, &[1.0, 2.0], 20, &fam, Norm::L1).unwrap();
        for k in 0..20 {
            let diff = (reps[1].margins[k] - reps[0].margins[k]).abs();
            assert!(diff <= reps[0].norms[k] + 1e-12);
        }
    }

    #[test]
    fn bumps_are_deterministic_and_vanish_near_the_edge() {
        let g = Grid::new(1, 4.0, 0.05).unwrap();
        let fam = BumpFamily { center_radius: 2.0, max_width: 0.4, seed: 1, signed: true };
        assert_eq!(fam.sample(&g, 4), fam.sample(&g, 4));
        assert_ne!(fam.sample(&g, 4), fam.sample(&g, 5));
        let u = fam.sample(&g, 4);
        assert_eq!(u.values[0], 0.0);
        assert_eq!(*u.values.last().unwrap(), 0.0);
    }

    #[test]
    fn duality_pairing_single_node() {
        let g = Grid::new(1, 0.4, 0.1).unwrap();
        let n = g.len();
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, -0.5));
            if i + 2 < n {
                t.push((i + 2, i, 0.5));
            }
        }
        let jr = SparseOperator::from_triplets(n, &t, OperatorPart::Jr).unwrap();
        let mut u = GridFunction::zeros(g);
        u.values[3] = -2.0;
        let v = duality_set_pairing(&jr, &u).unwrap();
        let n1 = u.norm_1();
        assert_abs_diff_eq!(v, n1 * 2.0 * g.h * -0.5, epsilon = 1e-15);
    }

    #[test]
    fn exhaustive_check_flags_anti_dissipative_operator() {
        let good = SparseOperator::from_triplets(3, &[(0, 0, -1.0), (1, 0, 1.0), (1, 1, -0.5)], OperatorPart::Other).unwrap();
        let rep = exhaustive_sign_check(&good, &[1.0], 1e-12).unwrap();
        assert_eq!(rep.cases, 27);
        assert_eq!(rep.violations, 0);
        let bad = good.scale(-1.0);
        assert!(exhaustive_sign_check(&bad, &[1.0], 1e-12).unwrap().violations > 0);
    }
}
