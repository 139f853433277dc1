//! Discrete Fokker-Planck operator `L_h = A_r + I_r + J_r` and generator
//! `L*_h = A_r* + I_r* + J_r*` on a truncated grid.
//!
//! * `A_r` is the local part in divergence form; its drift carries the
//!   compensator of the jumps with `r ≤ |z| < 1`.
//! * `I_r` is assembled from the inverse flow `y(x, z)`, `q(x, z)`,
//!   `m(x, z)` of the small jumps. The pushed-forward density
//!   `u(x - q(x, z)) m(x, z)` is evaluated as the cell average of the
//!   interpolant over the preimage of the cell around `x`, which keeps the
//!   discrete operator mass conservative.
//! * `J_r` has no formula of its own: it is the transpose of the assembled
//!   `J_r*`.
//!
//! All central differences are second order; functions vanish outside the
//! box.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::inverse_flow::{admissible_radius, solve_inverse};
use crate::model::{eval_coefficients, SdeModel};
use crate::quadrature::QuadratureSplit;
use crate::rng::norm;
use crate::sparse::{OperatorPart, SparseOperator};

const INVERSE_TOL: f64 = 1e-13;

/// `∫_{r ≤ |z| < 1} p(x, z) ν(dz)` from the outer quadrature nodes.
pub fn drift_correction(model: &SdeModel, quad: &QuadratureSplit, x: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; model.d];
    let mut p = vec![0.0; model.d];
    for node in quad.outer.iter().filter(|n| norm(&n.z) < 1.0) {
        model.jump_into(x, &node.z, &mut p);
        for (a, pi) in acc.iter_mut().zip(&p) {
            *a += node.w * pi;
        }
    }
    acc
}

struct NodeCoefficients {
    a: nalgebra::DMatrix<f64>,
    /// b - ∫_{r≤|z|<1} p ν(dz)
    drift: Vec<f64>,
}

fn node_coefficients(model: &SdeModel, grid: &Grid, quad: &QuadratureSplit) -> Result<Vec<NodeCoefficients>> {
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.node(i);
            let c = eval_coefficients(model, &x).map_err(|e| Error::Assembly { node: i, source: Box::new(e) })?;
            let corr = drift_correction(model, quad, &x);
            let drift: Vec<f64> = c.b.iter().zip(&corr).map(|(b, k)| b - k).collect();
            if drift.iter().any(|v| !v.is_finite()) {
                return Err(Error::Assembly {
                    node: i,
                    source: Box::new(Error::NonFinite { coefficient: "p", point: x }),
                });
            }
            Ok(NodeCoefficients { a: c.a, drift })
        })
        .collect()
}

fn check_grid(model: &SdeModel, grid: &Grid) -> Result<()> {
    if grid.d != model.d {
        return Err(Error::Dimension { expected: model.d, got: grid.d });
    }
    Ok(())
}

/// `A_r u = ½ Σ ∂_i∂_j (a_ij u) - div[(b - ∫_{r≤|z|<1} p ν(dz)) u]`.
pub fn assemble_ar(model: &SdeModel, grid: &Grid, quad: &QuadratureSplit) -> Result<SparseOperator> {
    check_grid(model, grid)?;
    let coef = node_coefficients(model, grid, quad)?;
    let h = grid.h;
    let d = grid.d;
    let rows = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::with_capacity(1 + 2 * d + 4 * d * d);
            for a in 0..d {
                row.push((i, -coef[i].a[(a, a)] / (h * h)));
                for s in [-1isize, 1] {
                    if let Some(n) = grid.neighbor(i, a, s) {
                        let diff = 0.5 * coef[n].a[(a, a)] / (h * h);
                        let flux = -(s as f64) * coef[n].drift[a] / (2.0 * h);
                        row.push((n, diff + flux));
                    }
                }
                for b in (a + 1)..d {
                    for (sa, sb) in [(1isize, 1isize), (1, -1), (-1, 1), (-1, -1)] {
                        if let Some(n) = grid.neighbor(i, a, sa).and_then(|n| grid.neighbor(n, b, sb)) {
                            row.push((n, (sa * sb) as f64 * coef[n].a[(a, b)] / (4.0 * h * h)));
                        }
                    }
                }
            }
            row
        })
        .collect();
    Ok(SparseOperator::from_rows(grid.len(), rows, OperatorPart::Ar)?.with_radius(quad.r))
}

/// `A_r* f = (b - ∫_{r≤|z|<1} p ν(dz))ᵀ Df + ½ Σ a_ij ∂_i∂_j f`.
pub fn assemble_ar_star(model: &SdeModel, grid: &Grid, quad: &QuadratureSplit) -> Result<SparseOperator> {
    check_grid(model, grid)?;
    let coef = node_coefficients(model, grid, quad)?;
    let h = grid.h;
    let d = grid.d;
    let rows = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let c = &coef[i];
            let mut row = Vec::with_capacity(1 + 2 * d + 4 * d * d);
            for a in 0..d {
                row.push((i, -c.a[(a, a)] / (h * h)));
                for s in [-1isize, 1] {
                    if let Some(n) = grid.neighbor(i, a, s) {
                        row.push((n, 0.5 * c.a[(a, a)] / (h * h) + s as f64 * c.drift[a] / (2.0 * h)));
                    }
                }
                for b in (a + 1)..d {
                    for (sa, sb) in [(1isize, 1isize), (1, -1), (-1, 1), (-1, -1)] {
                        if let Some(n) = grid.neighbor(i, a, sa).and_then(|n| grid.neighbor(n, b, sb)) {
                            row.push((n, (sa * sb) as f64 * c.a[(a, b)] / (4.0 * h * h)));
                        }
                    }
                }
            }
            row
        })
        .collect();
    Ok(SparseOperator::from_rows(grid.len(), rows, OperatorPart::ArStar)?.with_radius(quad.r))
}

/// Central-difference gradient stencil `Σ_a g_a D_a` at node `i`.
fn push_gradient(row: &mut Vec<(usize, f64)>, grid: &Grid, i: usize, g: &[f64], scale: f64) {
    for (a, ga) in g.iter().enumerate() {
        for s in [-1isize, 1] {
            if let Some(n) = grid.neighbor(i, a, s) {
                row.push((n, scale * s as f64 * ga / (2.0 * grid.h)));
            }
        }
    }
}

/// Small-jump part of the forward operator,
///
/// ```text
/// I_r u(x) = ∫_{|z|<r} [u(x-q) - u(x) + Du(x)·q] m ν(dz)
///          + Du(x)ᵀ ∫_{|z|<r} [p(x,z) - q m] ν(dz)
///          + u(x) ∫_{|z|<r} [m + div_x p(x,z) - 1] ν(dz).
/// ```
///
/// Expanding the brackets, the terms in `m` alone cancel and each
/// quadrature node contributes `T u - u + Du·p + u div_x p`, where
/// `T u(x) = u(x - q) m` is the pushed-forward density. `T u` is the cell
/// average of the interpolant over the preimage of the cell around `x`
/// (the box with faces `x ± h/2 e_a - q(x ± h/2 e_a)`), corrected by the
/// same average over the unshifted cell so that `T = I` at `z = 0`; the
/// difference is formed axis by axis in closed form, without cancellation.
/// In one dimension (and for componentwise maps in any dimension) the
/// preimages tile the box, so interior columns sum to zero exactly.
pub fn assemble_ir(model: &SdeModel, grid: &Grid, quad: &QuadratureSplit) -> Result<SparseOperator> {
    check_grid(model, grid)?;
    let n = grid.len();
    if quad.inner.is_empty() || model.jump_is_zero() {
        return Ok(SparseOperator::zero(n, OperatorPart::Ir).with_radius(quad.r));
    }
    let r0 = admissible_radius(model);
    if quad.r >= r0 {
        return Err(Error::invalid(format!("split radius r={} must be below r0=1/(8dK)={r0}", quad.r)));
    }
    let d = grid.d;
    let h = grid.h;
    let rows: Result<Vec<_>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let wrap = |e: Error| Error::Assembly { node: i, source: Box::new(e) };
            let x = grid.node(i);
            let multi = grid.multi_index(i);
            let mut row = Vec::new();
            let mut face = x.clone();
            let mut p = vec![0.0; d];
            let mut pp = vec![0.0; d];
            let mut pm = vec![0.0; d];
            let mut shifts = vec![(0.0, 0.0); d];
            for node in &quad.inner {
                let z = &node.z;
                let w = node.w;
                for a in 0..d {
                    face[a] = x[a] - 0.5 * h;
                    let below = solve_inverse(model, &face, z, INVERSE_TOL).map_err(wrap)?;
                    face[a] = x[a] + 0.5 * h;
                    let above = solve_inverse(model, &face, z, INVERSE_TOL).map_err(wrap)?;
                    face[a] = x[a];
                    shifts[a] = (below.q[a], above.q[a]);
                }
                // T u - u
                for (k, c) in remap_increment(grid, &multi, &shifts) {
                    row.push((k, w * c));
                }
                // Du·p + u div_x p
                model.jump_into(&x, z, &mut p);
                push_gradient(&mut row, grid, i, &p, w);
                let mut div = 0.0;
                for a in 0..d {
                    face[a] = x[a] + h;
                    model.jump_into(&face, z, &mut pp);
                    face[a] = x[a] - h;
                    model.jump_into(&face, z, &mut pm);
                    face[a] = x[a];
                    div += (pp[a] - pm[a]) / (2.0 * h);
                }
                row.push((i, w * div));
            }
            Ok(row)
        })
        .collect();
    Ok(SparseOperator::from_rows(n, rows?, OperatorPart::Ir)?.with_radius(quad.r))
}

/// Weights of `T u - u` at the node with multi-index `multi`, where the
/// preimage window on axis `a` is `[x_a - h/2 - lo_a, x_a + h/2 - hi_a]`
/// for `shifts[a] = (lo_a, hi_a)`.
///
/// Per axis the window average is `S_a + Δ_a`, with `S_a = (1, 6, 1)/8` the
/// unshifted average; `T - I` is `⊗(S_a + Δ_a) - ⊗S_a`, the sum over
/// nonempty axis subsets of products with at least one `Δ_a`.
fn remap_increment(grid: &Grid, multi: &[usize], shifts: &[(f64, f64)]) -> Vec<(usize, f64)> {
    let h = grid.h;
    let top = grid.n_per_axis - 1;
    let in_range = |v: Vec<(isize, f64)>| -> Vec<(usize, f64)> {
        v.into_iter()
            .filter(|&(j, _)| j >= 0 && j as usize <= top)
            .map(|(j, c)| (j as usize, c))
            .collect()
    };
    let mut unshifted = Vec::with_capacity(multi.len());
    let mut delta = Vec::with_capacity(multi.len());
    for (&j, &(lo, hi)) in multi.iter().zip(shifts) {
        let j = j as isize;
        let s = in_range(vec![(j - 1, 0.125), (j, 0.75), (j + 1, 0.125)]);
        let (al, be) = (lo / h, hi / h);
        let d = if al.abs() <= 0.5 && be.abs() <= 0.5 {
            in_range(vec![
                (j - 1, 0.5 * al + 0.5 * al * al),
                (j, 0.5 * al - 0.5 * al * al - 0.5 * be - 0.5 * be * be),
                (j + 1, -0.5 * be + 0.5 * be * be),
            ])
        } else {
            let x = grid.axis_coord(j as usize);
            let mut w: Vec<(usize, f64)> = grid
                .axis_hat_integrals(x - 0.5 * h - lo, x + 0.5 * h - hi)
                .into_iter()
                .map(|(k, c)| (k, c / h))
                .collect();
            for &(k, c) in &s {
                w.push((k, -c));
            }
            w
        };
        unshifted.push(s);
        delta.push(d);
    }
    let dim = multi.len();
    let mut out = Vec::new();
    for mask in 1u32..(1 << dim) {
        let factors: Vec<Vec<(usize, f64)>> = (0..dim)
            .map(|a| if mask & (1 << a) != 0 { delta[a].clone() } else { unshifted[a].clone() })
            .collect();
        out.extend(grid.tensor(&factors));
    }
    out
}

/// `I_r* f(y) = ∫_{|z|<r} [f(y + p) - f(y) - Df(y)·p] ν(dz)`.
pub fn assemble_ir_star(model: &SdeModel, grid: &Grid, quad: &QuadratureSplit) -> Result<SparseOperator> {
    check_grid(model, grid)?;
    let n = grid.len();
    if quad.inner.is_empty() || model.jump_is_zero() {
        return Ok(SparseOperator::zero(n, OperatorPart::IrStar).with_radius(quad.r));
    }
    let rows = jump_rows(model, grid, &quad.inner, true)?;
    Ok(SparseOperator::from_rows(n, rows, OperatorPart::IrStar)?.with_radius(quad.r))
}

/// `J_r* f(y) = ∫_{|z|≥r} [f(y + p(y, z)) - f(y)] ν(dz)`; targets outside
/// the grid contribute nothing.
pub fn assemble_jr_star(model: &SdeModel, grid: &Grid, quad: &QuadratureSplit) -> Result<SparseOperator> {
    check_grid(model, grid)?;
    let n = grid.len();
    if quad.outer.is_empty() || model.jump_is_zero() {
        return Ok(SparseOperator::zero(n, OperatorPart::JrStar).with_radius(quad.r));
    }
    let rows = jump_rows(model, grid, &quad.outer, false)?;
    Ok(SparseOperator::from_rows(n, rows, OperatorPart::JrStar)?.with_radius(quad.r))
}

fn jump_rows(
    model: &SdeModel,
    grid: &Grid,
    nodes: &[crate::quadrature::QuadNode],
    compensate: bool,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let d = grid.d;
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let y = grid.node(i);
            let mut p = vec![0.0; d];
            let mut target = vec![0.0; d];
            let mut row = Vec::new();
            for node in nodes {
                model.jump_into(&y, &node.z, &mut p);
                if p.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Assembly {
                        node: i,
                        source: Box::new(Error::NonFinite { coefficient: "p", point: y.clone() }),
                    });
                }
                for a in 0..d {
                    target[a] = y[a] + p[a];
                }
                for (k, c) in grid.interpolation_weights(&target) {
                    row.push((k, node.w * c));
                }
                row.push((i, -node.w));
                if compensate {
                    push_gradient(&mut row, grid, i, &p, -node.w);
                }
            }
            Ok(row)
        })
        .collect()
}

/// The large-jump forward operator: the transpose of `J_r*`. Both sides of
/// the pairing carry the same weight h^d, so no rescaling is needed.
pub fn assemble_jr(jr_star: &SparseOperator) -> SparseOperator {
    jr_star.transpose().with_part(OperatorPart::Jr)
}

/// Every piece of the split, plus the sums `L_h` and `L*_h`.
#[derive(Clone, Debug)]
pub struct OperatorSet {
    pub grid: Grid,
    pub ar: SparseOperator,
    pub ir: SparseOperator,
    pub jr: SparseOperator,
    pub ar_star: SparseOperator,
    pub ir_star: SparseOperator,
    pub jr_star: SparseOperator,
    pub l: SparseOperator,
    pub l_star: SparseOperator,
}

impl OperatorSet {
    pub fn local_and_small(&self) -> Result<SparseOperator> {
        self.ar.add(&self.ir, OperatorPart::LocalAndSmall)
    }
}

pub fn assemble_full(model: &SdeModel, grid: &Grid, quad: &QuadratureSplit) -> Result<OperatorSet> {
    let ar = assemble_ar(model, grid, quad)?;
    let ir = assemble_ir(model, grid, quad)?;
    let jr_star = assemble_jr_star(model, grid, quad)?;
    let jr = assemble_jr(&jr_star);
    let ar_star = assemble_ar_star(model, grid, quad)?;
    let ir_star = assemble_ir_star(model, grid, quad)?;
    let l = ar.add(&ir, OperatorPart::L)?.add(&jr, OperatorPart::L)?;
    let l_star = ar_star.add(&ir_star, OperatorPart::LStar)?.add(&jr_star, OperatorPart::LStar)?;
    Ok(OperatorSet { grid: *grid, ar, ir, jr, ar_star, ir_star, jr_star, l, l_star })
}

/// `|⟨L u, f⟩_h - ⟨u, L* f⟩_h|` in the h^d-weighted pairing.
pub fn duality_gap(l_part: &SparseOperator, lstar_part: &SparseOperator, u: &GridFunction, f: &GridFunction) -> Result<f64> {
    if u.grid != f.grid {
        return Err(Error::GridMismatch);
    }
    let lu = GridFunction { grid: u.grid, values: l_part.apply(&u.values) };
    let lsf = GridFunction { grid: f.grid, values: lstar_part.apply(&f.values) };
    Ok((lu.pairing(f)? - u.pairing(&lsf)?).abs())
}

/// Largest jump displacement `|p(x, z)|` over grid nodes and quadrature nodes.
pub fn jump_reach(model: &SdeModel, grid: &Grid, quad: &QuadratureSplit) -> f64 {
    if model.jump_is_zero() {
        return 0.0;
    }
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.node(i);
            quad.inner
                .iter()
                .chain(&quad.outer)
                .map(|n| norm(&model.jump(&x, &n.z)))
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// Checks that `u` vanishes within `2h` of the boundary and that every
/// jump target from its support lands at least `2h` inside the box.
/// Entries below `rel_floor · max|u|` count as outside the support.
pub fn check_support_margin(
    model: &SdeModel,
    grid: &Grid,
    quad: &QuadratureSplit,
    u: &GridFunction,
    rel_floor: f64,
) -> Result<()> {
    let floor = rel_floor * u.norm_inf();
    let inner_edge = grid.half_width - 2.0 * grid.h;
    for (i, v) in u.values.iter().enumerate() {
        if v.abs() <= floor {
            continue;
        }
        if grid.cells_to_boundary(i) < 2 {
            return Err(Error::SupportMargin(format!(
                "u is non-negligible ({v:e}) at node {i}, within 2h of the boundary"
            )));
        }
        let x = grid.node(i);
        for n in quad.inner.iter().chain(&quad.outer) {
            let p = model.jump(&x, &n.z);
            if x.iter().zip(&p).any(|(xa, pa)| (xa + pa).abs() > inner_edge) {
                return Err(Error::SupportMargin(format!(
                    "jump from node {i} (x={x:?}) by z={:?} leaves the box shrunk by 2h",
                    n.z
                )));
            }
        }
    }
    Ok(())
}
