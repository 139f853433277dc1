//! Discretization of the Lévy measure into small jumps (`|z| < r`) and
//! large jumps (`|z| ≥ r`).
//!
//! Atoms are routed verbatim. The power density `c|z|^{-d-β}` is written in
//! polar form `c ρ^{-1-β} dρ dS` and discretized on radial panels graded by
//! a factor 2 towards the origin (and outwards up to `z_max`), with
//! Gauss-Legendre nodes in ln ρ inside every panel and a fixed direction set.

use crate::error::{Error, Result};
use crate::model::{LevyMeasure, PowerDensity, Sides};
use crate::rng::norm;

#[derive(Clone, Debug, PartialEq)]
pub struct QuadNode {
    pub z: Vec<f64>,
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureSplit {
    pub r: f64,
    pub inner: Vec<QuadNode>,
    pub outer: Vec<QuadNode>,
    pub outer_mass: f64,
    /// ∫ |z|² ν(dz) over the innermost ball that was dropped.
    pub dropped_inner_moment: f64,
    /// ν-mass beyond the outer truncation radius (only for `z_max = ∞`).
    pub dropped_outer_mass: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureOptions {
    /// Number of inner radial panels; the smallest resolved radius is r·2^{-n_inner}.
    pub n_inner: usize,
    pub tol: f64,
    /// Gauss-Legendre nodes per radial panel (1 is the midpoint rule).
    pub nodes_per_panel: usize,
    /// Directions on the circle for d = 2; polar rings for d = 3.
    pub n_angles: usize,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions { n_inner: 16, tol: 1e-8, nodes_per_panel: 4, n_angles: 16 }
    }
}

impl QuadratureSplit {
    pub fn inner_moment(&self, power: f64) -> f64 {
        self.inner.iter().map(|n| n.w * norm(&n.z).powf(power)).sum()
    }

    /// Largest |z| among the outer nodes (0 when there are none).
    pub fn outer_reach(&self) -> f64 {
        self.outer.iter().map(|n| norm(&n.z)).fold(0.0, f64::max)
    }
}

pub fn split_measure(measure: &LevyMeasure, r: f64, opts: &QuadratureOptions) -> Result<QuadratureSplit> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid(format!("split radius r={r} must be positive")));
    }
    if opts.nodes_per_panel == 0 {
        return Err(Error::invalid("nodes_per_panel must be positive"));
    }
    let mut inner = Vec::new();
    let mut outer = Vec::new();
    for a in &measure.atoms {
        let node = QuadNode { z: a.z.clone(), w: a.w };
        if norm(&a.z) < r {
            inner.push(node);
        } else {
            outer.push(node);
        }
    }
    let mut dropped_inner_moment = 0.0;
    let mut dropped_outer_mass = 0.0;

    if let Some(den) = &measure.density {
        if !(den.beta > 0.0 && den.beta < 2.0) {
            return Err(Error::NonIntegrable { beta: den.beta });
        }
        let d = measure.d;
        let dirs = directions(d, den.sides, opts.n_angles)?;
        let (gl_x, gl_w) = gauss_legendre(opts.nodes_per_panel);

        // inner: [r 2^{-k-1}, r 2^{-k}) clipped to z_max
        let rho_min = r * 0.5f64.powi(opts.n_inner as i32);
        let tail = den.radial_moment(d, 0.0, rho_min, 2.0);
        if tail > opts.tol {
            return Err(Error::Resolution { tail, tol: opts.tol, required: required_panels(den, d, r, opts.tol) });
        }
        dropped_inner_moment = tail;
        for k in 0..opts.n_inner {
            let hi = (r * 0.5f64.powi(k as i32)).min(den.z_max);
            let lo = r * 0.5f64.powi(k as i32 + 1);
            if hi > lo {
                push_panel(&mut inner, den, lo, hi, &gl_x, &gl_w, &dirs);
            }
        }

        // outer: [r 2^k, r 2^{k+1}) up to z_max, or up to the tail cutoff
        let upper = if den.z_max.is_finite() {
            den.z_max
        } else {
            let mut cut = r;
            while den.radial_moment(d, cut, f64::INFINITY, 0.0) > opts.tol {
                cut *= 2.0;
            }
            dropped_outer_mass = den.radial_moment(d, cut, f64::INFINITY, 0.0);
            cut
        };
        let mut lo = r;
        while lo < upper {
            let hi = (2.0 * lo).min(upper);
            push_panel(&mut outer, den, lo, hi, &gl_x, &gl_w, &dirs);
            lo = hi;
        }
    }
    let outer_mass = outer.iter().map(|n| n.w).sum();
    Ok(QuadratureSplit { r, inner, outer, outer_mass, dropped_inner_moment, dropped_outer_mass })
}

fn required_panels(den: &PowerDensity, d: usize, r: f64, tol: f64) -> usize {
    let mut n = 0usize;
    while den.radial_moment(d, 0.0, r * 0.5f64.powi(n as i32), 2.0) > tol {
        n += 1;
    }
    n
}

fn push_panel(
    out: &mut Vec<QuadNode>,
    den: &PowerDensity,
    lo: f64,
    hi: f64,
    gl_x: &[f64],
    gl_w: &[f64],
    dirs: &[(Vec<f64>, f64)],
) {
    // in t = ln ρ the measure is c e^{-βt} dt, smooth on every panel
    let (tlo, thi) = (lo.ln(), hi.ln());
    let mid = 0.5 * (tlo + thi);
    let half = 0.5 * (thi - tlo);
    for (s, ws) in gl_x.iter().zip(gl_w) {
        let t = mid + half * s;
        let rho = t.exp();
        let radial = den.c * (-den.beta * t).exp() * half * ws;
        for (dir, wd) in dirs {
            out.push(QuadNode { z: dir.iter().map(|c| c * rho).collect(), w: radial * wd });
        }
    }
}

/// Direction set with weights summing to the surface measure of the unit sphere.
fn directions(d: usize, sides: Sides, n_angles: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    use std::f64::consts::PI;
    match d {
        1 => Ok(match sides {
            Sides::Both => vec![(vec![1.0], 1.0), (vec![-1.0], 1.0)],
            Sides::Positive => vec![(vec![1.0], 1.0)],
            Sides::Negative => vec![(vec![-1.0], 1.0)],
        }),
        2 => {
            let n = n_angles.max(1);
            Ok((0..n)
                .map(|k| {
                    let th = 2.0 * PI * (k as f64 + 0.5) / n as f64;
                    (vec![th.cos(), th.sin()], 2.0 * PI / n as f64)
                })
                .collect())
        }
        3 => {
            // midpoints in cos θ carry equal area
            let nt = n_angles.max(1);
            let np = 2 * nt;
            let w = 4.0 * PI / (nt * np) as f64;
            let mut out = Vec::with_capacity(nt * np);
            for i in 0..nt {
                let ct = -1.0 + 2.0 * (i as f64 + 0.5) / nt as f64;
                let st = (1.0 - ct * ct).sqrt();
                for j in 0..np {
                    let ph = 2.0 * PI * (j as f64 + 0.5) / np as f64;
                    out.push((vec![st * ph.cos(), st * ph.sin(), ct], w));
                }
            }
            Ok(out)
        }
        _ => Err(Error::invalid("power densities are supported for d <= 3")),
    }
}

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, t);
            dp = d;
            let dt = p / d;
            t -= dt;
            if dt.abs() < 1e-15 {
                break;
            }
        }
        let (_, d) = legendre(n, t);
        if d != 0.0 {
            dp = d;
        }
        x[i] = -t;
        x[n - 1 - i] = t;
        w[i] = 2.0 / ((1.0 - t * t) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn legendre(n: usize, t: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, t);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * t * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    (p1, n as f64 * (t * p1 - p0) / (t * t - 1.0))
}

/// ∫_{|z|<r} |z|^power ν(dz), in closed form.
pub fn truncated_moment(measure: &LevyMeasure, r: f64, power: f64) -> Result<f64> {
    let atoms: f64 = measure
        .atoms
        .iter()
        .filter(|a| norm(&a.z) < r)
        .map(|a| a.w * norm(&a.z).powf(power))
        .sum();
    let dens = match &measure.density {
        Some(den) => {
            if power <= den.beta {
                return Err(Error::DivergentMoment { power, beta: den.beta });
            }
            den.radial_moment(measure.d, 0.0, r, power)
        }
        None => 0.0,
    };
    Ok(atoms + dens)
}
