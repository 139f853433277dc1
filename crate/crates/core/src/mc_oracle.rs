//! Monte Carlo oracle: jump-adapted Euler-Maruyama paths of the SDE and a
//! kernel density estimate of the terminal law.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::model::{LevyMeasure, SdeModel, Sides};
use crate::operators::drift_correction;
use crate::quadrature::{split_measure, truncated_moment, QuadratureOptions, QuadratureSplit};
use crate::rng::{norm, stream_rng, unit_direction};

#[derive(Clone, Debug, PartialEq)]
pub struct McConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub t_end: f64,
    /// Jumps with |z| below this are dropped.
    pub jump_cutoff: f64,
    pub seed: u64,
    /// Pairs paths that share jumps and use negated Brownian increments.
    pub antithetic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub d: usize,
    pub points: Vec<Vec<f64>>,
    /// ∫_{|z|<ε} |z|² ν(dz), the bias proxy of the dropped jumps.
    pub dropped_jump_moment: f64,
    /// Paths excluded for reaching a non-finite state.
    pub flagged: usize,
    /// Total rate of the simulated jumps.
    pub jump_rate: f64,
}

impl SampleSet {
    /// One point per line, coordinates separated by spaces.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.points {
            let line: Vec<String> = p.iter().map(|c| format!("{c:.16e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Sampler for the normalized restriction of ν to |z| ≥ ε.
struct JumpSampler {
    d: usize,
    /// (z, w) atoms at or beyond the cutoff
    atoms: Vec<(Vec<f64>, f64)>,
    atom_mass: f64,
    /// density part: (ε^{-β}, b^{-β}, β, sides, mass)
    density: Option<(f64, f64, f64, Sides, f64)>,
    rate: f64,
}

impl JumpSampler {
    fn new(measure: &LevyMeasure, eps: f64) -> Self {
        let atoms: Vec<(Vec<f64>, f64)> =
            measure.atoms.iter().filter(|a| norm(&a.z) >= eps).map(|a| (a.z.clone(), a.w)).collect();
        let atom_mass = atoms.iter().map(|a| a.1).sum();
        let density = measure.density.as_ref().filter(|den| den.z_max > eps).map(|den| {
            let mass = den.radial_moment(measure.d, eps, f64::INFINITY, 0.0);
            (eps.powf(-den.beta), den.z_max.powf(-den.beta), den.beta, den.sides, mass)
        });
        let rate = atom_mass + density.map_or(0.0, |d| d.4);
        JumpSampler { d: measure.d, atoms, atom_mass, density, rate }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let u: f64 = rng.random::<f64>() * self.rate;
        if u < self.atom_mass || self.density.is_none() {
            let mut acc = 0.0;
            for (z, w) in &self.atoms {
                acc += w;
                if u < acc {
                    return z.clone();
                }
            }
            return self.atoms.last().expect("positive atom mass").0.clone();
        }
        let (ea, eb, beta, sides, _) = self.density.expect("checked above");
        let v: f64 = rng.random();
        let rho = (ea - v * (ea - eb)).powf(-1.0 / beta);
        if self.d == 1 {
            let sign = match sides {
                Sides::Positive => 1.0,
                Sides::Negative => -1.0,
                Sides::Both => {
                    if rng.random_bool(0.5) {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            vec![sign * rho]
        } else {
            unit_direction(rng, self.d).into_iter().map(|c| c * rho).collect()
        }
    }
}

struct PathContext<'a> {
    model: &'a SdeModel,
    jumps: JumpSampler,
    compensator: QuadratureSplit,
    dt: f64,
    n_steps: usize,
}

impl PathContext<'_> {
    fn euler(&self, y: &mut [f64], tau: f64, rng: &mut ChaCha8Rng, sign: f64) {
        let d = y.len();
        let mut b = self.model.drift(y);
        let comp = drift_correction(self.model, &self.compensator, y);
        for (ba, ca) in b.iter_mut().zip(&comp) {
            *ba -= ca;
        }
        let sigma = self.model.sigma(y);
        let dw: Vec<f64> = (0..sigma.ncols()).map(|_| sign * tau.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        for a in 0..d {
            let noise: f64 = (0..sigma.ncols()).map(|k| sigma[(a, k)] * dw[k]).sum();
            y[a] += b[a] * tau + noise;
        }
    }

    fn run(&self, mut y: Vec<f64>, rng: &mut ChaCha8Rng, sign: f64) -> Vec<f64> {
        let exp = (self.jumps.rate > 0.0).then(|| Exp::new(self.jumps.rate).expect("positive rate"));
        let mut next_jump = exp.map_or(f64::INFINITY, |e| rng.sample(e));
        let mut now = 0.0;
        for k in 1..=self.n_steps {
            let step_end = k as f64 * self.dt;
            while next_jump < step_end {
                self.euler(&mut y, next_jump - now, rng, sign);
                let z = self.jumps.sample(rng);
                let p = self.model.jump(&y, &z);
                for (ya, pa) in y.iter_mut().zip(&p) {
                    *ya += pa;
                }
                now = next_jump;
                next_jump += rng.sample(exp.expect("jumps imply a rate"));
            }
            self.euler(&mut y, step_end - now, rng, sign);
            now = step_end;
            if y.iter().any(|c| !c.is_finite()) {
                return y;
            }
        }
        y
    }
}

/// Simulates `cfg.n_paths` terminal states at time `T`.
///
/// Each path (or antithetic pair) owns an RNG stream derived from the seed
/// and its index, so the result does not depend on scheduling.
pub fn simulate<F>(model: &SdeModel, measure: &LevyMeasure, x0: F, cfg: &McConfig) -> Result<SampleSet>
where
    F: Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
{
    if cfg.n_paths == 0 || cfg.n_steps == 0 {
        return Err(Error::invalid("n_paths and n_steps must be positive"));
    }
    if !(cfg.t_end > 0.0 && cfg.t_end.is_finite()) {
        return Err(Error::invalid(format!("final time T={} must be positive", cfg.t_end)));
    }
    if !(cfg.jump_cutoff > 0.0) {
        return Err(Error::invalid(format!("jump cutoff ε={} must be positive", cfg.jump_cutoff)));
    }
    if measure.d != model.d {
        return Err(Error::Dimension { expected: model.d, got: measure.d });
    }
    let eps = cfg.jump_cutoff;
    let jumps = JumpSampler::new(measure, eps);
    if !jumps.rate.is_finite() {
        return Err(Error::invalid("Lévy measure restricted to |z| ≥ ε has infinite mass"));
    }
    let dropped_jump_moment = truncated_moment(measure, eps, 2.0)?;
    let compensator = split_measure(measure, eps, &QuadratureOptions::default())?;
    let ctx = PathContext { model, jumps, compensator, dt: cfg.t_end / cfg.n_steps as f64, n_steps: cfg.n_steps };

    let run_path = |k: usize| -> Vec<f64> {
        let (stream, sign) = if cfg.antithetic { (k / 2, if k % 2 == 0 { 1.0 } else { -1.0 }) } else { (k, 1.0) };
        let mut rng = stream_rng(cfg.seed, stream as u64);
        let start = x0(&mut rng);
        ctx.run(start, &mut rng, sign)
    };
    let raw: Vec<Vec<f64>> = (0..cfg.n_paths).into_par_iter().map(run_path).collect();
    let total = raw.len();
    let points: Vec<Vec<f64>> = raw.into_iter().filter(|p| p.iter().all(|c| c.is_finite())).collect();
    let flagged = total - points.len();
    if flagged * 100 > total {
        return Err(Error::TooManyFlagged { flagged, total });
    }
    Ok(SampleSet { d: model.d, points, dropped_jump_moment, flagged, jump_rate: ctx.jumps.rate })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule `1.06 σ̂ n^{-1/5}` per axis, floored at the grid step.
    Auto,
    Fixed(f64),
}

const KDE_CUTOFF: f64 = 6.0;

/// Gaussian product-kernel density on the grid nodes, normalized to
/// h^d-mass one.
pub fn kde_density(samples: &SampleSet, grid: &Grid, bandwidth: Bandwidth) -> Result<GridFunction> {
    if grid.d != samples.d {
        return Err(Error::Dimension { expected: grid.d, got: samples.d });
    }
    let n = samples.points.len();
    if n < 100 {
        return Err(Error::invalid(format!("density estimate needs at least 100 samples, got {n}")));
    }
    let d = grid.d;
    let bw: Vec<f64> = match bandwidth {
        Bandwidth::Fixed(b) if b > 0.0 => vec![b; d],
        Bandwidth::Fixed(b) => return Err(Error::invalid(format!("bandwidth {b} must be positive"))),
        Bandwidth::Auto => (0..d)
            .map(|a| {
                let mean = samples.points.iter().map(|p| p[a]).sum::<f64>() / n as f64;
                let var = samples.points.iter().map(|p| (p[a] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                (1.06 * var.sqrt() * (n as f64).powf(-0.2)).max(grid.h)
            })
            .collect(),
    };
    let x = grid.half_width;
    let inside = samples.points.iter().filter(|p| p.iter().all(|c| c.abs() <= x)).count();
    if inside == 0 {
        return Err(Error::EmptyDensity);
    }
    let npa = grid.n_per_axis;
    let accumulate = |chunk: &[Vec<f64>]| -> Vec<f64> {
        let mut acc = vec![0.0; grid.len()];
        let mut per_axis: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
        'points: for p in chunk {
            for a in 0..d {
                per_axis[a].clear();
                let reach = KDE_CUTOFF * bw[a];
                let lo = ((p[a] - reach + x) / grid.h).ceil().max(0.0);
                let hi = ((p[a] + reach + x) / grid.h).floor().min((npa - 1) as f64);
                if lo > hi {
                    continue 'points;
                }
                for i in lo as usize..=hi as usize {
                    let t = (grid.axis_coord(i) - p[a]) / bw[a];
                    per_axis[a].push((i, (-0.5 * t * t).exp()));
                }
            }
            let mut stack: Vec<(usize, f64)> = vec![(0, 1.0)];
            for axis in &per_axis {
                stack = stack
                    .iter()
                    .flat_map(|&(flat, w)| axis.iter().map(move |&(i, k)| (flat * npa + i, w * k)))
                    .collect();
            }
            for (idx, w) in stack {
                acc[idx] += w;
            }
        }
        acc
    };
    let partials: Vec<Vec<f64>> = samples.points.par_chunks(4096).map(accumulate).collect();
    let mut values = vec![0.0; grid.len()];
    for part in partials {
        for (v, p) in values.iter_mut().zip(part) {
            *v += p;
        }
    }
    let u = GridFunction { grid: *grid, values };
    let mass = u.mass();
    if mass <= 0.0 {
        return Err(Error::EmptyDensity);
    }
    Ok(GridFunction { grid: *grid, values: u.values.into_iter().map(|v| v / mass).collect() })
}

/// `h^d Σ |u - v|`.
pub fn l1_distance(u: &GridFunction, v: &GridFunction) -> Result<f64> {
    if u.grid != v.grid {
        return Err(Error::GridMismatch);
    }
    Ok(u.grid.cell_volume() * u.values.iter().zip(&v.values).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Diffusion, Drift, JumpMap, PowerDensity};
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};

    fn cfg(n_paths: usize, n_steps: usize, t_end: f64, seed: u64) -> McConfig {
        McConfig { n_paths, n_steps, t_end, jump_cutoff: 1e-3, seed, antithetic: false }
    }

    fn mean_var(s: &SampleSet) -> (f64, f64) {
        let n = s.points.len() as f64;
        let m = s.points.iter().map(|p| p[0]).sum::<f64>() / n;
        let v = s.points.iter().map(|p| (p[0] - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn ou_moments() {
        let model = SdeModel::ou_1d(1.0, 1.0, JumpMap::Zero, 1.0).unwrap();
        let s = simulate(&model, &LevyMeasure::zero(1), |_| vec![0.0], &cfg(20_000, 200, 1.0, 7)).unwrap();
        let (m, v) = mean_var(&s);
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        let n = s.points.len() as f64;
        assert!(m.abs() < 3.0 * (exact / n).sqrt(), "{m}");
        // Euler with dt = 1/200 adds a relative O(dt) variance bias
        assert!((v - exact).abs() < 3.0 * exact * (2.0 / n).sqrt() + 0.01 * exact, "{v} vs {exact}");
    }

    #[test]
    fn compound_poisson_mean() {
        let model = SdeModel::new(1, Drift::Constant { value: vec![0.0] }, Diffusion::Scalar { value: 0.0 }, JumpMap::Additive, 1.0, 1.0).unwrap();
        let nu = LevyMeasure::atoms(1, vec![(vec![1.0], 0.5)]).unwrap();
        let s = simulate(&model, &nu, |_| vec![0.0], &cfg(20_000, 10, 2.0, 11)).unwrap();
        let (m, _) = mean_var(&s);
        let stderr = (1.0f64 / s.points.len() as f64).sqrt();
        assert!((m - 1.0).abs() < 3.0 * stderr, "{m}");
        assert!(s.points.iter().all(|p| (p[0] - p[0].round()).abs() < 1e-12));
        assert_eq!(s.dropped_jump_moment, 0.0);
    }

    #[test]
    fn deterministic_under_seed() {
        let model = SdeModel::ou_1d(1.0, 1.0, JumpMap::Geometric, 1.0).unwrap();
        let nu = LevyMeasure::new(
            1,
            vec![(vec![-0.5], 0.4)],
            Some(PowerDensity { c: 0.1, beta: 0.5, z_max: 0.5, sides: Sides::Negative }),
            1.0,
        )
        .unwrap();
        let a = simulate(&model, &nu, |_| vec![0.3], &cfg(1, 50, 1.0, 5)).unwrap();
        let b = simulate(&model, &nu, |_| vec![0.3], &cfg(1, 50, 1.0, 5)).unwrap();
        assert_eq!(a, b);
        assert!(a.dropped_jump_moment > 0.0);
        let many = simulate(&model, &nu, |_| vec![0.3], &cfg(64, 50, 1.0, 5)).unwrap();
        assert_eq!(many.points[0], a.points[0]);
    }

    #[test]
    fn antithetic_pairs_mirror_the_noise() {
        let model = SdeModel::ou_1d(1.0, 1.0, JumpMap::Zero, 1.0).unwrap();
        let mut c = cfg(4, 20, 1.0, 2);
        c.antithetic = true;
        let s = simulate(&model, &LevyMeasure::zero(1), |_| vec![0.0], &c).unwrap();
        assert_abs_diff_eq!(s.points[0][0], -s.points[1][0], epsilon = 1e-14);
        assert_abs_diff_eq!(s.points[2][0], -s.points[3][0], epsilon = 1e-14);
    }

    #[test]
    fn power_marks_follow_the_truncated_law() {
        let nu = LevyMeasure::new(1, vec![], Some(PowerDensity { c: 1.0, beta: 0.5, z_max: 1.0, sides: Sides::Positive }), 1.0).unwrap();
        let js = JumpSampler::new(&nu, 0.01);
        assert_abs_diff_eq!(js.rate, (0.1f64.recip() - 1.0) / 0.5, epsilon = 1e-12);
        let mut rng = stream_rng(1, 0);
        let draws: Vec<f64> = (0..20_000).map(|_| js.sample(&mut rng)[0]).collect();
        assert!(draws.iter().all(|z| (0.01..=1.0).contains(z)));
        // P(Z < 0.04) = (0.01^{-1/2} - 0.04^{-1/2}) / (0.01^{-1/2} - 1) = 5/9
        let frac = draws.iter().filter(|z| **z < 0.04).count() as f64 / draws.len() as f64;
        assert!((frac - 5.0 / 9.0).abs() < 0.015, "{frac}");
    }

    fn samples(points: Vec<f64>) -> SampleSet {
        SampleSet { d: 1, points: points.into_iter().map(|p| vec![p]).collect(), dropped_jump_moment: 0.0, flagged: 0, jump_rate: 0.0 }
    }

    #[test]
    fn kde_of_a_point_mass() {
        let g = Grid::new(1, 2.0, 0.01).unwrap();
        let u = kde_density(&samples(vec![0.0; 200]), &g, Bandwidth::Fixed(0.1)).unwrap();
        assert_abs_diff_eq!(u.mass(), 1.0, epsilon = 1e-12);
        let exact = Normal::new(0.0, 0.1).unwrap();
        for (i, v) in u.values.iter().enumerate() {
            assert_abs_diff_eq!(*v, exact.pdf(g.node(i)[0]), epsilon = 1e-6);
        }
    }

    #[test]
    fn kde_of_standard_normal_samples() {
        let mut rng = stream_rng(3, 0);
        let pts: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
        let g = Grid::new(1, 8.0, 0.01).unwrap();
        let u = kde_density(&samples(pts), &g, Bandwidth::Auto).unwrap();
        let exact = GridFunction::from_fn(g, |x| Normal::new(0.0, 1.0).unwrap().pdf(x[0]));
        assert!(l1_distance(&u, &exact).unwrap() <= 0.03);
    }

    #[test]
    fn kde_rejects_samples_outside_the_grid() {
        let g = Grid::new(1, 2.0, 0.01).unwrap();
        assert!(matches!(kde_density(&samples(vec![5.0; 150]), &g, Bandwidth::Auto), Err(Error::EmptyDensity)));
        assert!(kde_density(&samples(vec![0.0; 10]), &g, Bandwidth::Auto).is_err());
    }

    #[test]
    fn l1_distance_examples() {
        let g = Grid::new(1, 8.0, 0.01).unwrap();
        let n0 = GridFunction::from_fn(g, |x| Normal::new(0.0, 1.0).unwrap().pdf(x[0]));
        let n1 = GridFunction::from_fn(g, |x| Normal::new(0.1, 1.0).unwrap().pdf(x[0]));
        assert_eq!(l1_distance(&n0, &n0).unwrap(), 0.0);
        let std = Normal::new(0.0, 1.0).unwrap();
        let exact = 2.0 * (std.cdf(0.05) - std.cdf(-0.05));
        assert_abs_diff_eq!(exact, 0.0797, epsilon = 1e-4);
        assert_abs_diff_eq!(l1_distance(&n0, &n1).unwrap(), exact, epsilon = 1e-5);
        let a = GridFunction::from_fn(g, |x| if (x[0] + 2.0).abs() < 0.5 { 1.0 } else { 0.0 });
        let b = GridFunction::from_fn(g, |x| if (x[0] - 2.0).abs() < 0.5 { 1.0 } else { 0.0 });
        let (a, b) = (
            GridFunction { grid: g, values: a.values.iter().map(|v| v / a.mass()).collect() },
            GridFunction { grid: g, values: b.values.iter().map(|v| v / b.mass()).collect() },
        );
        assert_abs_diff_eq!(l1_distance(&a, &b).unwrap(), 2.0, epsilon = 1e-12);
        assert!(l1_distance(&a, &GridFunction::zeros(Grid::new(1, 4.0, 0.01).unwrap())).is_err());
    }
}
