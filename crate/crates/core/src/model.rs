//! SDE coefficients, the Lévy measure, and sampled checks of the standing
//! assumptions.
//!
//! The state equation is
//!
//! ```text
//! dY = b(Y-) dt + σ(Y-) dB + ∫_{|z|<1} p(Y-, z) Ñ(dz, dt) + ∫_{|z|≥1} p(Y-, z) N(dz, dt)
//! ```
//!
//! with a single noise index. Coefficients are chosen from a fixed set of
//! built-ins or given as polynomial tables, so configs never need an
//! expression interpreter.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{norm, stream_rng, uniform_ball, unit_direction};

/// One term `coef · Π v_i^{powers_i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(terms: Vec<(f64, Vec<u32>)>) -> Self {
        Polynomial {
            terms: terms
                .into_iter()
                .map(|(coef, powers)| Monomial { coef, powers })
                .collect(),
        }
    }

    pub fn constant(c: f64) -> Self {
        Polynomial::new(vec![(c, vec![])])
    }

    /// Missing trailing powers are treated as zero.
    pub fn eval(&self, vars: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.powers
                    .iter()
                    .zip(vars)
                    .fold(t.coef, |acc, (&k, &v)| acc * v.powi(k as i32))
            })
            .sum()
    }

    fn arity(&self) -> usize {
        self.terms.iter().map(|t| t.powers.len()).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Drift {
    /// b(x) = -rate (x - mean)
    Ou {
        rate: f64,
        #[serde(default)]
        mean: Option<Vec<f64>>,
    },
    Constant {
        value: Vec<f64>,
    },
    /// b(x) = matrix x + offset
    Linear {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        offset: Option<Vec<f64>>,
    },
    Polynomial {
        components: Vec<Polynomial>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Diffusion {
    /// σ = value · identity (d × d)
    Scalar { value: f64 },
    /// Constant d × n matrix.
    Constant { matrix: Vec<Vec<f64>> },
    /// d × n table of polynomials in x.
    Polynomial { entries: Vec<Vec<Polynomial>> },
}

/// Jump amplitude p(y, z).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JumpMap {
    /// p ≡ 0
    Zero,
    /// p(y, z) = z
    Additive,
    /// p(y, z) = y ⊙ z (componentwise; `yz` in one dimension)
    Geometric,
    /// p(y, z) = sin(y) ⊙ z
    Sine,
    /// Component polynomials in the 2d variables (y_1..y_d, z_1..z_d).
    /// No analytic Jacobian: D_y p is taken by central differences.
    Polynomial { components: Vec<Polynomial> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdeModel {
    pub d: usize,
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub jump: JumpMap,
    /// Lipschitz / growth constant.
    pub k: f64,
    /// Ellipticity constant.
    pub alpha: f64,
}

/// Finite-difference step for a derivative taken at `x`.
pub fn fd_step(x: &[f64]) -> f64 {
    (1e-8 * (1.0 + norm(x))).max(1e-6)
}

impl SdeModel {
    pub fn new(d: usize, drift: Drift, diffusion: Diffusion, jump: JumpMap, k: f64, alpha: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("state dimension must be positive"));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::invalid(format!("K must be positive, got {k}")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        let model = SdeModel { d, drift, diffusion, jump, k, alpha };
        model.check_shapes()?;
        Ok(model)
    }

    /// One-dimensional Ornstein-Uhlenbeck drift -rate·x with unit-scaled noise.
    pub fn ou_1d(rate: f64, sigma: f64, jump: JumpMap, k: f64) -> Result<Self> {
        SdeModel::new(
            1,
            Drift::Ou { rate, mean: None },
            Diffusion::Scalar { value: sigma },
            jump,
            k,
            (sigma * sigma).max(f64::MIN_POSITIVE),
        )
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.d;
        let dim = |got: usize, expected: usize| {
            if got == expected {
                Ok(())
            } else {
                Err(Error::Dimension { expected, got })
            }
        };
        match &self.drift {
            Drift::Ou { mean, .. } => {
                if let Some(m) = mean {
                    dim(m.len(), d)?;
                }
            }
            Drift::Constant { value } => dim(value.len(), d)?,
            Drift::Linear { matrix, offset } => {
                dim(matrix.len(), d)?;
                for row in matrix {
                    dim(row.len(), d)?;
                }
                if let Some(o) = offset {
                    dim(o.len(), d)?;
                }
            }
            Drift::Polynomial { components } => {
                dim(components.len(), d)?;
                for c in components {
                    if c.arity() > d {
                        return Err(Error::Dimension { expected: d, got: c.arity() });
                    }
                }
            }
        }
        match &self.diffusion {
            Diffusion::Scalar { .. } => {}
            Diffusion::Constant { matrix } => {
                dim(matrix.len(), d)?;
                let n = matrix.first().map_or(0, Vec::len);
                if n == 0 || matrix.iter().any(|r| r.len() != n) {
                    return Err(Error::invalid("diffusion matrix rows must share a positive length"));
                }
            }
            Diffusion::Polynomial { entries } => {
                dim(entries.len(), d)?;
                let n = entries.first().map_or(0, Vec::len);
                if n == 0 || entries.iter().any(|r| r.len() != n) {
                    return Err(Error::invalid("diffusion table rows must share a positive length"));
                }
            }
        }
        if let JumpMap::Polynomial { components } = &self.jump {
            dim(components.len(), d)?;
            for c in components {
                if c.arity() > 2 * d {
                    return Err(Error::Dimension { expected: 2 * d, got: c.arity() });
                }
            }
        }
        Ok(())
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        match &self.drift {
            Drift::Ou { rate, mean } => x
                .iter()
                .enumerate()
                .map(|(i, &xi)| -rate * (xi - mean.as_ref().map_or(0.0, |m| m[i])))
                .collect(),
            Drift::Constant { value } => value.clone(),
            Drift::Linear { matrix, offset } => matrix
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                        + offset.as_ref().map_or(0.0, |o| o[i])
                })
                .collect(),
            Drift::Polynomial { components } => components.iter().map(|c| c.eval(x)).collect(),
        }
    }

    pub fn sigma(&self, x: &[f64]) -> DMatrix<f64> {
        match &self.diffusion {
            Diffusion::Scalar { value } => DMatrix::identity(self.d, self.d) * *value,
            Diffusion::Constant { matrix } => {
                let n = matrix[0].len();
                DMatrix::from_fn(self.d, n, |i, j| matrix[i][j])
            }
            Diffusion::Polynomial { entries } => {
                let n = entries[0].len();
                DMatrix::from_fn(self.d, n, |i, j| entries[i][j].eval(x))
            }
        }
    }

    /// Writes p(y, z) into `out`.
    pub fn jump_into(&self, y: &[f64], z: &[f64], out: &mut [f64]) {
        match &self.jump {
            JumpMap::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            JumpMap::Additive => out.copy_from_slice(z),
            JumpMap::Geometric => {
                for i in 0..self.d {
                    out[i] = y[i] * z[i];
                }
            }
            JumpMap::Sine => {
                for i in 0..self.d {
                    out[i] = y[i].sin() * z[i];
                }
            }
            JumpMap::Polynomial { components } => {
                let mut vars = Vec::with_capacity(2 * self.d);
                vars.extend_from_slice(y);
                vars.extend_from_slice(z);
                for (o, c) in out.iter_mut().zip(components) {
                    *o = c.eval(&vars);
                }
            }
        }
    }

    pub fn jump(&self, y: &[f64], z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.jump_into(y, z, &mut out);
        out
    }

    pub fn jump_is_zero(&self) -> bool {
        matches!(self.jump, JumpMap::Zero)
    }

    /// Analytic ∂p/∂y when the jump map provides one.
    pub fn dp_dy(&self, y: &[f64], z: &[f64]) -> Option<DMatrix<f64>> {
        let d = self.d;
        match &self.jump {
            JumpMap::Zero | JumpMap::Additive => Some(DMatrix::zeros(d, d)),
            JumpMap::Geometric => Some(DMatrix::from_fn(d, d, |i, j| if i == j { z[i] } else { 0.0 })),
            JumpMap::Sine => Some(DMatrix::from_fn(d, d, |i, j| if i == j { y[i].cos() * z[i] } else { 0.0 })),
            JumpMap::Polynomial { .. } => None,
        }
    }

    /// ∂p/∂y, analytic when available, otherwise central differences with
    /// step `fd_step(y)`. Entry (i, j) is ∂p_i/∂y_j.
    pub fn jump_jacobian(&self, y: &[f64], z: &[f64]) -> DMatrix<f64> {
        if let Some(m) = self.dp_dy(y, z) {
            return m;
        }
        let d = self.d;
        let h = fd_step(y);
        let mut jac = DMatrix::zeros(d, d);
        let mut yp = y.to_vec();
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        for j in 0..d {
            yp[j] = y[j] + h;
            self.jump_into(&yp, z, &mut plus);
            yp[j] = y[j] - h;
            self.jump_into(&yp, z, &mut minus);
            yp[j] = y[j];
            for i in 0..d {
                jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
        jac
    }

    /// div_y p(y, z).
    pub fn jump_divergence(&self, y: &[f64], z: &[f64]) -> f64 {
        self.jump_jacobian(y, z).trace()
    }
}

/// Coefficient values at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    pub b: Vec<f64>,
    pub sigma: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

pub fn eval_coefficients(model: &SdeModel, x: &[f64]) -> Result<Coefficients> {
    if x.len() != model.d {
        return Err(Error::Dimension { expected: model.d, got: x.len() });
    }
    if x.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid(format!("point {x:?} is not finite")));
    }
    let b = model.drift(x);
    if b.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { coefficient: "b", point: x.to_vec() });
    }
    let sigma = model.sigma(x);
    if sigma.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { coefficient: "sigma", point: x.to_vec() });
    }
    let a = &sigma * sigma.transpose();
    if a.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { coefficient: "a", point: x.to_vec() });
    }
    Ok(Coefficients { b, sigma, a })
}

// ---------------------------------------------------------------------------
// Lévy measure

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sides {
    #[default]
    Both,
    Positive,
    Negative,
}

/// Radially symmetric power density c·|z|^{-d-β} on 0 < |z| ≤ z_max.
/// In one dimension `sides` may restrict it to a half-line.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerDensity {
    pub c: f64,
    pub beta: f64,
    pub z_max: f64,
    pub sides: Sides,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub z: Vec<f64>,
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevyMeasure {
    pub d: usize,
    pub atoms: Vec<Atom>,
    pub density: Option<PowerDensity>,
    /// Moment exponent s ∈ [1, 2).
    pub s: f64,
}

impl LevyMeasure {
    pub fn zero(d: usize) -> Self {
        LevyMeasure { d, atoms: Vec::new(), density: None, s: 1.0 }
    }

    pub fn atoms(d: usize, atoms: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        LevyMeasure::new(d, atoms, None, 1.0)
    }

    pub fn new(d: usize, atoms: Vec<(Vec<f64>, f64)>, density: Option<PowerDensity>, s: f64) -> Result<Self> {
        if !(1.0..2.0).contains(&s) {
            return Err(Error::invalid(format!("moment exponent s={s} must lie in [1, 2)")));
        }
        let mut out = Vec::with_capacity(atoms.len());
        for (z, w) in atoms {
            if z.len() != d {
                return Err(Error::Dimension { expected: d, got: z.len() });
            }
            if !(w > 0.0 && w.is_finite()) || z.iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid(format!("atom ({z:?}, {w}) must have finite location and positive mass")));
            }
            out.push(Atom { z, w });
        }
        if let Some(den) = &density {
            if !(den.c > 0.0 && den.c.is_finite()) {
                return Err(Error::invalid(format!("density constant c={} must be positive", den.c)));
            }
            if !(den.beta > 0.0) {
                return Err(Error::invalid(format!("density exponent beta={} must be positive", den.beta)));
            }
            if !(den.z_max > 0.0) {
                return Err(Error::invalid(format!("density cutoff z_max={} must be positive", den.z_max)));
            }
            if d > 3 {
                return Err(Error::invalid("power densities are supported for d <= 3"));
            }
            if d > 1 && den.sides != Sides::Both {
                return Err(Error::invalid("one-sided densities are only defined for d = 1"));
            }
        }
        Ok(LevyMeasure { d, atoms: out, density, s })
    }
}

impl PowerDensity {
    /// Total surface measure of the direction set: 2 (or 1 one-sided) for
    /// d = 1, 2π for d = 2, 4π for d = 3.
    pub fn direction_mass(&self, d: usize) -> f64 {
        match d {
            1 => match self.sides {
                Sides::Both => 2.0,
                _ => 1.0,
            },
            2 => 2.0 * std::f64::consts::PI,
            3 => 4.0 * std::f64::consts::PI,
            _ => f64::NAN,
        }
    }

    /// ∫_{a ≤ |z| < b} |z|^power ν(dz) for the density, in closed form.
    /// `b` is clipped at z_max; requires power > β when a = 0.
    pub fn radial_moment(&self, d: usize, a: f64, b: f64, power: f64) -> f64 {
        let b = b.min(self.z_max);
        if b <= a {
            return 0.0;
        }
        let e = power - self.beta;
        let radial = if e.abs() < 1e-14 {
            (b / a).ln()
        } else if b.is_infinite() {
            if e < 0.0 {
                a.powf(e) / -e
            } else {
                f64::INFINITY
            }
        } else {
            (b.powf(e) - a.powf(e)) / e
        };
        self.c * self.direction_mass(d) * radial
    }
}

// ---------------------------------------------------------------------------
// Assumption checks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    EvalError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionCheck {
    pub id: &'static str,
    pub status: CheckStatus,
    pub n_samples: usize,
    /// Largest observed lhs/bound; ≤ 1 means the bound held.
    pub worst_ratio: f64,
    pub witness_x: Option<Vec<f64>>,
    pub witness_z: Option<Vec<f64>>,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub entries: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.status == CheckStatus::Pass)
    }

    pub fn get(&self, id: &str) -> Option<&AssumptionCheck> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Columns `id,status,n_samples,worst_ratio,witness_x,witness_z,message`;
    /// witness coordinates are `;`-separated.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["id", "status", "n_samples", "worst_ratio", "witness_x", "witness_z", "message"])?;
        let join = |v: &Option<Vec<f64>>| v.as_deref().map(crate::inverse_flow::join).unwrap_or_default();
        for e in &self.entries {
            let status = match e.status {
                CheckStatus::Pass => "pass",
                CheckStatus::Fail => "fail",
                CheckStatus::EvalError => "eval_error",
            };
            wr.write_record([
                e.id.to_string(),
                status.to_string(),
                e.n_samples.to_string(),
                format!("{:e}", e.worst_ratio),
                join(&e.witness_x),
                join(&e.witness_z),
                e.message.clone(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Relative slack on sampled ratios; absorbs finite-difference error when
/// a bound is attained exactly.
const SAMPLE_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct ValidationConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Radius of the ball from which x is sampled.
    pub sample_radius: f64,
}

struct Sampled {
    ratio: f64,
    x: Vec<f64>,
    z: Option<Vec<f64>>,
}

fn sampled_check<F>(id: &'static str, cfg: &ValidationConfig, stream_base: u64, f: F) -> AssumptionCheck
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> std::result::Result<Sampled, (Vec<f64>, Option<Vec<f64>>, String)> + Sync,
{
    let results: Vec<_> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, stream_base + i as u64);
            f(&mut rng)
        })
        .collect();
    let mut worst: Option<Sampled> = None;
    for r in results {
        match r {
            Ok(s) => {
                let key = |r: f64| if r.is_nan() { f64::INFINITY } else { r };
                if worst.as_ref().is_none_or(|w| key(s.ratio) > key(w.ratio)) {
                    worst = Some(s);
                }
            }
            Err((x, z, msg)) => {
                return AssumptionCheck {
                    id,
                    status: CheckStatus::EvalError,
                    n_samples: cfg.n_samples,
                    worst_ratio: f64::NAN,
                    witness_x: Some(x),
                    witness_z: z,
                    message: msg,
                };
            }
        }
    }
    let worst = worst.expect("n_samples >= 1");
    let pass = worst.ratio <= 1.0 + SAMPLE_SLACK;
    AssumptionCheck {
        id,
        status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
        n_samples: cfg.n_samples,
        worst_ratio: worst.ratio,
        witness_x: Some(worst.x),
        witness_z: worst.z,
        message: String::new(),
    }
}

fn closed_form_check(id: &'static str, ok: bool, ratio: f64, message: String) -> AssumptionCheck {
    AssumptionCheck {
        id,
        status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
        n_samples: 0,
        worst_ratio: ratio,
        witness_x: None,
        witness_z: None,
        message,
    }
}

fn ensure_finite(coefficient: &'static str, v: &[f64], x: &[f64], z: Option<&[f64]>) -> std::result::Result<(), (Vec<f64>, Option<Vec<f64>>, String)> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err((x.to_vec(), z.map(<[f64]>::to_vec), format!("coefficient `{coefficient}` is not finite")))
    }
}

/// Sampled check of the growth, Lipschitz, ellipticity and integrability
/// assumptions. Deterministic for a fixed seed.
pub fn validate_model(model: &SdeModel, measure: &LevyMeasure, cfg: &ValidationConfig) -> Result<ValidationReport> {
    if cfg.n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    if measure.d != model.d {
        return Err(Error::Dimension { expected: model.d, got: measure.d });
    }
    let d = model.d;
    let k = model.k;
    let n = cfg.n_samples as u64;
    let mut entries = Vec::new();

    // |∂_k σ_ij| + |∂_k b_i| ≤ K
    entries.push(sampled_check("h1_lipschitz", cfg, 0, |rng| {
        let x = uniform_ball(rng, d, cfg.sample_radius);
        let h = fd_step(&x);
        let mut worst = 0.0f64;
        for kk in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[kk] += h;
            xm[kk] -= h;
            let (bp, bm) = (model.drift(&xp), model.drift(&xm));
            ensure_finite("b", &bp, &x, None)?;
            ensure_finite("b", &bm, &x, None)?;
            let (sp, sm) = (model.sigma(&xp), model.sigma(&xm));
            ensure_finite("sigma", sp.as_slice(), &x, None)?;
            ensure_finite("sigma", sm.as_slice(), &x, None)?;
            for i in 0..d {
                let db = ((bp[i] - bm[i]) / (2.0 * h)).abs();
                for j in 0..sp.ncols() {
                    let ds = ((sp[(i, j)] - sm[(i, j)]) / (2.0 * h)).abs();
                    worst = worst.max(db + ds);
                }
            }
        }
        Ok(Sampled { ratio: worst / k, x, z: None })
    }));

    // |p(x, z)| ≤ K (1 + |x|) |z|
    entries.push(sampled_check("h2_growth", cfg, n, |rng| {
        let x = uniform_ball(rng, d, cfg.sample_radius);
        let z = uniform_ball(rng, d, 1.0);
        let p = model.jump(&x, &z);
        ensure_finite("p", &p, &x, Some(&z))?;
        let bound = k * (1.0 + norm(&x)) * norm(&z);
        Ok(Sampled { ratio: ratio(norm(&p), bound), x, z: Some(z) })
    }));

    // ‖D_y p(y, z)‖ ≤ K |z|
    entries.push(sampled_check("h2_jacobian", cfg, 2 * n, |rng| {
        let y = uniform_ball(rng, d, cfg.sample_radius);
        let z = uniform_ball(rng, d, 1.0);
        let jac = model.jump_jacobian(&y, &z);
        ensure_finite("dp_dy", jac.as_slice(), &y, Some(&z))?;
        let op = jac.singular_values().max();
        Ok(Sampled { ratio: ratio(op, k * norm(&z)), x: y, z: Some(z) })
    }));

    // vᵀ a(x) v ≥ α |v|²
    entries.push(sampled_check("he1_ellipticity", cfg, 3 * n, |rng| {
        let x = uniform_ball(rng, d, cfg.sample_radius);
        let v = unit_direction(rng, d);
        let c = eval_coefficients(model, &x).map_err(|e| (x.clone(), None, e.to_string()))?;
        let av = &c.a * nalgebra::DVector::from_column_slice(&v);
        let quad: f64 = av.iter().zip(&v).map(|(p, q)| p * q).sum();
        let min_eig = c.a.clone().symmetric_eigenvalues().min();
        let r = ratio(model.alpha, quad.min(min_eig));
        Ok(Sampled { ratio: r, x, z: None })
    }));

    // a = σσᵀ is symmetric
    let sym = sampled_check("a_symmetric", cfg, 4 * n, |rng| {
        let x = uniform_ball(rng, d, cfg.sample_radius);
        let c = eval_coefficients(model, &x).map_err(|e| (x.clone(), None, e.to_string()))?;
        let asym = (&c.a - c.a.transpose()).abs().max();
        Ok(Sampled { ratio: asym / 1e-12, x, z: None })
    });
    entries.push(sym);

    // ν side
    let h3 = match &measure.density {
        Some(den) if den.beta >= 2.0 => closed_form_check(
            "h3_integrability",
            false,
            f64::INFINITY,
            format!("density exponent beta={} >= 2", den.beta),
        ),
        _ => {
            let v = levy_integrability(measure);
            closed_form_check("h3_integrability", v.is_finite(), v, format!("int (1 ^ |z|^2) nu(dz) = {v}"))
        }
    };
    entries.push(h3);

    let origin = measure.atoms.iter().find(|a| norm(&a.z) == 0.0);
    entries.push(AssumptionCheck {
        id: "no_atom_at_origin",
        status: if origin.is_none() { CheckStatus::Pass } else { CheckStatus::Fail },
        n_samples: 0,
        worst_ratio: if origin.is_none() { 0.0 } else { f64::INFINITY },
        witness_x: None,
        witness_z: origin.map(|a| a.z.clone()),
        message: String::new(),
    });

    let s = measure.s;
    let he2 = match &measure.density {
        Some(den) if s <= den.beta => closed_form_check(
            "he2_moment",
            false,
            f64::INFINITY,
            format!("int_(|z|<1) |z|^{s} nu(dz) diverges for beta={}", den.beta),
        ),
        _ => {
            let m = small_moment(measure, s);
            closed_form_check("he2_moment", m.is_finite(), m, format!("int_(|z|<1) |z|^{s} nu(dz) = {m}"))
        }
    };
    entries.push(he2);

    Ok(ValidationReport { entries })
}

fn ratio(lhs: f64, bound: f64) -> f64 {
    if lhs == 0.0 {
        0.0
    } else if bound <= 0.0 {
        f64::INFINITY
    } else {
        lhs / bound
    }
}

/// ∫ (1 ∧ |z|²) ν(dz).
pub fn levy_integrability(measure: &LevyMeasure) -> f64 {
    let atoms: f64 = measure.atoms.iter().map(|a| a.w * norm(&a.z).powi(2).min(1.0)).sum();
    let dens = measure.density.as_ref().map_or(0.0, |den| {
        if den.beta >= 2.0 {
            return f64::INFINITY;
        }
        den.radial_moment(measure.d, 0.0, 1.0, 2.0) + den.radial_moment(measure.d, 1.0, f64::INFINITY, 0.0)
    });
    atoms + dens
}

fn small_moment(measure: &LevyMeasure, s: f64) -> f64 {
    let atoms: f64 = measure
        .atoms
        .iter()
        .filter(|a| norm(&a.z) < 1.0)
        .map(|a| a.w * norm(&a.z).powf(s))
        .sum();
    atoms + measure.density.as_ref().map_or(0.0, |den| den.radial_moment(measure.d, 0.0, 1.0, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ou_additive() -> SdeModel {
        SdeModel::ou_1d(1.0, 1.0, JumpMap::Additive, 1.0).unwrap()
    }

    fn cfg(n: usize) -> ValidationConfig {
        ValidationConfig { n_samples: n, seed: 11, sample_radius: 10.0 }
    }

    #[test]
    fn ou_coefficients() {
        let m = ou_additive();
        let c = eval_coefficients(&m, &[0.0]).unwrap();
        assert_eq!(c.b, vec![0.0]);
        assert_eq!(c.sigma[(0, 0)], 1.0);
        assert_eq!(c.a[(0, 0)], 1.0);
        let c = eval_coefficients(&m, &[2.0]).unwrap();
        assert_eq!(c.b, vec![-2.0]);
        assert_eq!(c.a[(0, 0)], 1.0);
    }

    #[test]
    fn identity_sigma_gives_identity_a() {
        let m = SdeModel::new(
            2,
            Drift::Constant { value: vec![0.0, 0.0] },
            Diffusion::Scalar { value: 1.0 },
            JumpMap::Zero,
            1.0,
            1.0,
        )
        .unwrap();
        let c = eval_coefficients(&m, &[0.3, -4.0]).unwrap();
        assert_eq!(c.a, DMatrix::identity(2, 2));
    }

    #[test]
    fn polynomial_sigma_reproduces_outer_product() {
        // σ(x) = [[1 + x, x²], [0.5, -x]] in d = 1 is 1×2; use d = 2 with a 2×2 table.
        let p = |t: Vec<(f64, Vec<u32>)>| Polynomial::new(t);
        let m = SdeModel::new(
            2,
            Drift::Constant { value: vec![0.0, 0.0] },
            Diffusion::Polynomial {
                entries: vec![
                    vec![p(vec![(1.0, vec![]), (1.0, vec![1, 0])]), p(vec![(1.0, vec![2, 0])])],
                    vec![p(vec![(0.5, vec![])]), p(vec![(-1.0, vec![0, 1])])],
                ],
            },
            JumpMap::Zero,
            1.0,
            0.1,
        )
        .unwrap();
        let x = [0.7, -1.3];
        let c = eval_coefficients(&m, &x).unwrap();
        let s = [[1.7, 0.49], [0.5, 1.3]];
        for i in 0..2 {
            for j in 0..2 {
                let expect = s[i][0] * s[j][0] + s[i][1] * s[j][1];
                assert_abs_diff_eq!(c.a[(i, j)], expect, epsilon = 1e-12);
            }
        }
        assert_eq!(c.a, c.a.transpose());
    }

    #[test]
    fn non_finite_coefficient_is_named() {
        let m = SdeModel::new(
            1,
            Drift::Polynomial { components: vec![Polynomial::new(vec![(1.0, vec![400])])] },
            Diffusion::Scalar { value: 1.0 },
            JumpMap::Zero,
            1.0,
            1.0,
        )
        .unwrap();
        match eval_coefficients(&m, &[10.0]) {
            Err(Error::NonFinite { coefficient, .. }) => assert_eq!(coefficient, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ou_with_single_atom_passes_everything() {
        let m = ou_additive();
        let nu = LevyMeasure::atoms(1, vec![(vec![1.0], 0.5)]).unwrap();
        let rep = validate_model(&m, &nu, &cfg(1000)).unwrap();
        assert_eq!(rep.entries.len(), 8);
        assert!(rep.all_pass(), "{rep:#?}");
    }

    #[test]
    fn quadratic_jump_violates_jacobian_bound() {
        // p(y, z) = y² z has ∂p/∂y = 2yz > |z| for |y| > 1/2.
        let m = SdeModel::ou_1d(
            1.0,
            1.0,
            JumpMap::Polynomial { components: vec![Polynomial::new(vec![(1.0, vec![2, 1])])] },
            1.0,
        )
        .unwrap();
        let nu = LevyMeasure::atoms(1, vec![(vec![1.0], 0.5)]).unwrap();
        let rep = validate_model(&m, &nu, &cfg(1000)).unwrap();
        let jac = rep.get("h2_jacobian").unwrap();
        assert_eq!(jac.status, CheckStatus::Fail);
        assert!(jac.witness_x.as_ref().unwrap()[0].abs() > 0.5);
    }

    #[test]
    fn zero_diffusion_violates_ellipticity() {
        let m = SdeModel::new(
            1,
            Drift::Ou { rate: 1.0, mean: None },
            Diffusion::Scalar { value: 0.0 },
            JumpMap::Additive,
            1.0,
            1.0,
        )
        .unwrap();
        let nu = LevyMeasure::zero(1);
        let rep = validate_model(&m, &nu, &cfg(50)).unwrap();
        assert_eq!(rep.get("he1_ellipticity").unwrap().status, CheckStatus::Fail);
        assert_eq!(rep.get("h2_growth").unwrap().status, CheckStatus::Pass);
    }

    #[test]
    fn evaluation_failure_is_reported_not_raised() {
        let m = SdeModel::new(
            1,
            Drift::Polynomial { components: vec![Polynomial::new(vec![(1.0, vec![400])])] },
            Diffusion::Scalar { value: 1.0 },
            JumpMap::Zero,
            1.0,
            1.0,
        )
        .unwrap();
        let rep = validate_model(&m, &LevyMeasure::zero(1), &cfg(200)).unwrap();
        assert_eq!(rep.get("h1_lipschitz").unwrap().status, CheckStatus::EvalError);
    }

    #[test]
    fn validation_is_deterministic() {
        let m = SdeModel::ou_1d(1.0, 1.0, JumpMap::Sine, 1.0).unwrap();
        let nu = LevyMeasure::atoms(1, vec![(vec![0.3], 2.0)]).unwrap();
        let a = validate_model(&m, &nu, &cfg(300)).unwrap();
        let b = validate_model(&m, &nu, &cfg(300)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn measure_checks() {
        let m = ou_additive();
        let den = |beta| PowerDensity { c: 1.0, beta, z_max: f64::INFINITY, sides: Sides::Both };
        let nu = LevyMeasure::new(1, vec![], Some(den(0.5)), 1.0).unwrap();
        let rep = validate_model(&m, &nu, &cfg(10)).unwrap();
        assert!(rep.get("h3_integrability").unwrap().status == CheckStatus::Pass);
        assert!(rep.get("he2_moment").unwrap().status == CheckStatus::Pass);

        let nu = LevyMeasure::new(1, vec![], Some(den(1.5)), 1.2).unwrap();
        let rep = validate_model(&m, &nu, &cfg(10)).unwrap();
        assert_eq!(rep.get("he2_moment").unwrap().status, CheckStatus::Fail);

        let nu = LevyMeasure::new(1, vec![], Some(den(2.5)), 1.0).unwrap();
        let rep = validate_model(&m, &nu, &cfg(10)).unwrap();
        assert_eq!(rep.get("h3_integrability").unwrap().status, CheckStatus::Fail);

        let nu = LevyMeasure::atoms(1, vec![(vec![0.0], 1.0)]).unwrap();
        let rep = validate_model(&m, &nu, &cfg(10)).unwrap();
        assert_eq!(rep.get("no_atom_at_origin").unwrap().status, CheckStatus::Fail);
    }

    #[test]
    fn integrability_closed_form() {
        // one-sided |z|^{-1.5} on (0, 1]: ∫ z² · z^{-1.5} = 2/3
        let nu = LevyMeasure::new(
            1,
            vec![(vec![2.0], 0.25)],
            Some(PowerDensity { c: 1.0, beta: 0.5, z_max: 1.0, sides: Sides::Positive }),
            1.0,
        )
        .unwrap();
        assert_abs_diff_eq!(levy_integrability(&nu), 2.0 / 3.0 + 0.25, epsilon = 1e-14);
    }

    #[test]
    fn fd_jacobian_matches_analytic() {
        let poly = SdeModel::new(
            2,
            Drift::Constant { value: vec![0.0, 0.0] },
            Diffusion::Scalar { value: 1.0 },
            JumpMap::Polynomial {
                components: vec![
                    Polynomial::new(vec![(1.0, vec![0, 1, 1, 0])]),
                    Polynomial::new(vec![(1.0, vec![1, 0, 0, 1])]),
                ],
            },
            1.0,
            1.0,
        )
        .unwrap();
        let j = poly.jump_jacobian(&[3.0, -2.0], &[0.1, 0.2]);
        assert_abs_diff_eq!(j[(0, 0)], 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(j[(0, 1)], 0.1, epsilon = 1e-8);
        assert_abs_diff_eq!(j[(1, 0)], 0.2, epsilon = 1e-8);
        assert_abs_diff_eq!(j[(1, 1)], 0.0, epsilon = 1e-8);
    }
}
