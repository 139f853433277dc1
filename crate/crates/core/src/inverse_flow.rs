//! Local inverse of the jump map `y ↦ y + p(y, z)` for small jumps.
//!
//! For `|z| < r0` the map `y ↦ x - p(y, z)` is a contraction, so the
//! pull-back point `y(x, z)` solving `y = x - p(y, z)` is found by plain
//! fixed-point iteration. From it follow the pull-back jump
//! `q(x, z) = p(y(x, z), z)` and the change-of-variables factor
//! `m(x, z) = 1 / det(1 + D_y p(y(x, z), z))`.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::SdeModel;
use crate::rng::{dist, norm, stream_rng, uniform_ball};

const MAX_ITERATIONS: usize = 200;

/// Radius below which the inverse flow is used: `1 / (8 d K)`, half of the
/// `1 / (4 d K)` threshold.
pub fn admissible_radius(model: &SdeModel) -> f64 {
    1.0 / (8.0 * model.d as f64 * model.k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InverseFlowResult {
    pub y: Vec<f64>,
    pub q: Vec<f64>,
    pub m: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// `det(1 + M) = 1 + tr(M) + P`, with `P` the sum of all principal minors
/// of order two and higher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetExpansion {
    pub tr_m: f64,
    pub p: f64,
    pub det: f64,
}

pub fn solve_inverse(model: &SdeModel, x: &[f64], z: &[f64], tol: f64) -> Result<InverseFlowResult> {
    solve_inverse_traced(model, x, z, tol).map(|(res, _)| res)
}

/// As [`solve_inverse`], also returning the residual after every iterate.
pub fn solve_inverse_traced(model: &SdeModel, x: &[f64], z: &[f64], tol: f64) -> Result<(InverseFlowResult, Vec<f64>)> {
    let d = model.d;
    if x.len() != d || z.len() != d {
        return Err(Error::Dimension { expected: d, got: x.len().min(z.len()) });
    }
    if !(tol >= 1e-14) {
        return Err(Error::invalid(format!("tolerance {tol} below 1e-14")));
    }
    let zn = norm(z);
    let r0 = admissible_radius(model);
    if zn >= r0 {
        return Err(Error::OutsideAdmissibleRadius { norm: zn, r0 });
    }
    if zn == 0.0 {
        let res = InverseFlowResult { y: x.to_vec(), q: vec![0.0; d], m: 1.0, iterations: 0, residual: 0.0 };
        return Ok((res, vec![0.0]));
    }

    let mut y = x.to_vec();
    let mut p = vec![0.0; d];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        model.jump_into(&y, z, &mut p);
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { coefficient: "p", point: y });
        }
        let residual = y
            .iter()
            .zip(x)
            .zip(&p)
            .map(|((yi, xi), pi)| (yi - (xi - pi)).powi(2))
            .sum::<f64>()
            .sqrt();
        history.push(residual);
        if residual <= tol {
            let det = compute_m(model, &y, z)?.det;
            let res = InverseFlowResult { y, q: p, m: 1.0 / det, iterations, residual };
            return Ok((res, history));
        }
        if iterations == MAX_ITERATIONS {
            return Err(Error::NonContraction { x: x.to_vec(), z: z.to_vec(), iterations, residual });
        }
        for i in 0..d {
            y[i] = x[i] - p[i];
        }
        iterations += 1;
    }
}

/// Determinant of `1 + D_y p(y, z)` split into trace and higher-order part.
pub fn compute_m(model: &SdeModel, y: &[f64], z: &[f64]) -> Result<DetExpansion> {
    let m = model.jump_jacobian(y, z);
    if m.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { coefficient: "dp_dy", point: y.to_vec() });
    }
    let exp = det_expansion(&m);
    if !(exp.det > 0.0) {
        return Err(Error::NotInvertible { y: y.to_vec(), z: z.to_vec(), det: exp.det });
    }
    Ok(exp)
}

/// `det(1 + M)` by LU and its trace/remainder split. For `d ≤ 8` the
/// remainder is summed from principal minors, independently of the LU
/// determinant.
pub fn det_expansion(m: &DMatrix<f64>) -> DetExpansion {
    let d = m.nrows();
    let shifted = m + DMatrix::identity(d, d);
    let det = shifted.determinant();
    let tr_m = m.trace();
    let p = if d <= 8 {
        let mut sum = 0.0;
        for mask in 1u32..(1 << d) {
            if mask.count_ones() < 2 {
                continue;
            }
            let idx: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
            let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])]);
            sum += sub.determinant();
        }
        sum
    } else {
        det - 1.0 - tr_m
    };
    DetExpansion { tr_m, p, det }
}

// ---------------------------------------------------------------------------
// Lemma suite

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaCheck {
    pub lemma_id: &'static str,
    pub n_samples: usize,
    /// Largest observed lhs/bound; for the scale checks, the empirical
    /// constant or the ratio between the two scales.
    pub worst_ratio: f64,
    pub witness_x: Vec<f64>,
    pub witness_z: Vec<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaReport {
    pub entries: Vec<LemmaCheck>,
}

impl LemmaReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn get(&self, id: &str) -> Option<&LemmaCheck> {
        self.entries.iter().find(|e| e.lemma_id == id)
    }

    /// CSV with columns `lemma_id,n_samples,worst_ratio,witness_x,witness_z,pass`;
    /// vector witnesses are `;`-joined.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["lemma_id", "n_samples", "worst_ratio", "witness_x", "witness_z", "pass"])?;
        for e in &self.entries {
            wr.write_record([
                e.lemma_id.to_string(),
                e.n_samples.to_string(),
                format!("{:e}", e.worst_ratio),
                join(&e.witness_x),
                join(&e.witness_z),
                e.pass.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn join(v: &[f64]) -> String {
    v.iter().map(|c| format!("{c:e}")).collect::<Vec<_>>().join(";")
}

#[derive(Clone, Copy, Debug)]
pub struct LemmaConfig {
    pub r: f64,
    pub n_samples: usize,
    pub box_radius: f64,
    pub seed: u64,
}

struct Sample {
    x: Vec<f64>,
    z: Vec<f64>,
    // (lemma index, value) for bound checks
    ratios: [f64; 6],
    m_minus_one: [f64; 2],
    div_gap: [f64; 2],
}

const BOUND_IDS: [&str; 6] = ["y_bound", "q_bound", "det_lower", "m_range", "p_remainder", "q_lipschitz"];

/// Allowed spread between the empirical constants measured with |z| < r
/// and with |z| < r/10.
pub const SCALE_STABILITY: f64 = 4.0;

/// Samples `(x, z)` with `|x| ≤ box_radius`, `|z| < r` and checks the
/// inverse-flow bounds: `|y| ≤ 2|x| + 1`, `|q| ≤ 2K(1+|x|)|z|`,
/// `det(1+M) ≥ 2^{-d}`, `m ∈ [2^{-d}, 2^d]`, `|P| ≤ d!(dK|z|)²`,
/// `|q(x1,z) - q(x2,z)| ≤ 2K|z||x1 - x2|`. Constants the bounds leave
/// unnamed (`|m-1| ≤ C|z|`, `|div p(x) - div p(y)| ≤ C|z|²`) are reported
/// as empirical suprema and must agree within [`SCALE_STABILITY`] between
/// `|z| < r` and `|z| < r/10`.
pub fn lemma_suite(model: &SdeModel, cfg: &LemmaConfig) -> Result<LemmaReport> {
    let r0 = admissible_radius(model);
    if !(cfg.r > 0.0 && cfg.r < r0) {
        return Err(Error::invalid(format!("lemma radius r={} must lie in (0, r0={r0})", cfg.r)));
    }
    if cfg.n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    let d = model.d;
    let k = model.k;
    let two_d = 2f64.powi(d as i32);
    let factorial: f64 = (1..=d).map(|i| i as f64).product();
    let tol = 1e-13;

    let samples: Vec<std::result::Result<Sample, (Vec<f64>, Vec<f64>)>> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let x = uniform_ball(&mut rng, d, cfg.box_radius);
            let mut z = uniform_ball(&mut rng, d, cfg.r);
            while norm(&z) == 0.0 {
                z = uniform_ball(&mut rng, d, cfg.r);
            }
            let x2 = uniform_ball(&mut rng, d, cfg.box_radius);
            let zs: Vec<f64> = z.iter().map(|c| c / 10.0).collect();
            let fail = || (x.clone(), z.clone());

            let sol = solve_inverse(model, &x, &z, tol).map_err(|_| fail())?;
            let sol2 = solve_inverse(model, &x2, &z, tol).map_err(|_| fail())?;
            let sol_s = solve_inverse(model, &x, &zs, tol).map_err(|_| fail())?;
            let exp = compute_m(model, &sol.y, &z).map_err(|_| fail())?;
            let zn = norm(&z);
            let xn = norm(&x);

            let lip_den = 2.0 * k * zn * dist(&x, &x2);
            let ratios = [
                norm(&sol.y) / (2.0 * xn + 1.0),
                norm(&sol.q) / (2.0 * k * (1.0 + xn) * zn),
                two_d.recip() / exp.det,
                (sol.m / two_d).max(1.0 / (two_d * sol.m)),
                exp.p.abs() / (factorial * (d as f64 * k * zn).powi(2)),
                if lip_den > 0.0 { dist(&sol.q, &sol2.q) / lip_den } else { 0.0 },
            ];
            let div_gap = |zz: &[f64], y: &[f64]| {
                (model.jump_divergence(&x, zz) - model.jump_divergence(y, zz)).abs() / norm(zz).powi(2)
            };
            Ok(Sample {
                m_minus_one: [(sol.m - 1.0).abs() / zn, (sol_s.m - 1.0).abs() / norm(&zs)],
                div_gap: [div_gap(&z, &sol.y), div_gap(&zs, &sol_s.y)],
                ratios,
                x,
                z,
            })
        })
        .collect();

    let n = cfg.n_samples;
    let mut entries = Vec::new();
    let solve_failure = samples.iter().find_map(|s| s.as_ref().err());
    entries.push(LemmaCheck {
        lemma_id: "inverse_solve",
        n_samples: n,
        worst_ratio: if solve_failure.is_some() { f64::INFINITY } else { 0.0 },
        witness_x: solve_failure.map(|f| f.0.clone()).unwrap_or_default(),
        witness_z: solve_failure.map(|f| f.1.clone()).unwrap_or_default(),
        pass: solve_failure.is_none(),
    });
    let ok: Vec<&Sample> = samples.iter().filter_map(|s| s.as_ref().ok()).collect();
    if ok.is_empty() {
        return Ok(LemmaReport { entries });
    }

    for (li, id) in BOUND_IDS.iter().enumerate() {
        let worst = argmax(&ok, |s| s.ratios[li]);
        let ratio = worst.ratios[li];
        entries.push(LemmaCheck {
            lemma_id: id,
            n_samples: ok.len(),
            worst_ratio: ratio,
            witness_x: worst.x.clone(),
            witness_z: worst.z.clone(),
            pass: ratio <= 1.0 + 1e-12,
        });
    }

    for (id, scale_id, get) in [
        ("m_minus_one", "m_minus_one_scale", (|s: &Sample| s.m_minus_one) as fn(&Sample) -> [f64; 2]),
        ("div_p_gap", "div_p_gap_scale", |s: &Sample| s.div_gap),
    ] {
        let worst = argmax(&ok, |s| get(s)[0]);
        let sup = get(worst)[0];
        let sup_small = ok.iter().map(|s| get(s)[1]).fold(0.0, f64::max);
        entries.push(LemmaCheck {
            lemma_id: id,
            n_samples: ok.len(),
            worst_ratio: sup,
            witness_x: worst.x.clone(),
            witness_z: worst.z.clone(),
            pass: sup.is_finite(),
        });
        let spread = scale_spread(sup, sup_small);
        entries.push(LemmaCheck {
            lemma_id: scale_id,
            n_samples: ok.len(),
            worst_ratio: spread,
            witness_x: Vec::new(),
            witness_z: Vec::new(),
            pass: spread <= SCALE_STABILITY,
        });
    }
    Ok(LemmaReport { entries })
}

fn argmax<'a>(samples: &[&'a Sample], f: impl Fn(&Sample) -> f64) -> &'a Sample {
    let key = |s: &Sample| {
        let v = f(s);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    samples
        .iter()
        .copied()
        .reduce(|a, b| if key(b) > key(a) { b } else { a })
        .expect("non-empty")
}

/// max(a/b, b/a), with two vanishing suprema counted as perfectly stable.
/// Values below 1e-9 are treated as zero: they arise when the quantity
/// vanishes identically and only roundoff remains.
fn scale_spread(a: f64, b: f64) -> f64 {
    const FLOOR: f64 = 1e-9;
    match (a > FLOOR, b > FLOOR) {
        (false, false) => 1.0,
        (true, true) => (a / b).max(b / a),
        _ => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Diffusion, Drift, JumpMap, Polynomial};
    use approx::assert_abs_diff_eq;

    fn model_1d(jump: JumpMap, k: f64) -> SdeModel {
        SdeModel::ou_1d(1.0, 1.0, jump, k).unwrap()
    }

    #[test]
    fn admissible_radius_values() {
        assert_eq!(admissible_radius(&model_1d(JumpMap::Zero, 1.0)), 0.125);
        let m2 = SdeModel::new(
            2,
            Drift::Constant { value: vec![0.0; 2] },
            Diffusion::Scalar { value: 1.0 },
            JumpMap::Zero,
            0.5,
            1.0,
        )
        .unwrap();
        assert_eq!(admissible_radius(&m2), 0.125);
        assert_abs_diff_eq!(admissible_radius(&model_1d(JumpMap::Zero, 10.0)), 0.0125, epsilon = 1e-16);
    }

    #[test]
    fn identity_flow_for_zero_jump() {
        let r = solve_inverse(&model_1d(JumpMap::Zero, 1.0), &[3.7], &[0.1], 1e-14).unwrap();
        assert_eq!(r.y, vec![3.7]);
        assert_eq!(r.q, vec![0.0]);
        assert_eq!(r.m, 1.0);
    }

    #[test]
    fn geometric_jump_closed_form() {
        let r = solve_inverse(&model_1d(JumpMap::Geometric, 1.0), &[2.0], &[0.1], 1e-14).unwrap();
        assert_abs_diff_eq!(r.y[0], 2.0 / 1.1, epsilon = 1e-13);
        assert_abs_diff_eq!(r.q[0], 0.2 / 1.1, epsilon = 1e-13);
        assert_abs_diff_eq!(r.m, 1.0 / 1.1, epsilon = 1e-14);
    }

    #[test]
    fn additive_jump_converges_in_one_step() {
        let r = solve_inverse(&model_1d(JumpMap::Additive, 1.0), &[0.0], &[0.05], 1e-14).unwrap();
        assert_eq!(r.y, vec![-0.05]);
        assert_eq!(r.q, vec![0.05]);
        assert_eq!(r.m, 1.0);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn zero_jump_size_short_circuits() {
        let r = solve_inverse(&model_1d(JumpMap::Geometric, 1.0), &[5.0], &[0.0], 1e-14).unwrap();
        assert_eq!((r.y[0], r.q[0], r.m, r.iterations), (5.0, 0.0, 1.0, 0));
    }

    #[test]
    fn rejects_large_jumps_and_tiny_tolerances() {
        let m = model_1d(JumpMap::Geometric, 1.0);
        assert!(matches!(
            solve_inverse(&m, &[0.0], &[0.2], 1e-12),
            Err(Error::OutsideAdmissibleRadius { .. })
        ));
        assert!(solve_inverse(&m, &[0.0], &[0.01], 1e-16).is_err());
    }

    #[test]
    fn non_contracting_map_is_reported() {
        // p = y³ z violates the Jacobian bound far out; the iteration blows up.
        let m = model_1d(
            JumpMap::Polynomial { components: vec![Polynomial::new(vec![(1.0, vec![3, 1])])] },
            1.0,
        );
        let err = solve_inverse(&m, &[50.0], &[0.1], 1e-12).unwrap_err();
        assert!(matches!(err, Error::NonContraction { .. } | Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn det_expansion_examples() {
        let e = compute_m(&model_1d(JumpMap::Zero, 1.0), &[1.0], &[0.1]).unwrap();
        assert_eq!((e.tr_m, e.p, e.det), (0.0, 0.0, 1.0));

        let e = compute_m(&model_1d(JumpMap::Geometric, 1.0), &[5.0], &[0.1]).unwrap();
        assert_abs_diff_eq!(e.tr_m, 0.1);
        assert_eq!(e.p, 0.0);
        assert_abs_diff_eq!(e.det, 1.1, epsilon = 1e-15);

        // p = (y2 z1, y1 z2): M = [[0, z1], [z2, 0]], det(1+M) = 1 - z1 z2.
        let swap = SdeModel::new(
            2,
            Drift::Constant { value: vec![0.0; 2] },
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
        let e = compute_m(&swap, &[0.4, -0.3], &[0.1, 0.1]).unwrap();
        assert_abs_diff_eq!(e.det, 0.99, epsilon = 1e-9);
        assert_abs_diff_eq!(e.tr_m, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e.p, -0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(e.det, 1.0 + e.tr_m + e.p, epsilon = 1e-12);
    }

    #[test]
    fn non_positive_determinant_is_an_error() {
        // p = -2 y z at z = 1: 1 + D_y p = -1.
        let m = model_1d(
            JumpMap::Polynomial { components: vec![Polynomial::new(vec![(-2.0, vec![1, 1])])] },
            1.0,
        );
        assert!(matches!(compute_m(&m, &[1.0], &[1.0]), Err(Error::NotInvertible { .. })));
    }

    #[test]
    fn residual_contracts_every_step() {
        let m = model_1d(JumpMap::Sine, 1.0);
        for (x, z) in [(3.0, 0.1), (-7.5, -0.12), (0.4, 0.05)] {
            let (res, hist) = solve_inverse_traced(&m, &[x], &[z], 1e-14).unwrap();
            assert!(res.residual <= 1e-14);
            for w in hist.windows(2) {
                if w[0] > 1e-12 {
                    assert!(w[1] <= m.k * z.abs() * w[0] * (1.0 + 1e-9), "{hist:?}");
                }
            }
            let back = res.y[0] + m.jump(&res.y, &[z])[0];
            assert!((back - x).abs() <= 2e-14);
        }
    }

    #[test]
    fn zero_jump_lemma_suite() {
        let cfg = LemmaConfig { r: 0.1, n_samples: 10_000, box_radius: 10.0, seed: 3 };
        let rep = lemma_suite(&model_1d(JumpMap::Zero, 1.0), &cfg).unwrap();
        assert!(rep.all_pass(), "{rep:#?}");
        assert_eq!(rep.get("m_minus_one").unwrap().worst_ratio, 0.0);
        assert_eq!(rep.get("q_bound").unwrap().worst_ratio, 0.0);
    }

    #[test]
    fn geometric_lemma_suite_closed_form_constant() {
        let cfg = LemmaConfig { r: 0.1, n_samples: 10_000, box_radius: 10.0, seed: 5 };
        let rep = lemma_suite(&model_1d(JumpMap::Geometric, 1.0), &cfg).unwrap();
        assert!(rep.all_pass(), "{rep:#?}");
        // |m - 1| / |z| = 1 / (1 + z) ≤ 1 / (1 - r)
        let c = rep.get("m_minus_one").unwrap().worst_ratio;
        assert!(c <= 1.0 / 0.9 + 1e-9 && c > 1.0, "{c}");
        // det(1 + M) ≥ 1/2 everywhere
        assert!(rep.get("det_lower").unwrap().worst_ratio <= 0.5 / 0.9 + 1e-12);
    }

    #[test]
    fn lemma_suite_rejects_radius_above_r0() {
        let cfg = LemmaConfig { r: 0.2, n_samples: 10, box_radius: 1.0, seed: 0 };
        assert!(lemma_suite(&model_1d(JumpMap::Geometric, 1.0), &cfg).is_err());
    }

    #[test]
    fn lemma_csv_has_stable_header() {
        let cfg = LemmaConfig { r: 0.05, n_samples: 50, box_radius: 2.0, seed: 1 };
        let rep = lemma_suite(&model_1d(JumpMap::Sine, 1.0), &cfg).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("lemma_id,n_samples,worst_ratio,witness_x,witness_z,pass\n"));
        assert_eq!(text.lines().count(), rep.entries.len() + 1);
    }
}
