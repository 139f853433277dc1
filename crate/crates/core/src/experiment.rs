//! Config-driven experiments: parse a TOML config, run the requested stages
//! in dependency order and write per-stage CSV reports plus `summary.csv`.
//!
//! Every random draw derives from the top-level `seed` through
//! [`derive_seed`] with the stage name as label.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::inverse_flow::{admissible_radius, lemma_suite, LemmaConfig};
use crate::mc_oracle::{kde_density, l1_distance, simulate, Bandwidth, McConfig};
use crate::model::{
    validate_model, Diffusion, Drift, JumpMap, LevyMeasure, PowerDensity, SdeModel, Sides, ValidationConfig,
};
use crate::operators::{assemble_full, check_support_margin, duality_gap, OperatorSet};
use crate::quadrature::{split_measure, QuadratureOptions, QuadratureSplit};
use crate::rng::derive_seed;
use crate::semigroup::{
    dissipativity_check, duality_set_pairing, evolve, write_dissipativity_csv, BumpFamily, EvolutionReport,
    EvolveOptions, Norm,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Lemmas,
    Assemble,
    Certify,
    Evolve,
    McCompare,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Validate, Stage::Lemmas, Stage::Assemble, Stage::Certify, Stage::Evolve, Stage::McCompare];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Lemmas => "lemmas",
            Stage::Assemble => "assemble",
            Stage::Certify => "certify",
            Stage::Evolve => "evolve",
            Stage::McCompare => "mc_compare",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}`; expected one of validate, lemmas, assemble, certify, evolve, mc_compare")))
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d: usize,
    pub k: f64,
    pub alpha: f64,
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub jump: JumpMap,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub z: Vec<f64>,
    pub w: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasurePart {
    Atoms { atoms: Vec<AtomSpec> },
    /// c·|z|^{-d-β} on 0 < |z| ≤ z_max (z_max omitted: unbounded).
    StableDensity {
        c: f64,
        beta: f64,
        z_max: Option<f64>,
        #[serde(default)]
        sides: Sides,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default)]
    pub parts: Vec<MeasurePart>,
}

impl Default for MeasureSpec {
    fn default() -> Self {
        MeasureSpec { s: 1.0, parts: Vec::new() }
    }
}

fn default_s() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub half_width: f64,
    pub h: f64,
}

/// `r = "auto"` (half the admissible radius) or an explicit value.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum RadiusSpec {
    Value(f64),
    Keyword(String),
}

impl Default for RadiusSpec {
    fn default() -> Self {
        RadiusSpec::Keyword("auto".into())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureSpec {
    pub n_inner: usize,
    pub tol: f64,
    pub nodes_per_panel: usize,
    pub n_angles: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        let o = QuadratureOptions::default();
        QuadratureSpec { n_inner: o.n_inner, tol: o.tol, nodes_per_panel: o.nodes_per_panel, n_angles: o.n_angles }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateSpec {
    pub n_samples: usize,
    pub sample_radius: f64,
}

impl Default for ValidateSpec {
    fn default() -> Self {
        ValidateSpec { n_samples: 2000, sample_radius: 10.0 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LemmaSpec {
    pub n_samples: usize,
    pub box_radius: f64,
}

impl Default for LemmaSpec {
    fn default() -> Self {
        LemmaSpec { n_samples: 10_000, box_radius: 10.0 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifySpec {
    pub lambdas: Vec<f64>,
    pub n_functions: usize,
    /// Allowed dissipativity deficit of `A_r + I_r` is `c_tol·h·‖u‖₁`.
    pub c_tol: f64,
    /// Test-function centers lie in `[-R, R]^d` (default X/4).
    pub center_radius: Option<f64>,
    /// Largest test-function width (default X/32).
    pub max_width: Option<f64>,
}

impl Default for CertifySpec {
    fn default() -> Self {
        CertifySpec { lambdas: vec![0.1, 1.0, 10.0], n_functions: 100, c_tol: 10.0, center_radius: None, max_width: None }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Gaussian { mean: Vec<f64>, std: f64 },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionSpec {
    pub t_end: f64,
    pub dt: f64,
    pub u0: InitialSpec,
    #[serde(default = "default_solver_tol")]
    pub tol: f64,
    #[serde(default = "default_contraction_tol")]
    pub contraction_tol: f64,
    #[serde(default = "default_mass_tol")]
    pub mass_tol: f64,
}

fn default_solver_tol() -> f64 {
    1e-12
}

fn default_contraction_tol() -> f64 {
    1e-8
}

fn default_mass_tol() -> f64 {
    1e-6
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum BandwidthSpec {
    Value(f64),
    Keyword(String),
}

impl Default for BandwidthSpec {
    fn default() -> Self {
        BandwidthSpec::Keyword("auto".into())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    pub n_paths: usize,
    pub n_steps: usize,
    /// Jumps below this size are dropped (default: the split radius r).
    pub jump_cutoff: Option<f64>,
    #[serde(default)]
    pub antithetic: bool,
    #[serde(default)]
    pub bandwidth: BandwidthSpec,
    #[serde(default = "default_max_l1")]
    pub max_l1: f64,
    #[serde(default)]
    pub dump_samples: bool,
}

fn default_max_l1() -> f64 {
    0.1
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    /// Also write `L.coo` and `Lstar.coo`.
    pub dump_matrices: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    pub run: Vec<Stage>,
    pub model: ModelSpec,
    #[serde(default)]
    pub measure: MeasureSpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub r: RadiusSpec,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    #[serde(default)]
    pub validate: ValidateSpec,
    #[serde(default)]
    pub lemmas: LemmaSpec,
    #[serde(default)]
    pub certify: CertifySpec,
    pub evolution: Option<EvolutionSpec>,
    pub mc: Option<McSpec>,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(skip)]
    source: String,
}

/// Line (1-based) of the first `key = ...` or `[key]` in the source.
fn key_line(source: &str, key: &str) -> Option<usize> {
    source.lines().position(|l| {
        let t = l.trim_start();
        let header = t.strip_prefix("[[").or_else(|| t.strip_prefix('['));
        if let Some(rest) = header {
            return rest.trim_start().starts_with(key) && rest[key.len().min(rest.len())..].trim_start().starts_with(']');
        }
        t.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

/// The objects a config describes, built and checked.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub model: SdeModel,
    pub measure: LevyMeasure,
    pub grid: Grid,
    pub r: f64,
    pub quad_options: QuadratureOptions,
}

impl ExperimentConfig {
    pub fn parse(source: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(source).map_err(|e| Error::Config {
            line: e.span().map(|s| source[..s.start].matches('\n').count() + 1),
            message: e.message().to_string(),
        })?;
        cfg.source = source.to_string();
        if cfg.schema != SCHEMA_VERSION {
            return Err(cfg.error("schema", format!("unsupported schema version {}; expected {SCHEMA_VERSION}", cfg.schema)));
        }
        if cfg.run.is_empty() {
            return Err(cfg.error("run", "run list is empty".into()));
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&source)
    }

    fn error(&self, key: &str, message: String) -> Error {
        Error::Config { line: key_line(&self.source, key), message }
    }

    /// Builds the model, measure and grid and checks the cross-field
    /// invariants: `r < r0 = 1/(8dK)`, `ε ≤ r`, sensible stage parameters.
    pub fn resolve(&self) -> Result<Resolved> {
        let m = &self.model;
        let model = SdeModel::new(m.d, m.drift.clone(), m.diffusion.clone(), m.jump.clone(), m.k, m.alpha)
            .map_err(|e| self.error("model", e.to_string()))?;
        let mut atoms = Vec::new();
        let mut density = None;
        for part in &self.measure.parts {
            match part {
                MeasurePart::Atoms { atoms: list } => atoms.extend(list.iter().map(|a| (a.z.clone(), a.w))),
                MeasurePart::StableDensity { c, beta, z_max, sides } => {
                    if density.is_some() {
                        return Err(self.error("parts", "at most one stable_density part is supported".into()));
                    }
                    density = Some(PowerDensity { c: *c, beta: *beta, z_max: z_max.unwrap_or(f64::INFINITY), sides: *sides });
                }
            }
        }
        let measure = LevyMeasure::new(m.d, atoms, density, self.measure.s).map_err(|e| self.error("parts", e.to_string()))?;
        let grid = Grid::new(m.d, self.grid.half_width, self.grid.h).map_err(|e| self.error("grid", e.to_string()))?;
        let r0 = admissible_radius(&model);
        let r = match &self.r {
            RadiusSpec::Keyword(k) if k == "auto" => 0.5 * r0,
            RadiusSpec::Keyword(k) => return Err(self.error("r", format!("r must be a number or \"auto\", got \"{k}\""))),
            RadiusSpec::Value(v) => *v,
        };
        if !(r > 0.0 && r < r0) {
            return Err(self.error(
                "r",
                format!("split radius r = {r} must satisfy 0 < r < r0 = 1/(8dK) = {r0} (d = {}, K = {})", m.d, m.k),
            ));
        }
        let q = &self.quadrature;
        let quad_options =
            QuadratureOptions { n_inner: q.n_inner, tol: q.tol, nodes_per_panel: q.nodes_per_panel, n_angles: q.n_angles };
        if self.run.contains(&Stage::Evolve) || self.run.contains(&Stage::McCompare) {
            let ev = self.evolution.as_ref().ok_or_else(|| self.error("run", "stage evolve/mc_compare needs an [evolution] table".into()))?;
            if !(ev.t_end > 0.0 && ev.dt > 0.0 && ev.dt <= ev.t_end) {
                return Err(self.error("evolution", format!("need 0 < dt <= t_end, got dt = {}, t_end = {}", ev.dt, ev.t_end)));
            }
            let InitialSpec::Gaussian { mean, std } = &ev.u0;
            if mean.len() != m.d || !(*std > 0.0) {
                return Err(self.error("u0", format!("u0 needs a mean of length {} and a positive std", m.d)));
            }
        }
        if self.run.contains(&Stage::McCompare) {
            let mc = self.mc.as_ref().ok_or_else(|| self.error("run", "stage mc_compare needs an [mc] table".into()))?;
            if let Some(eps) = mc.jump_cutoff {
                if !(eps > 0.0 && eps <= r) {
                    return Err(self.error("jump_cutoff", format!("jump_cutoff = {eps} must lie in (0, r = {r}]")));
                }
            }
            if let BandwidthSpec::Keyword(k) = &mc.bandwidth {
                if k != "auto" {
                    return Err(self.error("bandwidth", format!("bandwidth must be a number or \"auto\", got \"{k}\"")));
                }
            }
        }
        if self.certify.lambdas.iter().any(|l| !(*l > 0.0)) {
            return Err(self.error("lambdas", "every λ must be positive".into()));
        }
        Ok(Resolved { model, measure, grid, r, quad_options })
    }
}

/// One row of `summary.csv`. `threshold = None` marks an informational row.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub stage: Stage,
    pub check: String,
    pub value: f64,
    pub threshold: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    /// Written files, relative to the output directory.
    pub files: Vec<String>,
    pub checks: Vec<CheckRow>,
    /// Stage that aborted with an error, and the message.
    pub failure: Option<(Stage, String)>,
}

impl RunOutcome {
    pub fn all_pass(&self) -> bool {
        self.failure.is_none() && self.checks.iter().all(|c| c.pass)
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    res: Resolved,
    out: &'a Path,
    quad: Option<QuadratureSplit>,
    ops: Option<OperatorSet>,
    evolution: Option<EvolutionReport>,
    outcome: RunOutcome,
}

impl Runner<'_> {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.outcome.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn check(&mut self, stage: Stage, check: &str, value: f64, threshold: f64, pass: bool) {
        self.outcome.checks.push(CheckRow { stage, check: check.into(), value, threshold: Some(threshold), pass });
    }

    fn info(&mut self, stage: Stage, check: &str, value: f64) {
        self.outcome.checks.push(CheckRow { stage, check: check.into(), value, threshold: None, pass: true });
    }

    fn seed(&self, stage: Stage) -> u64 {
        derive_seed(self.cfg.seed, stage.name())
    }

    fn quad(&mut self) -> Result<&QuadratureSplit> {
        if self.quad.is_none() {
            self.quad = Some(split_measure(&self.res.measure, self.res.r, &self.res.quad_options)?);
        }
        Ok(self.quad.as_ref().expect("just built"))
    }

    fn ops(&mut self) -> Result<&OperatorSet> {
        if self.ops.is_none() {
            self.quad()?;
            let quad = self.quad.as_ref().expect("built above");
            self.ops = Some(assemble_full(&self.res.model, &self.res.grid, quad)?);
        }
        Ok(self.ops.as_ref().expect("just built"))
    }

    fn bumps(&self, stage: Stage, signed: bool) -> BumpFamily {
        let x = self.res.grid.half_width;
        BumpFamily {
            center_radius: self.cfg.certify.center_radius.unwrap_or(x / 4.0),
            max_width: self.cfg.certify.max_width.unwrap_or(x / 32.0),
            seed: self.seed(stage),
            signed,
        }
    }

    fn validate(&mut self) -> Result<()> {
        let v = &self.cfg.validate;
        let cfg = ValidationConfig { n_samples: v.n_samples, seed: self.seed(Stage::Validate), sample_radius: v.sample_radius };
        let rep = validate_model(&self.res.model, &self.res.measure, &cfg)?;
        rep.write_csv(self.create("validation.csv")?)?;
        let failed = rep.entries.iter().filter(|e| e.status != crate::model::CheckStatus::Pass).count();
        self.check(Stage::Validate, "failed_assumptions", failed as f64, 0.0, failed == 0);
        Ok(())
    }

    fn lemmas(&mut self) -> Result<()> {
        let l = &self.cfg.lemmas;
        let cfg = LemmaConfig { r: self.res.r, n_samples: l.n_samples, box_radius: l.box_radius, seed: self.seed(Stage::Lemmas) };
        let rep = lemma_suite(&self.res.model, &cfg)?;
        rep.write_csv(self.create("lemmas.csv")?)?;
        let failed = rep.entries.iter().filter(|e| !e.pass).count();
        self.check(Stage::Lemmas, "failed_lemmas", failed as f64, 0.0, failed == 0);
        Ok(())
    }

    fn assemble(&mut self) -> Result<()> {
        let stage = Stage::Assemble;
        self.ops()?;
        let ops = self.ops.clone().expect("assembled");
        let quad = self.quad.clone().expect("built with the operators");
        let grid = self.res.grid;
        let mut w = csv::Writer::from_writer(self.create("operators.csv")?);
        w.write_record(["part", "nnz", "norm_l1", "norm_inf", "max_abs"])?;
        for op in [&ops.ar, &ops.ir, &ops.jr, &ops.ar_star, &ops.ir_star, &ops.jr_star, &ops.l, &ops.l_star] {
            w.write_record([
                op.part.to_string(),
                op.nnz().to_string(),
                format!("{:.16e}", op.norm_l1()),
                format!("{:.16e}", op.norm_inf()),
                format!("{:.16e}", op.max_abs()),
            ])?;
        }
        w.flush()?;
        drop(w);
        if self.cfg.output.dump_matrices {
            ops.l.write_coo(self.create("L.coo")?)?;
            ops.l_star.write_coo(self.create("Lstar.coo")?)?;
        }

        let bound = 2.0 * quad.outer_mass;
        let n1 = ops.jr.norm_l1();
        let ninf = ops.jr_star.norm_inf();
        self.check(stage, "jr_norm_l1_minus_bound", n1 - bound, 1e-10, n1 <= bound + 1e-10);
        self.check(stage, "jr_star_norm_inf_minus_bound", ninf - bound, 1e-10, ninf <= bound + 1e-10);

        // duality gaps and interior conservation on smooth interior test pairs
        let us = self.bumps(stage, true);
        let fs = BumpFamily { seed: us.seed ^ 1, ..us.clone() };
        let (mut jgap, mut agap, mut igap, mut mass) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for k in 0..20 {
            let u = us.sample(&grid, k);
            check_support_margin(&self.res.model, &grid, &quad, &u, 0.0)?;
            let f = fs.sample(&grid, k);
            let scale = |lp: &crate::sparse::SparseOperator| {
                let lu = GridFunction { grid, values: lp.apply(&u.values) };
                lu.norm_1() * f.norm_inf()
            };
            jgap = jgap.max(duality_gap(&ops.jr, &ops.jr_star, &u, &f)? / scale(&ops.jr).max(f64::MIN_POSITIVE));
            agap = agap.max(duality_gap(&ops.ar, &ops.ar_star, &u, &f)? / scale(&ops.ar).max(f64::MIN_POSITIVE));
            igap = igap.max(duality_gap(&ops.ir, &ops.ir_star, &u, &f)? / scale(&ops.ir).max(f64::MIN_POSITIVE));
            let lu = GridFunction { grid, values: ops.l.apply(&u.values) };
            mass = mass.max(lu.mass().abs() / u.norm_1());
        }
        let jgap = if ops.jr.nnz() == 0 { 0.0 } else { jgap };
        let igap = if ops.ir.nnz() == 0 { 0.0 } else { igap };
        self.check(stage, "jr_duality_gap_rel", jgap, 1e-12, jgap <= 1e-12);
        self.info(stage, "ar_duality_gap_rel", agap);
        self.info(stage, "ir_duality_gap_rel", igap);
        self.check(stage, "interior_mass_rel", mass, 1e-8, mass <= 1e-8);
        self.info(stage, "outer_mass", quad.outer_mass);
        self.info(stage, "dropped_inner_moment", quad.dropped_inner_moment);
        Ok(())
    }

    fn certify(&mut self) -> Result<()> {
        let stage = Stage::Certify;
        self.ops()?;
        let ops = self.ops.clone().expect("assembled");
        let quad = self.quad.clone().expect("built with the operators");
        let grid = self.res.grid;
        let c = &self.cfg.certify;
        let fam = self.bumps(stage, true);
        for k in 0..c.n_functions as u64 {
            check_support_margin(&self.res.model, &grid, &quad, &fam.sample(&grid, k), 0.0)?;
        }
        let local = ops.local_and_small()?;
        let jr = dissipativity_check(&ops.jr, &grid, &c.lambdas, c.n_functions, &fam, Norm::L1)?;
        let ai = dissipativity_check(&local, &grid, &c.lambdas, c.n_functions, &fam, Norm::L1)?;
        let lstar = dissipativity_check(&ops.l_star, &grid, &c.lambdas, c.n_functions, &fam, Norm::LInf)?;
        let mut rows: Vec<(&str, _)> = Vec::new();
        rows.extend(jr.iter().map(|r| ("J_r", r)));
        rows.extend(ai.iter().map(|r| ("A_r+I_r", r)));
        rows.extend(lstar.iter().map(|r| ("L*", r)));
        write_dissipativity_csv(&rows, self.create("dissipativity.csv")?)?;

        let worst = |reps: &[crate::semigroup::DissipativityReport]| {
            reps.iter().map(|r| r.worst_relative_deficit()).fold(0.0, f64::min)
        };
        let (wj, wa, wl) = (worst(&jr), worst(&ai), worst(&lstar));
        let eps_h = c.c_tol * grid.h;
        self.check(stage, "jr_worst_relative_deficit", wj, -1e-10, wj >= -1e-10);
        self.check(stage, "ar_ir_worst_relative_deficit", wa, -eps_h, wa >= -eps_h);
        self.info(stage, "lstar_linf_worst_relative_deficit", wl);

        let mut w = csv::Writer::from_writer(self.create("duality_set.csv")?);
        w.write_record(["function", "norm_l1", "pairing"])?;
        let mut worst_pair = f64::NEG_INFINITY;
        for k in 0..c.n_functions as u64 {
            let u = fam.sample(&grid, k);
            let v = duality_set_pairing(&ops.jr, &u)?;
            let n1 = u.norm_1();
            worst_pair = worst_pair.max(v / (n1 * n1));
            w.write_record([k.to_string(), format!("{n1:.16e}"), format!("{v:.16e}")])?;
        }
        w.flush()?;
        self.check(stage, "duality_set_max_relative", worst_pair, 1e-10, worst_pair <= 1e-10);
        Ok(())
    }

    fn initial_density(&self) -> GridFunction {
        let ev = self.cfg.evolution.as_ref().expect("checked in resolve");
        let InitialSpec::Gaussian { mean, std } = &ev.u0;
        GridFunction::from_fn(self.res.grid, |x| {
            let r2: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
            (-0.5 * r2 / (std * std)).exp()
        })
    }

    fn run_evolution(&mut self) -> Result<()> {
        if self.evolution.is_some() {
            return Ok(());
        }
        let ev = self.cfg.evolution.clone().expect("checked in resolve");
        self.ops()?;
        let quad = self.quad.clone().expect("built with the operators");
        let u0 = self.initial_density();
        check_support_margin(&self.res.model, &self.res.grid, &quad, &u0, 1e-14)?;
        let opts = EvolveOptions { tol: ev.tol, ..EvolveOptions::default() };
        let rep = evolve(&self.ops.as_ref().expect("assembled").l, &u0, ev.t_end, ev.dt, &opts)?;
        self.evolution = Some(rep);
        Ok(())
    }

    fn evolve(&mut self) -> Result<()> {
        let stage = Stage::Evolve;
        self.run_evolution()?;
        let ev = self.cfg.evolution.clone().expect("checked in resolve");
        let rep = self.evolution.clone().expect("evolved");
        rep.write_csv(self.create("evolution.csv")?)?;
        rep.final_state.write_table(self.create("density.txt")?)?;
        let growth = rep.max_norm_growth();
        let drift = rep.max_mass_drift();
        self.check(stage, "max_l1_growth", growth, ev.contraction_tol, rep.is_contractive(ev.contraction_tol));
        self.check(stage, "max_mass_drift", drift, ev.mass_tol, drift <= ev.mass_tol);
        let sup0 = rep.final_state.norm_inf().max(f64::MIN_POSITIVE);
        self.info(stage, "worst_negativity", rep.worst_negativity(sup0));
        Ok(())
    }

    fn mc_compare(&mut self) -> Result<()> {
        let stage = Stage::McCompare;
        self.run_evolution()?;
        let spec = self.cfg.mc.clone().expect("checked in resolve");
        let ev = self.cfg.evolution.clone().expect("checked in resolve");
        let InitialSpec::Gaussian { mean, std } = ev.u0.clone();
        let cfg = McConfig {
            n_paths: spec.n_paths,
            n_steps: spec.n_steps,
            t_end: ev.t_end,
            jump_cutoff: spec.jump_cutoff.unwrap_or(self.res.r),
            seed: self.seed(stage),
            antithetic: spec.antithetic,
        };
        let x0 = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            use rand::Rng;
            mean.iter().map(|m| m + std * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
        };
        let samples = simulate(&self.res.model, &self.res.measure, x0, &cfg)?;
        let bw = match spec.bandwidth {
            BandwidthSpec::Value(b) => Bandwidth::Fixed(b),
            BandwidthSpec::Keyword(_) => Bandwidth::Auto,
        };
        let kde = kde_density(&samples, &self.res.grid, bw)?;
        let pde = &self.evolution.as_ref().expect("evolved").final_state;
        let dist = l1_distance(&kde, pde)?;
        let mut w = csv::Writer::from_writer(self.create("mc_compare.csv")?);
        w.write_record(["n_paths", "flagged", "jump_rate", "jump_cutoff", "dropped_jump_moment", "l1_distance"])?;
        w.write_record([
            samples.points.len().to_string(),
            samples.flagged.to_string(),
            format!("{:.16e}", samples.jump_rate),
            format!("{:.16e}", cfg.jump_cutoff),
            format!("{:.16e}", samples.dropped_jump_moment),
            format!("{dist:.16e}"),
        ])?;
        w.flush()?;
        drop(w);
        kde.write_table(self.create("kde.txt")?)?;
        if spec.dump_samples {
            samples.write_text(self.create("samples.txt")?)?;
        }
        self.check(stage, "l1_kde_vs_pde", dist, spec.max_l1, dist <= spec.max_l1);
        self.info(stage, "dropped_jump_moment", samples.dropped_jump_moment);
        Ok(())
    }

    fn write_summary(&mut self) -> Result<()> {
        let mut w = csv::Writer::from_writer(self.create("summary.csv")?);
        w.write_record(["stage", "check", "value", "threshold", "pass"])?;
        for c in &self.outcome.checks {
            w.write_record([
                c.stage.to_string(),
                c.check.clone(),
                format!("{:.6e}", c.value),
                c.threshold.map(|t| format!("{t:.6e}")).unwrap_or_default(),
                if c.threshold.is_none() { "info".into() } else { c.pass.to_string() },
            ])?;
        }
        if let Some((stage, msg)) = &self.outcome.failure {
            w.write_record([stage.to_string(), "error".into(), String::new(), String::new(), format!("false: {msg}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `stages` (or the config's run list when empty) in dependency order,
/// writing reports to `out`. A stage error stops the run; the summary is
/// written regardless.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, stages: &[Stage]) -> Result<RunOutcome> {
    let res = cfg.resolve()?;
    std::fs::create_dir_all(out)?;
    let mut todo: Vec<Stage> = if stages.is_empty() { cfg.run.clone() } else { stages.to_vec() };
    todo.sort();
    todo.dedup();
    let mut runner = Runner { cfg, res, out, quad: None, ops: None, evolution: None, outcome: RunOutcome::default() };
    for stage in todo {
        if (stage == Stage::Evolve || stage == Stage::McCompare) && cfg.evolution.is_none() {
            runner.outcome.failure = Some((stage, "no [evolution] table in the config".into()));
            break;
        }
        if stage == Stage::McCompare && cfg.mc.is_none() {
            runner.outcome.failure = Some((stage, "no [mc] table in the config".into()));
            break;
        }
        let result = match stage {
            Stage::Validate => runner.validate(),
            Stage::Lemmas => runner.lemmas(),
            Stage::Assemble => runner.assemble(),
            Stage::Certify => runner.certify(),
            Stage::Evolve => runner.evolve(),
            Stage::McCompare => runner.mc_compare(),
        };
        if let Err(e) = result {
            if matches!(e, Error::Io(_)) {
                return Err(e);
            }
            runner.outcome.failure = Some((stage, e.to_string()));
            break;
        }
    }
    runner.write_summary()?;
    Ok(runner.outcome)
}
