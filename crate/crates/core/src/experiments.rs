//! Experiment registry, suites and the CSV/JSON bundle they produce.
//!
//! Every experiment takes typed parameters (defaults filled in, unknown keys
//! rejected), runs against closed-form oracles and reports metrics, named
//! checks and tables. A suite runs its experiments concurrently and writes
//! one directory per experiment plus `manifest.json`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::control::{
    convexity_monotonicity_check, dp_semigroup, dynamic_programming_check, hopf_cole_oracle, viscosity_test, ControlProblem,
    QuadraticFamily, ValueField,
};
use crate::error::{Error, Result};
use crate::export::{density_table, fmt_f64, value_field_table, write_json, write_with_sidecar, Table};
use crate::generator::{
    domain_check, euler_reconstruct, fd_generator, fpk_residual, fpk_residual_against, kolmogorov_apply, resolvent_identity_check,
    resolvent_quadrature, DomainOptions, DomainVerdict, SemigroupEvaluator, RESOLVENT_HORIZON, RESOLVENT_ORDER,
};
use crate::kernels::{check_kernel_conditions, KernelCheckConfig, KernelFamily};
use crate::mehler::{
    ks_distance, lescot_generator, mu_charfn, mu_density_fft, sample_mu, truncation_convergence_study, DensityOptions, FiniteActivity,
    JumpDensity, JumpLaw, LevyMeasure, LevyTriplet, MehlerModel, Observable, SpectralMeasure,
};
use crate::mixedtop::{classify_convergence, ConvergenceOptions, Verdict};
use crate::sde::SdeModel;
use crate::statespace::{make_exhaustion, Grid, RngPolicy, ScalarField, Weight};

// ---------------------------------------------------------------------------
// outcomes

/// One named pass/fail gate: `value <relation> bound`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub relation: String,
    pub bound: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub metrics: Map<String, Value>,
    pub checks: Vec<Check>,
    pub tables: Vec<(String, Table)>,
}

impl Outcome {
    fn metric(&mut self, key: &str, v: impl Serialize) {
        self.metrics.insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    fn push(&mut self, name: impl Into<String>, value: f64, relation: &str, bound: f64, pass: bool) -> &mut Check {
        self.checks.push(Check { name: name.into(), value, relation: relation.into(), bound, pass, detail: None });
        self.checks.last_mut().expect("just pushed")
    }

    fn le(&mut self, name: impl Into<String>, value: f64, bound: f64) -> &mut Check {
        self.push(name, value, "<=", bound, value <= bound)
    }

    fn lt(&mut self, name: impl Into<String>, value: f64, bound: f64) -> &mut Check {
        self.push(name, value, "<", bound, value < bound)
    }

    fn ge(&mut self, name: impl Into<String>, value: f64, bound: f64) -> &mut Check {
        self.push(name, value, ">=", bound, value >= bound)
    }

    fn flag(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.push(name, if ok { 1.0 } else { 0.0 }, "==", 1.0, ok).detail = Some(detail.into());
    }

    fn table(&mut self, stem: &str, t: Table) {
        self.tables.push((stem.to_string(), t));
    }

    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn validation<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        validation(format!("{name} must be positive, got {v}"))
    }
}

fn decreasing_ladder(name: &str, ladder: &[f64], min_len: usize) -> Result<()> {
    if ladder.len() < min_len {
        return validation(format!("{name} needs at least {min_len} entries"));
    }
    for t in ladder {
        positive(name, *t)?;
    }
    if ladder.windows(2).any(|w| w[1] >= w[0]) {
        return validation(format!("{name} must be strictly decreasing"));
    }
    Ok(())
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn uniform_grid(half_width: f64, h: f64) -> Result<Grid> {
    let n = (2.0 * half_width / h).round() as usize + 1;
    Grid::uniform_1d(-half_width, half_width, n)
}

// ---------------------------------------------------------------------------
// dichotomy

/// Test functions whose OU image is known in closed form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrigField {
    Sin,
    Cos,
}

impl TrigField {
    pub fn field(self) -> ScalarField {
        match self {
            Self::Sin => ScalarField::sin(),
            Self::Cos => ScalarField::cos(),
        }
    }

    /// A point where the function equals 1.
    pub fn peak(self) -> f64 {
        match self {
            Self::Sin => PI / 2.0,
            Self::Cos => 0.0,
        }
    }

    /// `E f(e^{-at} x + sqrt(v_t) Z) = f(e^{-at} x) e^{-v_t/2}`.
    pub fn ou_image(self, a: f64, sigma: f64, t: f64, x: f64) -> f64 {
        let v = crate::kernels::ou_variance(a, sigma, t);
        let y = (-a * t).exp() * x;
        let f = match self {
            Self::Sin => y.sin(),
            Self::Cos => y.cos(),
        };
        f * (-v / 2.0).exp()
    }
}

/// Probes `peak + 2 pi k` with `|x| <= radius`: the function is 1 on all of
/// them, while the contracted argument `e^{-at} x` sweeps through every phase.
pub fn phase_winding_probes(peak: f64, radius: f64) -> Vec<f64> {
    let period = 2.0 * PI;
    let lo = ((-radius - peak) / period).ceil() as i64;
    let hi = ((radius - peak) / period).floor() as i64;
    (lo..=hi).map(|k| peak + period * k as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DichotomyRow {
    pub t: f64,
    /// `sup_{|x| <= R} |P_t phi - phi|`.
    pub compact: f64,
    /// Same over the far probes.
    pub far: f64,
    pub far_argmax: f64,
}

/// Deviation of the OU semigroup from the identity, on a compact and on a far
/// probe set, along the ladder. Uses Gauss–Hermite quadrature (no MC noise).
pub fn dichotomy_study(
    a: f64,
    sigma: f64,
    phi: &ScalarField,
    compact_radius: f64,
    compact_points: usize,
    far_probes: &[f64],
    ladder: &[f64],
) -> Result<Vec<DichotomyRow>> {
    if far_probes.is_empty() {
        return crate::error::invalid("no far probes");
    }
    let horizon = ladder.iter().cloned().fold(1.0, f64::max);
    let p = SemigroupEvaluator::ornstein_uhlenbeck(a, sigma, horizon);
    let xs = linspace(-compact_radius, compact_radius, compact_points.max(2));
    let dev = |t: f64, x: f64| -> Result<f64> { Ok((p.eval(t, phi, &[x])?.0 - phi.eval(&[x])?).abs()) };
    ladder
        .iter()
        .map(|&t| {
            let compact = xs.par_iter().map(|x| dev(t, *x)).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
            let far = far_probes.par_iter().map(|x| dev(t, *x)).collect::<Result<Vec<_>>>()?;
            let (k, v) = far.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (k, v)| if *v > b.1 { (k, *v) } else { b });
            Ok(DichotomyRow { t, compact, far: v, far_argmax: far_probes[k] })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DichotomyParams {
    pub a: f64,
    pub sigma: f64,
    pub phi: TrigField,
    pub compact_radius: f64,
    pub compact_points: usize,
    pub far_radius: f64,
    pub ladder: Vec<f64>,
    pub compact_tol: f64,
    pub far_floor: f64,
    /// Allowed increase of the compact column down the ladder.
    pub monotone_slack: f64,
}

impl Default for DichotomyParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            sigma: 1.0,
            phi: TrigField::Sin,
            compact_radius: 5.0,
            compact_points: 2001,
            far_radius: 1e4,
            ladder: vec![0.5, 0.1, 1e-2, 1e-3],
            compact_tol: 0.05,
            far_floor: 0.9,
            monotone_slack: 1e-12,
        }
    }
}

impl DichotomyParams {
    fn validate(&self) -> Result<()> {
        positive("a", self.a)?;
        positive("sigma", self.sigma)?;
        positive("compact_radius", self.compact_radius)?;
        positive("far_radius", self.far_radius)?;
        positive("compact_tol", self.compact_tol)?;
        positive("far_floor", self.far_floor)?;
        positive("monotone_slack", self.monotone_slack)?;
        decreasing_ladder("ladder", &self.ladder, 1)
    }

    fn run(&self, _policy: &RngPolicy) -> Result<Outcome> {
        let phi = self.phi.field();
        let far = phase_winding_probes(self.phi.peak(), self.far_radius);
        let mut ladder = vec![0.0];
        ladder.extend(&self.ladder);
        let rows = dichotomy_study(self.a, self.sigma, &phi, self.compact_radius, self.compact_points, &far, &ladder)?;

        let mut out = Outcome::default();
        let mut t = Table::new(["t", "compact_sup", "far_sup", "far_argmax"]);
        for r in &rows {
            t.push(&[r.t, r.compact, r.far, r.far_argmax]);
        }
        out.table("dichotomy", t);
        out.metric("far_probes", far.len());
        out.metric("rows", &rows);

        // quadrature against the closed-form image, on a few compact and far points
        let p = SemigroupEvaluator::ornstein_uhlenbeck(self.a, self.sigma, ladder.iter().cloned().fold(1.0, f64::max));
        let mut gap: f64 = 0.0;
        for &t in &self.ladder {
            for x in linspace(-self.compact_radius, self.compact_radius, 21).into_iter().chain(far.iter().step_by(97).cloned()) {
                gap = gap.max((p.eval(t, &phi, &[x])?.0 - self.phi.ou_image(self.a, self.sigma, t, x)).abs());
            }
        }
        out.metric("closed_form_gap", gap);

        let zero = &rows[0];
        out.le("t0_compact", zero.compact, 0.0);
        out.le("t0_far", zero.far, 0.0);
        let last = rows.last().expect("ladder is non-empty");
        out.lt("compact_at_smallest_t", last.compact, self.compact_tol);
        let worst_rise = rows[1..].windows(2).map(|w| w[1].compact - w[0].compact).fold(f64::NEG_INFINITY, f64::max);
        out.le("compact_monotone_rise", worst_rise.max(0.0), self.monotone_slack);
        let far_min = rows[1..].iter().map(|r| r.far).fold(f64::INFINITY, f64::min);
        out.ge("far_min", far_min, self.far_floor);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// kernel conditions

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelParams {
    pub a: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub eps: f64,
    pub tol: f64,
    pub particles: usize,
    pub compact_r0: f64,
    pub compact_ratio: f64,
    pub compacts: usize,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self { a: 1.0, sigma: 1.0, horizon: 1.0, eps: 0.05, tol: 1e-3, particles: 2000, compact_r0: 1.0, compact_ratio: 2.0, compacts: 3 }
    }
}

impl KernelParams {
    fn validate(&self) -> Result<()> {
        positive("a", self.a)?;
        positive("sigma", self.sigma)?;
        positive("horizon", self.horizon)?;
        positive("eps", self.eps)?;
        positive("tol", self.tol)?;
        positive("compact_r0", self.compact_r0)?;
        if self.eps >= 1.0 {
            return validation("eps must be below 1");
        }
        if self.particles == 0 || self.compacts == 0 || self.compact_ratio <= 1.0 {
            return validation("particles and compacts must be positive, compact_ratio above 1");
        }
        Ok(())
    }

    fn run(&self, policy: &RngPolicy) -> Result<Outcome> {
        let ex = make_exhaustion(self.compact_r0, self.compact_ratio, self.compacts)?;
        let cfg = KernelCheckConfig { particles: self.particles, policy: *policy, ..KernelCheckConfig::default_1d(self.horizon) };
        let tests = [ScalarField::sin(), ScalarField::cos(), ScalarField::gaussian_bump()];
        let cases: [(&str, KernelFamily, Vec<u8>); 3] = [
            ("ornstein_uhlenbeck", KernelFamily::ornstein_uhlenbeck(self.a, self.sigma, self.horizon), vec![]),
            ("jump_at_zero", KernelFamily::jump_at_zero(1.0, self.horizon), vec![5]),
            ("half_mass_escape", KernelFamily::escape(self.horizon), vec![4]),
        ];
        let mut out = Outcome::default();
        let mut t = Table::new(["family", "expected_failures", "failed", "mass_sup", "tightness_pass", "continuity_worst"]);
        let join = |v: &[u8]| v.iter().map(u8::to_string).collect::<Vec<_>>().join(";");
        for (label, fam, expected) in &cases {
            let rep = check_kernel_conditions(fam, &Weight::Unit, self.horizon, &ex, &tests, self.eps, self.tol, &cfg)?;
            let failed = rep.failed();
            t.push_cells(vec![
                label.to_string(),
                join(expected),
                join(&failed),
                fmt_f64(rep.condition3.sup),
                rep.condition4.pass.to_string(),
                fmt_f64(rep.condition5.worst),
            ]);
            out.flag(
                format!("{label}_fails_exactly"),
                &failed == expected,
                format!("failed [{}], expected [{}]", join(&failed), join(expected)),
            );
            out.metric(label, &rep);
        }
        out.table("kernel_conditions", t);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// sequential convergence

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceParams {
    pub tol: f64,
    pub r_max: f64,
    pub terms: usize,
    pub norm_bound: f64,
    pub norm_radius: f64,
}

impl Default for SequenceParams {
    fn default() -> Self {
        Self { tol: 0.2, r_max: 5.0, terms: 50, norm_bound: 2.0, norm_radius: 60.0 }
    }
}

impl SequenceParams {
    fn validate(&self) -> Result<()> {
        positive("tol", self.tol)?;
        positive("r_max", self.r_max)?;
        positive("norm_bound", self.norm_bound)?;
        positive("norm_radius", self.norm_radius)?;
        if self.terms < 4 {
            return validation("terms must be at least 4");
        }
        Ok(())
    }

    fn run(&self, _policy: &RngPolicy) -> Result<Outcome> {
        // compacts R/4, R/2, R
        let ex = make_exhaustion(self.r_max / 4.0, 2.0, 3)?;
        let opts = ConvergenceOptions { norm_bound: self.norm_bound, norm_radius: self.norm_radius, ..Default::default() };
        let n = self.terms;
        let shrink: Vec<ScalarField> =
            (1..=n).map(|k| ScalarField::closed(move |x| (x[0] / k as f64).sin()).with_envelope(0.0, 1.0)).collect();
        let bump: Vec<ScalarField> = (1..=n)
            .map(|k| {
                let c = k as f64;
                ScalarField::closed(move |x| c * (-(x[0] - c).powi(2)).exp())
            })
            .collect();
        let osc: Vec<ScalarField> = (1..=n).map(|k| ScalarField::closed(move |x| (k as f64 * x[0]).sin())).collect();
        let zero = ScalarField::zero();
        let mut out = Outcome::default();
        let mut t = Table::new(["sequence", "n", "norm", "largest_compact_deviation"]);
        for (label, seq) in [("sin_x_over_n", &shrink), ("moving_bump", &bump), ("sin_nx", &osc)] {
            let v = classify_convergence(seq, &zero, &Weight::Unit, &ex, self.tol, &opts)?;
            let dev = v.deviation.last().cloned().unwrap_or_default();
            for (i, norm) in v.norm_trace.iter().enumerate() {
                t.push_cells(vec![label.into(), (i + 1).to_string(), fmt_f64(*norm), fmt_f64(dev.get(i).copied().unwrap_or(f64::NAN))]);
            }
            let (ok, detail) = match label {
                "sin_x_over_n" => (v.verdict == Verdict::Converges, "converges"),
                "moving_bump" => (v.verdict == Verdict::Diverges && !v.norm_bounded && v.compact_uniform, "diverges: norm unbounded"),
                _ => (v.verdict == Verdict::Diverges && v.norm_bounded && !v.compact_uniform, "diverges: not uniform on compacts"),
            };
            out.flag(format!("{label}_verdict"), ok, format!("expected {detail}; got {:?} ({:?})", v.verdict, v.failure));
            out.metric(
                label,
                serde_json::json!({
                    "verdict": v.verdict,
                    "norm_bounded": v.norm_bounded,
                    "norm_sup": v.norm_sup,
                    "compact_uniform": v.compact_uniform,
                    "failure": v.failure,
                }),
            );
        }
        out.table("sequences", t);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// generator consistency

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub a: f64,
    pub sigma: f64,
    pub ladder: Vec<f64>,
    pub probes: usize,
    pub probe_radius: f64,
    pub tol: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self { a: 1.0, sigma: 1.0, ladder: vec![1e-2, 5e-3, 2.5e-3], probes: 20, probe_radius: 3.0, tol: 1e-2 }
    }
}

impl GeneratorParams {
    fn validate(&self) -> Result<()> {
        positive("a", self.a)?;
        positive("sigma", self.sigma)?;
        positive("probe_radius", self.probe_radius)?;
        positive("tol", self.tol)?;
        if self.probes == 0 {
            return validation("probes must be positive");
        }
        decreasing_ladder("ladder", &self.ladder, 2)
    }

    fn run(&self, _policy: &RngPolicy) -> Result<Outcome> {
        let p = SemigroupEvaluator::ornstein_uhlenbeck(self.a, self.sigma, 100.0);
        let m = SdeModel::ornstein_uhlenbeck(self.a, self.sigma);
        let fields = [("sin", ScalarField::sin()), ("square", ScalarField::square()), ("gaussian_bump", ScalarField::gaussian_bump())];
        let xs = linspace(-self.probe_radius, self.probe_radius, self.probes);
        let jobs: Vec<(usize, f64)> = (0..fields.len()).flat_map(|i| xs.iter().map(move |x| (i, *x))).collect();
        let rows = jobs
            .par_iter()
            .map(|&(i, x)| {
                let phi = &fields[i].1;
                let est = fd_generator(&p, phi, &[x], &self.ladder)?;
                let exact = kolmogorov_apply(&m, phi, &[x])?;
                Ok((i, x, est, exact))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Outcome::default();
        let mut t = Table::new(["field", "x", "fd", "fd_error", "kolmogorov", "difference"]);
        let mut trace = Table::new(["field", "x", "t", "quotient", "error"]);
        let mut worst: f64 = 0.0;
        let mut inconclusive = 0;
        for (i, x, est, exact) in &rows {
            let name = fields[*i].0.to_string();
            let diff = (est.value - exact).abs();
            worst = worst.max(diff);
            inconclusive += usize::from(!est.conclusive);
            t.push_cells(vec![name.clone(), fmt_f64(*x), fmt_f64(est.value), fmt_f64(est.error), fmt_f64(*exact), fmt_f64(diff)]);
            for q in &est.trace {
                trace.push_cells(vec![name.clone(), fmt_f64(*x), fmt_f64(q.t), fmt_f64(q.quotient), fmt_f64(q.error)]);
            }
        }
        out.table("generator", t);
        out.table("generator_trace", trace);
        out.metric("inconclusive", inconclusive);
        out.le("max_difference", worst, self.tol);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// domain check

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainParams {
    pub a: f64,
    pub sigma: f64,
    pub half_width: f64,
    pub nodes: usize,
    pub ladder: Vec<f64>,
    /// Exponent of the polynomial weight expected to admit `sin`.
    pub m: f64,
    pub options: DomainOptions,
}

impl Default for DomainParams {
    fn default() -> Self {
        Self { a: 1.0, sigma: 1.0, half_width: 16.0, nodes: 65, ladder: vec![1e-2, 5e-3, 2.5e-3], m: 1.0, options: DomainOptions::default() }
    }
}

impl DomainParams {
    fn validate(&self) -> Result<()> {
        positive("a", self.a)?;
        positive("sigma", self.sigma)?;
        positive("half_width", self.half_width)?;
        positive("m", self.m)?;
        positive("cauchy_tol", self.options.cauchy_tol)?;
        positive("bounded_ratio", self.options.bounded_ratio)?;
        positive("growth_ratio", self.options.growth_ratio)?;
        if self.nodes < 5 {
            return validation("nodes must be at least 5");
        }
        decreasing_ladder("ladder", &self.ladder, 2)
    }

    fn run(&self, _policy: &RngPolicy) -> Result<Outcome> {
        let p = SemigroupEvaluator::ornstein_uhlenbeck(self.a, self.sigma, 100.0);
        let grid = Grid::uniform_1d(-self.half_width, self.half_width, self.nodes)?;
        let phi = ScalarField::sin();
        let mut out = Outcome::default();
        let mut t = Table::new(["weight", "t", "quotient_sup"]);
        let cases = [("unit", Weight::Unit, DomainVerdict::OutOfDomainEvidence), ("polynomial", Weight::polynomial(self.m)?, DomainVerdict::InDomainEvidence)];
        for (label, w, expected) in cases {
            let rep = domain_check(&p, &phi, &w, &grid, &self.ladder, &self.options)?;
            for (tq, s) in &rep.quotient_sups {
                t.push_cells(vec![label.into(), fmt_f64(*tq), fmt_f64(*s)]);
            }
            out.flag(format!("{label}_verdict"), rep.verdict == expected, format!("expected {expected:?}, got {:?}", rep.verdict));
            out.metric(label, &rep);
        }
        // the limit field against -sigma^2/2 sin x - a x cos x at a few points
        let (a, s) = (self.a, self.sigma);
        let mut gap: f64 = 0.0;
        for x in linspace(-3.0, 3.0, 7) {
            let est = fd_generator(&p, &phi, &[x], &self.ladder)?;
            gap = gap.max((est.value - (-0.5 * s * s * x.sin() - a * x * x.cos())).abs());
        }
        out.metric("limit_field_gap", gap);
        out.table("domain", t);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// resolvent and Euler formula

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolventParams {
    pub a: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub probes: Vec<f64>,
    pub resolvent_tol: f64,
    pub stencil_step: f64,
    pub euler_t: f64,
    pub euler_x: f64,
    pub euler_steps: Vec<usize>,
    pub half_width: f64,
    pub nodes: usize,
    pub ratio_band: (f64, f64),
    pub euler_tol: f64,
    /// Index into `euler_steps` where `euler_tol` applies.
    pub euler_tol_at: usize,
}

impl Default for ResolventParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            sigma: 1.0,
            lambda: 1.0,
            probes: vec![-2.0, -1.0, 0.5, 1.0, 2.0],
            resolvent_tol: 1e-6,
            stencil_step: 1e-2,
            euler_t: 1.0,
            euler_x: 1.0,
            euler_steps: vec![25, 50, 100, 200],
            half_width: 20.0,
            nodes: 801,
            ratio_band: (1.7, 2.3),
            euler_tol: 0.006,
            euler_tol_at: 2,
        }
    }
}

impl ResolventParams {
    fn validate(&self) -> Result<()> {
        positive("a", self.a)?;
        positive("sigma", self.sigma)?;
        positive("lambda", self.lambda)?;
        positive("resolvent_tol", self.resolvent_tol)?;
        positive("stencil_step", self.stencil_step)?;
        positive("euler_t", self.euler_t)?;
        positive("half_width", self.half_width)?;
        positive("euler_tol", self.euler_tol)?;
        positive("ratio_band", self.ratio_band.0)?;
        if self.ratio_band.1 < self.ratio_band.0 {
            return validation("ratio_band must be ordered");
        }
        if self.euler_steps.len() < 2 || self.euler_tol_at >= self.euler_steps.len() || self.euler_steps.contains(&0) {
            return validation("euler_steps needs two or more positive entries and euler_tol_at inside it");
        }
        if self.nodes < 3 || self.probes.is_empty() {
            return validation("nodes and probes must be non-trivial");
        }
        Ok(())
    }

    fn run(&self, _policy: &RngPolicy) -> Result<Outcome> {
        let p = SemigroupEvaluator::ornstein_uhlenbeck(self.a, self.sigma, RESOLVENT_HORIZON);
        let m = SdeModel::ornstein_uhlenbeck(self.a, self.sigma);
        let mut out = Outcome::default();
        let mut t = Table::new(["x", "resolvent", "exact", "error"]);
        let mut worst: f64 = 0.0;
        for &x in &self.probes {
            let j = resolvent_quadrature(&p, self.lambda, &ScalarField::coordinate(0), &[x], RESOLVENT_HORIZON, RESOLVENT_ORDER)?;
            let exact = x / (self.lambda + self.a);
            worst = worst.max((j.value - exact).abs());
            t.push(&[x, j.value, exact, (j.value - exact).abs()]);
        }
        out.table("resolvent", t);
        out.le("resolvent_error", worst, self.resolvent_tol);

        let mut identity = Vec::new();
        for phi in [ScalarField::sin(), ScalarField::square()] {
            identity.push(resolvent_identity_check(&m, &p, self.lambda, &phi, &[0.6], self.stencil_step)?);
        }
        out.flag("resolvent_identity", identity.iter().all(|r| r.pass), format!("{identity:?}"));

        let grid = Grid::uniform_1d(-self.half_width, self.half_width, self.nodes)?;
        let exact = (-self.a * self.euler_t).exp() * self.euler_x;
        let errors = self
            .euler_steps
            .par_iter()
            .map(|&n| {
                let u = euler_reconstruct(&m, &ScalarField::coordinate(0), self.euler_t, n, &grid)?;
                let v = u.eval(&[self.euler_x])?;
                Ok((v, ((v - exact) / exact).abs()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut e = Table::new(["n", "value", "relative_error", "ratio"]);
        for (k, (n, (v, err))) in self.euler_steps.iter().zip(&errors).enumerate() {
            let ratio = if k == 0 { f64::NAN } else { errors[k - 1].1 / err };
            e.push(&[*n as f64, *v, *err, ratio]);
            if k > 0 {
                let ok = (self.ratio_band.0..=self.ratio_band.1).contains(&ratio);
                out.push(format!("euler_ratio_{}_{}", self.euler_steps[k - 1], n), ratio, "in", self.ratio_band.1, ok).detail =
                    Some(format!("[{}, {}]", self.ratio_band.0, self.ratio_band.1));
            }
        }
        out.lt(format!("euler_error_n{}", self.euler_steps[self.euler_tol_at]), errors[self.euler_tol_at].1, self.euler_tol);
        out.table("euler", e);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// forward-equation residual

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpkParams {
    pub particles: usize,
    pub dt: f64,
    pub t: f64,
    pub ou_a: f64,
    pub ou_sigma: f64,
    pub ou_x: f64,
    pub well_sigma: f64,
    pub well_x: f64,
    /// The negative control must exceed this multiple of the OU acceptance band.
    pub control_factor: f64,
}

impl Default for FpkParams {
    fn default() -> Self {
        Self { particles: 100_000, dt: 1e-3, t: 1.0, ou_a: 1.0, ou_sigma: 1.0, ou_x: 2.0, well_sigma: 1.0, well_x: 0.5, control_factor: 10.0 }
    }
}

impl FpkParams {
    fn validate(&self) -> Result<()> {
        positive("dt", self.dt)?;
        positive("t", self.t)?;
        positive("ou_a", self.ou_a)?;
        positive("ou_sigma", self.ou_sigma)?;
        positive("well_sigma", self.well_sigma)?;
        positive("control_factor", self.control_factor)?;
        if self.particles < 2 {
            return validation("particles must be at least 2");
        }
        Ok(())
    }

    fn run(&self, policy: &RngPolicy) -> Result<Outcome> {
        let ou = SdeModel::ornstein_uhlenbeck(self.ou_a, self.ou_sigma);
        let well = SdeModel::double_well(self.well_sigma);
        let n = self.particles;
        let r_ou = fpk_residual(&ou, &ScalarField::coordinate(0), &[self.ou_x], self.t, n, self.dt, policy)?;
        let r_well = fpk_residual(&well, &ScalarField::square(), &[self.well_x], self.t, n, self.dt, policy)?;
        let neg =
            fpk_residual_against(&ou, &ou.with_negated_drift(), &ScalarField::coordinate(0), &[self.ou_x], self.t, n, self.dt, policy)?;
        let mut out = Outcome::default();
        let mut t = Table::new(["case", "residual", "stderr", "pilot_shift", "pilot_stderr", "budget", "band"]);
        for (label, r) in [("ou", &r_ou), ("double_well", &r_well), ("negated_drift", &neg)] {
            let band = 3.0 * r.stderr + r.budget;
            t.push_cells(vec![
                label.into(),
                fmt_f64(r.residual),
                fmt_f64(r.stderr),
                fmt_f64(r.pilot_shift),
                fmt_f64(r.pilot_stderr),
                fmt_f64(r.budget),
                fmt_f64(band),
            ]);
            out.metric(label, r);
            if label != "negated_drift" {
                out.le(format!("{label}_residual"), r.residual.abs(), band);
            }
        }
        out.metric("scope", "residuals for the configured models only; says nothing about other semigroups with the same generator");
        let band = 3.0 * r_ou.stderr + r_ou.budget;
        out.ge("negative_control_ratio", neg.residual.abs() / band, self.control_factor);
        out.table("fpk", t);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Mehler semigroups

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MehlerParams {
    pub a: f64,
    pub sigma: f64,
    pub charfn_tol: f64,
    pub flow_points: usize,
    pub flow_tol: f64,
    pub jump_rate: f64,
    pub jump_mean: f64,
    pub jump_sd: f64,
    pub jump_sigma: f64,
    pub density_t: f64,
    pub samples: usize,
    pub ks_tol: f64,
    pub density: DensityOptions,
    pub truncation_eps: Vec<f64>,
    pub truncation_t: f64,
    pub truncation_radius: f64,
    pub truncation_probes: usize,
}

impl Default for MehlerParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            sigma: 1.0,
            charfn_tol: 1e-10,
            flow_points: 100,
            flow_tol: 1e-8,
            jump_rate: 2.0,
            jump_mean: 0.5,
            jump_sd: 0.3,
            jump_sigma: 0.5,
            density_t: 1.0,
            samples: 100_000,
            ks_tol: 0.02,
            density: DensityOptions::default(),
            truncation_eps: vec![0.5, 0.1, 0.02],
            truncation_t: 1.0,
            truncation_radius: 2.0,
            truncation_probes: 41,
        }
    }
}

impl MehlerParams {
    fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("a", self.a),
            ("sigma", self.sigma),
            ("charfn_tol", self.charfn_tol),
            ("flow_tol", self.flow_tol),
            ("jump_rate", self.jump_rate),
            ("jump_sd", self.jump_sd),
            ("jump_sigma", self.jump_sigma),
            ("density_t", self.density_t),
            ("ks_tol", self.ks_tol),
            ("truncation_t", self.truncation_t),
            ("truncation_radius", self.truncation_radius),
            ("half_width", self.density.half_width),
        ] {
            positive(k, v)?;
        }
        if self.flow_points == 0 || self.samples == 0 || self.truncation_probes < 2 {
            return validation("flow_points, samples and truncation_probes must be positive");
        }
        decreasing_ladder("truncation_eps", &self.truncation_eps, 2)
    }

    fn jump_model(&self) -> Result<MehlerModel> {
        let law = JumpLaw::Normal { mean: self.jump_mean, sd: self.jump_sd };
        let m = LevyMeasure { finite: Some(FiniteActivity { rate: self.jump_rate, law }), density: None };
        MehlerModel::new(vec![-self.a], LevyTriplet::new(vec![0.0], vec![self.jump_sigma * self.jump_sigma], m)?)
    }

    fn run(&self, policy: &RngPolicy) -> Result<Outcome> {
        let mut out = Outcome::default();
        let (a, s) = (self.a, self.sigma);

        // pure Gaussian against the closed form
        let g = MehlerModel::gaussian_ou(a, s);
        let mut worst: f64 = 0.0;
        let mut t = Table::new(["t", "xi", "charfn", "exact"]);
        for tt in [0.1, 0.5, 1.0, 3.0] {
            for xi in linspace(-4.0, 4.0, 17) {
                let v = mu_charfn(&g, tt, &[xi])?.value;
                let exact = (-s * s * xi * xi * (1.0 - (-2.0 * a * tt).exp()) / (4.0 * a)).exp();
                worst = worst.max((v.re - exact).hypot(v.im));
                t.push(&[tt, xi, v.re, exact]);
            }
        }
        out.table("gaussian_charfn", t);
        out.le("gaussian_charfn_error", worst, self.charfn_tol);

        // flow identity at random (s, t, xi)
        let jm = self.jump_model()?;
        let mut rng = policy.rng(1, 0);
        let pts: Vec<(f64, f64, f64)> =
            (0..self.flow_points).map(|_| (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(-5.0..5.0))).collect();
        let gaps = pts
            .par_iter()
            .map(|&(ss, tt, xi)| {
                let lhs = mu_charfn(&jm, tt + ss, &[xi])?.value;
                let rhs = mu_charfn(&jm, ss, &[xi])?.value * mu_charfn(&jm, tt, &jm.adjoint_flow(ss, &[xi]))?.value;
                Ok((lhs - rhs).norm())
            })
            .collect::<Result<Vec<f64>>>()?;
        out.le("flow_identity_error", gaps.iter().cloned().fold(0.0, f64::max), self.flow_tol);

        // FFT density against direct simulation
        let grid = Grid::symmetric(&[self.density.half_width], &[self.density.nodes])?;
        let den = mu_density_fft(&jm, self.density_t, &grid)?;
        let samples: Vec<f64> = sample_mu(&jm, self.density_t, self.samples, policy, 2)?.into_iter().map(|y| y[0]).collect();
        let ks = ks_distance(&samples, &den);
        out.le("compound_poisson_ks", ks, self.ks_tol);
        out.metric("density_mass", den.mass);
        out.metric("density_max_imag", den.max_imag);
        out.metric("density_min_value", den.min_value);
        out.table("density", density_table(&den.field)?);
        out.table("histogram", histogram(&samples, -4.0, 6.0, 200));

        // truncated small jumps
        let stable = LevyTriplet::new(vec![0.0], vec![0.0], LevyMeasure { finite: None, density: Some(JumpDensity::stable_half()) })?;
        let sm = MehlerModel::new(vec![-a], stable)?;
        let nu = SpectralMeasure::cos(&[1.0]).plus(0.5, &SpectralMeasure::sin(&[2.0]));
        let study = truncation_convergence_study(
            &sm,
            self.truncation_t,
            &Observable::Spectral(nu),
            self.truncation_radius,
            &self.truncation_eps,
            self.truncation_probes,
            &self.density,
        )?;
        let mut t = Table::new(["eps", "gap", "tightness_radius"]);
        for r in &study.rows {
            t.push(&[r.eps, r.gap, r.tightness_radius.unwrap_or(f64::INFINITY)]);
        }
        out.metric("truncation", &study);
        out.table("truncation", t);
        let gaps: Vec<String> = study.rows.iter().map(|r| format!("{:.3e}", r.gap)).collect();
        out.flag("truncation_strictly_decreasing", study.strictly_decreasing, gaps.join(" > "));
        Ok(out)
    }
}

/// Normalized histogram `(x, density)` on `bins` equal cells of `[lo, hi]`.
pub fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Table {
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &y in samples {
        if y >= lo && y < hi {
            counts[((y - lo) / w) as usize % bins] += 1;
        }
    }
    let mut t = Table::new(["x", "density"]);
    let n = samples.len().max(1) as f64;
    for (k, c) in counts.iter().enumerate() {
        t.push(&[lo + (k as f64 + 0.5) * w, *c as f64 / (n * w)]);
    }
    t
}

// ---------------------------------------------------------------------------
// pseudo-differential generator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LescotParams {
    pub a: f64,
    pub sigma: f64,
    pub probes: usize,
    pub probe_radius: f64,
    pub ladder: Vec<f64>,
    pub exact_tol: f64,
    pub fd_tol: f64,
}

impl Default for LescotParams {
    fn default() -> Self {
        Self { a: 1.0, sigma: 1.0, probes: 9, probe_radius: 2.0, ladder: vec![1e-2, 5e-3, 2.5e-3], exact_tol: 1e-8, fd_tol: 1e-2 }
    }
}

impl LescotParams {
    fn validate(&self) -> Result<()> {
        positive("a", self.a)?;
        positive("sigma", self.sigma)?;
        positive("probe_radius", self.probe_radius)?;
        positive("exact_tol", self.exact_tol)?;
        positive("fd_tol", self.fd_tol)?;
        if self.probes == 0 {
            return validation("probes must be positive");
        }
        decreasing_ladder("ladder", &self.ladder, 2)
    }

    fn run(&self, _policy: &RngPolicy) -> Result<Outcome> {
        let mm = MehlerModel::gaussian_ou(self.a, self.sigma);
        let sde = SdeModel::ornstein_uhlenbeck(self.a, self.sigma);
        let p = SemigroupEvaluator::from_mehler(mm.clone(), DensityOptions::default());
        let fields = [
            ("cos1", SpectralMeasure::cos(&[1.0])),
            ("cos1_sin2", SpectralMeasure::cos(&[1.0]).plus(0.5, &SpectralMeasure::sin(&[2.0]))),
        ];
        let xs = linspace(-self.probe_radius, self.probe_radius, self.probes);
        let mut out = Outcome::default();
        let mut t = Table::new(["field", "x", "lescot", "kolmogorov", "fd"]);
        let (mut exact_gap, mut fd_gap): (f64, f64) = (0.0, 0.0);
        for (label, nu) in &fields {
            let phi = nu.field();
            let rows = xs
                .par_iter()
                .map(|&x| {
                    let l = lescot_generator(&mm, nu, &[x])?;
                    let k = kolmogorov_apply(&sde, &phi, &[x])?;
                    let fd = fd_generator(&p, &phi, &[x], &self.ladder)?.value;
                    Ok((x, l, k, fd))
                })
                .collect::<Result<Vec<_>>>()?;
            for (x, l, k, fd) in rows {
                exact_gap = exact_gap.max((l - k).abs());
                fd_gap = fd_gap.max((l - fd).abs());
                t.push_cells(vec![label.to_string(), fmt_f64(x), fmt_f64(l), fmt_f64(k), fmt_f64(fd)]);
            }
        }
        out.table("lescot", t);
        out.le("lescot_vs_kolmogorov", exact_gap, self.exact_tol);
        out.le("lescot_vs_fd", fd_gap, self.fd_tol);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// convex control semigroup

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HjbParams {
    pub sigma: f64,
    pub t: f64,
    /// Grid step of the oracle comparison.
    pub h: f64,
    /// Grid step of the structural checks.
    pub check_h: f64,
    pub half_width: f64,
    pub control_bound: f64,
    pub controls: usize,
    pub probes: Vec<f64>,
    pub oracle_tol: f64,
    pub dp_tol: f64,
    pub convexity_tol: f64,
    pub lambda: f64,
    pub records: usize,
}

impl Default for HjbParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            t: 0.25,
            h: 0.005,
            check_h: 0.02,
            half_width: 4.0,
            control_bound: 4.0,
            controls: 81,
            probes: vec![-1.0, 0.0, 1.0],
            oracle_tol: 5e-3,
            dp_tol: 1e-2,
            convexity_tol: 1e-9,
            lambda: 0.5,
            records: 10,
        }
    }
}

impl HjbParams {
    fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("sigma", self.sigma),
            ("t", self.t),
            ("h", self.h),
            ("check_h", self.check_h),
            ("half_width", self.half_width),
            ("control_bound", self.control_bound),
            ("oracle_tol", self.oracle_tol),
            ("dp_tol", self.dp_tol),
            ("convexity_tol", self.convexity_tol),
        ] {
            positive(k, v)?;
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return validation("lambda must lie in [0, 1]");
        }
        if self.controls.is_multiple_of(2) || self.probes.is_empty() || self.records == 0 {
            return validation("controls must be odd; probes and records non-empty");
        }
        Ok(())
    }

    fn run(&self, _policy: &RngPolicy) -> Result<Outcome> {
        let mut out = Outcome::default();
        let hc = ControlProblem::hopf_cole(self.sigma, self.control_bound, self.controls)?;
        let heat = ControlProblem::heat(1, self.sigma)?;
        let phi = ScalarField::cos();
        let probes: Vec<Vec<f64>> = self.probes.iter().map(|x| vec![*x]).collect();
        let coarse = uniform_grid(self.half_width, self.check_h)?;

        // A = {0}: the heat semigroup
        let u = dp_semigroup(&heat, &phi, self.t, &coarse, None, 1)?;
        let budget = u.consistency_budget();
        let decay = (-0.5 * self.sigma * self.sigma * self.t).exp();
        let mut heat_gap: f64 = 0.0;
        for x in &self.probes {
            heat_gap = heat_gap.max((u.last().eval(&[*x])? - decay * x.cos()).abs());
        }
        out.le("heat_reduction_gap", heat_gap, budget);

        let conv = convexity_monotonicity_check(&hc, &phi, &ScalarField::sin(), self.lambda, self.t, &coarse, &probes, self.convexity_tol)?;
        out.le("constant_error", conv.constant_error, 0.0);
        out.ge("convexity_residual", conv.convexity_residual, -self.convexity_tol);
        out.ge("monotonicity_residual", conv.monotonicity_residual, -self.convexity_tol);
        let dp = dynamic_programming_check(&hc, &phi, self.t / 2.0, self.t / 2.0, &coarse, &probes, self.dp_tol)?;
        out.le("dynamic_programming_gap", dp.gap, self.dp_tol);

        // value surface on the coarse grid, oracle on the fine one
        let surface = dp_semigroup(&hc, &phi, self.t, &coarse, None, self.records)?;
        out.table("value_surface", value_field_table(&surface)?);
        let fine = uniform_grid(self.half_width, self.h)?;
        let v = dp_semigroup(&hc, &phi, self.t, &fine, None, 1)?;
        out.metric("scheme", &v.scheme);
        let last = v.last();
        let mut t = Table::new(["x", "dp", "oracle", "difference"]);
        let mut worst: f64 = 0.0;
        for &x in &self.probes {
            let d = last.eval(&[x])?;
            let o = hopf_cole_oracle(self.sigma, &phi, self.t, x)?;
            worst = worst.max((d - o).abs());
            t.push(&[x, d, o, (d - o).abs()]);
        }
        out.table("hopf_cole", t);
        out.le("hopf_cole_gap", worst, self.oracle_tol);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// viscosity harness

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViscosityParams {
    pub sigma: f64,
    pub horizon: f64,
    pub h: f64,
    pub half_width: f64,
    pub control_bound: f64,
    pub controls: usize,
    pub records: usize,
    /// `(t, x)` touching points; the tests are split evenly among them.
    pub points: Vec<(f64, f64)>,
    pub tests: usize,
    pub curvature: (f64, f64),
    pub frozen_x: f64,
    pub frozen_t: f64,
    pub frozen_tests: usize,
    pub frozen_curvature: (f64, f64),
}

impl Default for ViscosityParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            horizon: 0.25,
            h: 0.02,
            half_width: 4.0,
            control_bound: 4.0,
            controls: 41,
            records: 25,
            points: vec![(0.05, -1.0), (0.1, -0.5), (0.1, 0.5), (0.15, 0.0), (0.2, 1.0)],
            tests: 50,
            curvature: (0.05, 1.0),
            frozen_x: PI,
            frozen_t: 0.05,
            frozen_tests: 10,
            frozen_curvature: (1e-4, 1e-3),
        }
    }
}

impl ViscosityParams {
    fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("sigma", self.sigma),
            ("horizon", self.horizon),
            ("h", self.h),
            ("half_width", self.half_width),
            ("control_bound", self.control_bound),
            ("curvature", self.curvature.0),
            ("frozen_curvature", self.frozen_curvature.0),
            ("frozen_t", self.frozen_t),
        ] {
            positive(k, v)?;
        }
        if self.curvature.1 < self.curvature.0 || self.frozen_curvature.1 < self.frozen_curvature.0 {
            return validation("curvature ranges must be ordered");
        }
        if self.points.is_empty() || self.tests < self.points.len() || self.frozen_tests == 0 || self.controls.is_multiple_of(2) || self.records < 3 {
            return validation("need points, at least one test per point, odd controls and three records");
        }
        Ok(())
    }

    fn run(&self, policy: &RngPolicy) -> Result<Outcome> {
        let mut out = Outcome::default();
        let hc = ControlProblem::hopf_cole(self.sigma, self.control_bound, self.controls)?;
        let grid = uniform_grid(self.half_width, self.h)?;
        let u = dp_semigroup(&hc, &ScalarField::cos(), self.horizon, &grid, None, self.records)?;
        let tol = u.consistency_budget();
        let per = self.tests / self.points.len();
        let extra = self.tests % self.points.len();
        let mut t = Table::new(["case", "side", "t", "x", "slope_t", "slope_x", "curvature_x", "generator", "violation"]);
        let mut push = |case: &str, rep: &crate::control::ViscosityReport| {
            for e in &rep.entries {
                t.push_cells(vec![
                    case.into(),
                    serde_json::to_value(e.side).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                    fmt_f64(e.t),
                    fmt_f64(e.x),
                    fmt_f64(e.slope_t),
                    fmt_f64(e.slope_x),
                    fmt_f64(e.curvature_x),
                    fmt_f64(e.generator),
                    e.violation.map(fmt_f64).unwrap_or_else(|| e.skipped.clone().unwrap_or_default()),
                ]);
            }
        };
        let (mut violations, mut skipped, mut ran, mut worst) = (0, 0, 0, 0.0f64);
        for (k, &(tp, xp)) in self.points.iter().enumerate() {
            let family = QuadraticFamily {
                curvature: self.curvature,
                window_nodes: 2,
                window_layers: 1,
                count: per + usize::from(k < extra),
                policy: *policy,
                stream: k as u32,
            };
            let rep = viscosity_test(&u, &hc, tp, xp, &family, tol)?;
            violations += rep.violations;
            skipped += rep.skipped;
            ran += rep.entries.len() - rep.skipped;
            worst = worst.max(rep.max_violation);
            push("hopf_cole", &rep);
        }
        out.metric("scope", "random quadratic test functions only, a strict subset of all smooth test functions");
        out.metric("tests_run", ran);
        out.metric("skipped", skipped);
        out.metric("budget", tol);
        out.metric("max_violation", worst);
        out.le("hopf_cole_violations", violations as f64, 0.0);
        out.ge("hopf_cole_tests_run", ran as f64, self.tests as f64);

        // phi frozen in time is no solution: the heat equation fails by sigma^2/2 |phi''|
        let heat = ControlProblem::heat(1, self.sigma)?;
        let times: Vec<f64> = (0..=10).map(|k| 2.0 * self.frozen_t * k as f64 / 10.0).collect();
        let frozen = ValueField::frozen(&ScalarField::cos(), &grid, times)?;
        let fb = frozen.consistency_budget();
        let family = QuadraticFamily {
            curvature: self.frozen_curvature,
            window_nodes: 2,
            window_layers: 1,
            count: self.frozen_tests,
            policy: *policy,
            stream: 1000,
        };
        let rep = viscosity_test(&frozen, &heat, self.frozen_t, self.frozen_x, &family, fb)?;
        push("frozen", &rep);
        let expected = 0.5 * self.sigma * self.sigma * self.frozen_x.cos().abs() - fb;
        out.ge("frozen_violations", rep.violations as f64, 1.0);
        out.ge("frozen_magnitude", rep.max_violation, expected);
        out.table("viscosity", t);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// registry

pub struct ExperimentInfo {
    pub name: &'static str,
    pub description: &'static str,
}

/// Stable listing order.
pub const EXPERIMENTS: [ExperimentInfo; 11] = [
    ExperimentInfo { name: "dichotomy_study", description: "OU semigroup: deviation from the identity on a compact vs on far phase-winding probes" },
    ExperimentInfo { name: "kernel_conditions", description: "mass bound, tightness and continuity at t = 0 for three kernel families" },
    ExperimentInfo { name: "sequential_convergence", description: "sequences under norm-boundedness plus uniform convergence on compacts" },
    ExperimentInfo { name: "generator_consistency", description: "finite-difference generator against the Kolmogorov operator (OU)" },
    ExperimentInfo { name: "domain_check", description: "is sin in the generator domain? unit weight vs polynomial weight" },
    ExperimentInfo { name: "resolvent_euler", description: "resolvent by Laplace quadrature; implicit Euler exponential formula" },
    ExperimentInfo { name: "fpk_residual", description: "particle residual of the forward equation with a negative control" },
    ExperimentInfo { name: "mehler_fourier", description: "Mehler semigroups: characteristic functions, FFT density, small-jump truncation" },
    ExperimentInfo { name: "lescot_generator", description: "pseudo-differential generator on trigonometric fields" },
    ExperimentInfo { name: "hjb_hopf_cole", description: "convex control semigroup: structure checks and the Hopf-Cole oracle" },
    ExperimentInfo { name: "viscosity", description: "viscosity sub/supersolution tests with touching quadratics" },
];

/// Parsed parameters of one registry entry.
#[derive(Clone, Debug, PartialEq)]
pub enum Params {
    Dichotomy(DichotomyParams),
    Kernel(KernelParams),
    Sequence(SequenceParams),
    Generator(GeneratorParams),
    Domain(DomainParams),
    Resolvent(ResolventParams),
    Fpk(FpkParams),
    Mehler(MehlerParams),
    Lescot(LescotParams),
    Hjb(HjbParams),
    Viscosity(ViscosityParams),
}

fn parse_as<T: serde::de::DeserializeOwned>(name: &str, v: &Value) -> Result<T> {
    let v = if v.is_null() { Value::Object(Map::new()) } else { v.clone() };
    serde_json::from_value(v).map_err(|e| Error::Validation(format!("{name}: {e}")))
}

impl Params {
    /// Fills defaults, rejects unknown keys and non-positive tolerances.
    pub fn parse(name: &str, v: &Value) -> Result<Self> {
        let p = match name {
            "dichotomy_study" => Self::Dichotomy(parse_as(name, v)?),
            "kernel_conditions" => Self::Kernel(parse_as(name, v)?),
            "sequential_convergence" => Self::Sequence(parse_as(name, v)?),
            "generator_consistency" => Self::Generator(parse_as(name, v)?),
            "domain_check" => Self::Domain(parse_as(name, v)?),
            "resolvent_euler" => Self::Resolvent(parse_as(name, v)?),
            "fpk_residual" => Self::Fpk(parse_as(name, v)?),
            "mehler_fourier" => Self::Mehler(parse_as(name, v)?),
            "lescot_generator" => Self::Lescot(parse_as(name, v)?),
            "hjb_hopf_cole" => Self::Hjb(parse_as(name, v)?),
            "viscosity" => Self::Viscosity(parse_as(name, v)?),
            other => return validation(format!("unknown experiment {other:?}")),
        };
        p.validate().map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{name}: {m}")),
            other => other,
        })?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Dichotomy(p) => p.validate(),
            Self::Kernel(p) => p.validate(),
            Self::Sequence(p) => p.validate(),
            Self::Generator(p) => p.validate(),
            Self::Domain(p) => p.validate(),
            Self::Resolvent(p) => p.validate(),
            Self::Fpk(p) => p.validate(),
            Self::Mehler(p) => p.validate(),
            Self::Lescot(p) => p.validate(),
            Self::Hjb(p) => p.validate(),
            Self::Viscosity(p) => p.validate(),
        }
    }

    /// Canonical JSON with every default spelled out.
    pub fn to_value(&self) -> Value {
        let v = match self {
            Self::Dichotomy(p) => serde_json::to_value(p),
            Self::Kernel(p) => serde_json::to_value(p),
            Self::Sequence(p) => serde_json::to_value(p),
            Self::Generator(p) => serde_json::to_value(p),
            Self::Domain(p) => serde_json::to_value(p),
            Self::Resolvent(p) => serde_json::to_value(p),
            Self::Fpk(p) => serde_json::to_value(p),
            Self::Mehler(p) => serde_json::to_value(p),
            Self::Lescot(p) => serde_json::to_value(p),
            Self::Hjb(p) => serde_json::to_value(p),
            Self::Viscosity(p) => serde_json::to_value(p),
        };
        v.unwrap_or(Value::Null)
    }

    pub fn run(&self, policy: &RngPolicy) -> Result<Outcome> {
        match self {
            Self::Dichotomy(p) => p.run(policy),
            Self::Kernel(p) => p.run(policy),
            Self::Sequence(p) => p.run(policy),
            Self::Generator(p) => p.run(policy),
            Self::Domain(p) => p.run(policy),
            Self::Resolvent(p) => p.run(policy),
            Self::Fpk(p) => p.run(policy),
            Self::Mehler(p) => p.run(policy),
            Self::Lescot(p) => p.run(policy),
            Self::Hjb(p) => p.run(policy),
            Self::Viscosity(p) => p.run(policy),
        }
    }
}

fn registry_index(name: &str) -> Option<usize> {
    EXPERIMENTS.iter().position(|e| e.name == name)
}

/// Each experiment draws from its own seed, fixed by its registry slot, so
/// results do not depend on the suite's ordering.
pub fn experiment_policy(master_seed: u64, name: &str) -> RngPolicy {
    let slot = registry_index(name).unwrap_or(usize::MAX) as u32;
    RngPolicy::new(RngPolicy::new(master_seed).derive_seed(0x5355_4954, slot))
}

// ---------------------------------------------------------------------------
// suites

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

impl ExperimentSpec {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), params: Value::Null }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSuite {
    pub name: String,
    #[serde(default)]
    pub master_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub experiments: Vec<ExperimentSpec>,
}

impl ExperimentSuite {
    /// Parses every entry; nothing runs if any entry is invalid.
    pub fn validate(&self) -> Result<Vec<Params>> {
        if self.name.trim().is_empty() {
            return validation("suite name is empty");
        }
        self.experiments.iter().map(|e| Params::parse(&e.name, &e.params)).collect()
    }
}

/// Every registry entry with its default (acceptance) parameters.
pub fn acceptance_suite(master_seed: u64, output_dir: impl Into<PathBuf>) -> ExperimentSuite {
    ExperimentSuite {
        name: "acceptance".into(),
        master_seed,
        output_dir: output_dir.into(),
        experiments: EXPERIMENTS.iter().map(|e| ExperimentSpec::new(e.name)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub params: Value,
    pub metrics: Map<String, Value>,
    pub checks: Vec<Check>,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Paths relative to the suite's output directory.
    pub files: Vec<String>,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub suite: String,
    #[serde(rename = "git-describe")]
    pub git_describe: String,
    pub seed: u64,
    pub experiments: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteStatus {
    Pass,
    ChecksFailed,
    RuntimeError,
}

impl SuiteStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Pass => 0,
            Self::ChecksFailed => 1,
            Self::RuntimeError => 3,
        }
    }
}

pub struct SuiteReport {
    pub manifest: Manifest,
    /// Outcomes in suite order; `None` where the experiment errored.
    pub outcomes: Vec<Option<Outcome>>,
    pub status: SuiteStatus,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("semilab-{}", env!("CARGO_PKG_VERSION")))
}

fn write_outcome(dir: &Path, sub: &str, name: &str, params: &Value, out: &Outcome) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir.join(sub))?;
    let mut files = Vec::new();
    for (stem, table) in &out.tables {
        let sidecar = serde_json::json!({ "experiment": name, "table": stem, "columns": table.columns, "params": params });
        write_with_sidecar(&dir.join(sub), stem, table, &sidecar)?;
        files.push(format!("{sub}/{stem}.csv"));
        files.push(format!("{sub}/{stem}.json"));
    }
    Ok(files)
}

/// Runs the suite's experiments concurrently, writes `<output_dir>/NN_<name>/`
/// tables and `<output_dir>/manifest.json`. Errors of single experiments are
/// recorded in the manifest; only validation and I/O failures abort.
pub fn run_suite(suite: &ExperimentSuite) -> Result<SuiteReport> {
    let parsed = suite.validate()?;
    std::fs::create_dir_all(&suite.output_dir)?;
    let results: Vec<(Result<Outcome>, f64)> = parsed
        .par_iter()
        .zip(&suite.experiments)
        .map(|(p, spec)| {
            let start = Instant::now();
            let r = p.run(&experiment_policy(suite.master_seed, &spec.name));
            (r, start.elapsed().as_secs_f64())
        })
        .collect();

    let mut entries = Vec::with_capacity(results.len());
    let mut outcomes = Vec::with_capacity(results.len());
    let mut status = SuiteStatus::Pass;
    for (k, ((res, elapsed), (p, spec))) in results.into_iter().zip(parsed.iter().zip(&suite.experiments)).enumerate() {
        let params = p.to_value();
        let entry = match res {
            Ok(out) => {
                let files = write_outcome(&suite.output_dir, &format!("{k:02}_{}", spec.name), &spec.name, &params, &out)?;
                let pass = out.pass();
                if !pass && status == SuiteStatus::Pass {
                    status = SuiteStatus::ChecksFailed;
                }
                let e = ManifestEntry {
                    name: spec.name.clone(),
                    params,
                    metrics: out.metrics.clone(),
                    checks: out.checks.clone(),
                    pass,
                    error: None,
                    files,
                    elapsed_s: elapsed,
                };
                outcomes.push(Some(out));
                e
            }
            Err(err) => {
                status = SuiteStatus::RuntimeError;
                outcomes.push(None);
                ManifestEntry {
                    name: spec.name.clone(),
                    params,
                    metrics: Map::new(),
                    checks: Vec::new(),
                    pass: false,
                    error: Some(err.to_string()),
                    files: Vec::new(),
                    elapsed_s: elapsed,
                }
            }
        };
        entries.push(entry);
    }
    let manifest = Manifest { suite: suite.name.clone(), git_describe: git_describe(), seed: suite.master_seed, experiments: entries };
    write_json(&suite.output_dir.join("manifest.json"), &manifest)?;
    Ok(SuiteReport { manifest, outcomes, status })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_winding_probes_hit_peaks() {
        let xs = phase_winding_probes(PI / 2.0, 100.0);
        assert!(xs.iter().all(|x| x.abs() <= 100.0 && (x.sin() - 1.0).abs() < 1e-12));
        assert_eq!(xs.len(), 32);
        assert_eq!(phase_winding_probes(0.0, 1.0), vec![0.0]);
    }

    #[test]
    fn dichotomy_small_ladder() {
        let far = phase_winding_probes(PI / 2.0, 1e4);
        let rows = dichotomy_study(1.0, 1.0, &ScalarField::sin(), 5.0, 201, &far, &[0.0, 0.1, 1e-3]).unwrap();
        assert_eq!((rows[0].compact, rows[0].far), (0.0, 0.0));
        assert!(rows[2].compact < rows[1].compact && rows[2].compact < 0.05);
        assert!(rows[1].far >= 0.9 && rows[2].far >= 0.9, "{rows:?}");
        let x = 2.0;
        let p = SemigroupEvaluator::ornstein_uhlenbeck(1.0, 1.0, 1.0);
        let q = p.eval(0.3, &ScalarField::sin(), &[x]).unwrap().0;
        assert!((q - TrigField::Sin.ou_image(1.0, 1.0, 0.3, x)).abs() < 1e-12);
    }

    #[test]
    fn params_defaults_and_rejections() {
        let p = Params::parse("dichotomy_study", &Value::Null).unwrap();
        assert_eq!(p, Params::Dichotomy(DichotomyParams::default()));
        let round = Params::parse("dichotomy_study", &p.to_value()).unwrap();
        assert_eq!(round, p);
        let bad = serde_json::json!({ "compact_tol": -0.1 });
        assert!(matches!(Params::parse("dichotomy_study", &bad), Err(Error::Validation(_))));
        let unknown = serde_json::json!({ "compact_tolerance": 0.1 });
        assert!(matches!(Params::parse("dichotomy_study", &unknown), Err(Error::Validation(_))));
        assert!(matches!(Params::parse("no_such_thing", &Value::Null), Err(Error::Validation(_))));
        for e in &EXPERIMENTS {
            let p = Params::parse(e.name, &Value::Null).unwrap();
            assert_eq!(Params::parse(e.name, &p.to_value()).unwrap(), p, "{}", e.name);
        }
    }

    #[test]
    fn empty_suite_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let suite = ExperimentSuite { name: "empty".into(), master_seed: 1, output_dir: dir.path().into(), experiments: vec![] };
        let rep = run_suite(&suite).unwrap();
        assert_eq!(rep.status, SuiteStatus::Pass);
        assert!(rep.manifest.experiments.is_empty());
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn invalid_suite_runs_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let suite = ExperimentSuite {
            name: "bad".into(),
            master_seed: 1,
            output_dir: out.clone(),
            experiments: vec![ExperimentSpec::new("sequential_convergence"), ExperimentSpec::new("missing_model")],
        };
        assert!(matches!(run_suite(&suite), Err(Error::Validation(_))));
        assert!(!out.exists());
    }

    #[test]
    fn small_suite_writes_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let suite = ExperimentSuite {
            name: "small".into(),
            master_seed: 9,
            output_dir: dir.path().into(),
            experiments: vec![
                ExperimentSpec::new("sequential_convergence"),
                ExperimentSpec { name: "resolvent_euler".into(), params: serde_json::json!({ "euler_steps": [25, 50], "euler_tol_at": 1, "euler_tol": 0.02 }) },
            ],
        };
        let rep = run_suite(&suite).unwrap();
        assert_eq!(rep.status, SuiteStatus::Pass, "{:#?}", rep.manifest);
        assert!(dir.path().join("00_sequential_convergence/sequences.csv").exists());
        assert!(dir.path().join("01_resolvent_euler/euler.json").exists());
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let m: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m.seed, 9);
        for e in &m.experiments {
            Params::parse(&e.name, &e.params).unwrap();
        }
    }
}
