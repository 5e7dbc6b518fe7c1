//! Generators, resolvents and the exponential formula, estimated from
//! semigroup evaluators and compared against Kolmogorov operators.
//!
//! Only the pointwise difference quotient together with a weighted-norm
//! bound is tested; the weak generator coincides with the strong one for
//! these semigroups, so it gets no separate implementation.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::KernelFamily;
use crate::mehler::{density_expectation, mu_density_fft, Density, DensityOptions, MehlerModel};
use crate::quad::GaussLegendre;
use crate::sde::{mc_semigroup, mean_stderr, SdeModel, MAX_ABORTED_FRACTION};
use crate::statespace::{Grid, RngPolicy, ScalarField, Weight};

/// Where a semigroup evaluator gets its numbers from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    SdeMc,
    MehlerQuadrature,
    Kernel,
    ControlDp,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceTag::SdeMc => "sde-mc",
            SourceTag::MehlerQuadrature => "mehler-quadrature",
            SourceTag::Kernel => "kernel",
            SourceTag::ControlDp => "control-dp",
        })
    }
}

/// `‖P_t‖ <= M e^{omega t}`, as declared by whoever built the evaluator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GrowthBound {
    pub m: f64,
    pub omega: f64,
}

impl GrowthBound {
    pub const MARKOV: GrowthBound = GrowthBound { m: 1.0, omega: 0.0 };
}

pub type EvalFn = dyn Fn(f64, &ScalarField, &[f64]) -> Result<(f64, f64)> + Send + Sync;

/// `(t, phi, x) -> (P_t phi(x), error bar)`.
#[derive(Clone)]
pub struct SemigroupEvaluator {
    pub source: SourceTag,
    pub name: String,
    pub growth: GrowthBound,
    eval: Arc<EvalFn>,
}

impl fmt::Debug for SemigroupEvaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SemigroupEvaluator({}, {})", self.source, self.name)
    }
}

impl SemigroupEvaluator {
    pub fn new(
        source: SourceTag,
        name: impl Into<String>,
        growth: GrowthBound,
        eval: impl Fn(f64, &ScalarField, &[f64]) -> Result<(f64, f64)> + Send + Sync + 'static,
    ) -> Self {
        Self { source, name: name.into(), growth, eval: Arc::new(eval) }
    }

    /// Kernel-backed: Gauss–Hermite for closed forms, sample means otherwise.
    pub fn from_kernel(family: KernelFamily, particles: usize, policy: RngPolicy) -> Self {
        let name = family.name().to_string();
        Self::new(SourceTag::Kernel, name, GrowthBound::MARKOV, move |t, phi, x| {
            let v = family.apply(t, phi, x, particles, &policy)?;
            Ok((v.value, v.stderr))
        })
    }

    /// OU `dX = -aX dt + sigma dW` by quadrature against its Gaussian law.
    pub fn ornstein_uhlenbeck(a: f64, sigma: f64, horizon: f64) -> Self {
        Self::from_kernel(KernelFamily::ornstein_uhlenbeck(a, sigma, horizon), 0, RngPolicy::new(0))
    }

    /// Euler–Maruyama Monte Carlo.
    pub fn from_sde(model: SdeModel, particles: usize, dt: f64, policy: RngPolicy) -> Self {
        let name = model.name().to_string();
        Self::new(SourceTag::SdeMc, name, GrowthBound::MARKOV, move |t, phi, x| {
            let e = mc_semigroup(&model, phi, t, x, particles, dt, &policy)?;
            Ok((e.mean, e.stderr))
        })
    }

    /// Mehler semigroup through the FFT density of `mu_t` (one dimension);
    /// densities are cached per time.
    pub fn from_mehler(model: MehlerModel, opts: DensityOptions) -> Self {
        let cache: Arc<Mutex<HashMap<u64, Arc<Density>>>> = Arc::default();
        Self::new(SourceTag::MehlerQuadrature, "mehler", GrowthBound::MARKOV, move |t, phi, x| {
            let cached = cache.lock().expect("density cache").get(&t.to_bits()).cloned();
            let den = match cached {
                Some(d) => d,
                None => {
                    let grid = Grid::symmetric(&[opts.half_width], &[opts.nodes])?;
                    let d = Arc::new(mu_density_fft(&model, t, &grid)?);
                    cache.lock().expect("density cache").insert(t.to_bits(), d.clone());
                    d
                }
            };
            Ok((density_expectation(&den, &model.flow(t, x), phi)?, 0.0))
        })
    }

    pub fn with_growth(mut self, growth: GrowthBound) -> Self {
        self.growth = growth;
        self
    }

    /// `P_t phi(x)` and its error bar; `t = 0` returns `phi(x)` exactly.
    pub fn eval(&self, t: f64, phi: &ScalarField, x: &[f64]) -> Result<(f64, f64)> {
        if !(t >= 0.0) {
            return invalid("semigroup time must be nonnegative");
        }
        if t == 0.0 {
            return Ok((phi.eval(x)?, 0.0));
        }
        let (v, e) = (self.eval)(t, phi, x)?;
        Ok((v, e.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuotientPoint {
    pub t: f64,
    pub quotient: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneratorEstimate {
    pub value: f64,
    /// Number of powers of `t` eliminated by extrapolation.
    pub order: usize,
    pub error: f64,
    pub trace: Vec<QuotientPoint>,
    /// False when the error bars dominate the quotient at every rung.
    pub conclusive: bool,
}

/// Rungs of Richardson extrapolation used by default (removes `t` and `t^2`).
pub const RICHARDSON_RUNGS: usize = 2;

fn check_ladder(ladder: &[f64]) -> Result<()> {
    if ladder.len() < 2 {
        return invalid("time ladder needs at least two rungs");
    }
    if ladder.iter().any(|t| !(*t > 0.0)) || ladder.windows(2).any(|w| !(w[1] < w[0])) {
        return invalid("time ladder must be positive and strictly decreasing");
    }
    Ok(())
}

/// Value at 0 of the polynomial through `(t_i, q_i)`, with the Lagrange weights.
fn extrapolate_to_zero(ts: &[f64], qs: &[f64]) -> (f64, Vec<f64>) {
    let w: Vec<f64> = (0..ts.len())
        .map(|i| (0..ts.len()).filter(|&j| j != i).map(|j| ts[j] / (ts[j] - ts[i])).product())
        .collect();
    (w.iter().zip(qs).map(|(a, b)| a * b).sum(), w)
}

fn extrapolate(trace: Vec<QuotientPoint>, rungs: usize) -> GeneratorEstimate {
    let k = (rungs + 1).min(trace.len());
    let tail = &trace[trace.len() - k..];
    let ts: Vec<f64> = tail.iter().map(|p| p.t).collect();
    let qs: Vec<f64> = tail.iter().map(|p| p.quotient).collect();
    let (value, w) = extrapolate_to_zero(&ts, &qs);
    let (lower, _) = extrapolate_to_zero(&ts[1..], &qs[1..]);
    let noise: f64 = w.iter().zip(tail).map(|(a, p)| a.abs() * p.error).sum();
    let conclusive = !trace.iter().all(|p| p.error > 0.0 && p.error > p.quotient.abs());
    GeneratorEstimate { value, order: k - 1, error: (value - lower).abs() + noise, trace, conclusive }
}

/// `lim (P_t phi(x) - phi(x)) / t` along the ladder, with the default extrapolation.
pub fn fd_generator(p: &SemigroupEvaluator, phi: &ScalarField, x: &[f64], ladder: &[f64]) -> Result<GeneratorEstimate> {
    fd_generator_with(p, phi, x, ladder, RICHARDSON_RUNGS)
}

pub fn fd_generator_with(
    p: &SemigroupEvaluator,
    phi: &ScalarField,
    x: &[f64],
    ladder: &[f64],
    rungs: usize,
) -> Result<GeneratorEstimate> {
    check_ladder(ladder)?;
    let f0 = phi.eval(x)?;
    let trace = ladder
        .iter()
        .map(|&t| {
            let (v, e) = p.eval(t, phi, x)?;
            Ok(QuotientPoint { t, quotient: (v - f0) / t, error: e / t })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(extrapolate(trace, rungs))
}

/// Central-difference value, gradient and Hessian of `f` at `x`.
fn fd_derivatives(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let d = x.len();
    let f0 = f(x)?;
    let mut g = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut y = x.to_vec();
    for i in 0..d {
        y[i] = x[i] + h;
        let fp = f(&y)?;
        y[i] = x[i] - h;
        let fm = f(&y)?;
        y[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
        hess[i * d + i] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in 0..i {
            let corner = |si: f64, sj: f64| {
                let mut z = x.to_vec();
                z[i] += si * h;
                z[j] += sj * h;
                f(&z)
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?) / (4.0 * h * h);
            hess[i * d + j] = v;
            hess[j * d + i] = v;
        }
    }
    Ok((f0, g, hess))
}

fn operator_at(model: &SdeModel, x: &[f64], g: &[f64], h: &[f64]) -> f64 {
    let d = x.len();
    let a = model.covariance(x);
    let b = model.drift(x);
    let second: f64 = (0..d * d).map(|k| a[k] * h[k]).sum();
    0.5 * second + b.iter().zip(g).map(|(u, v)| u * v).sum::<f64>()
}

/// Stencil step for fields without analytic derivatives.
pub const STENCIL_STEP: f64 = 1e-3;

/// `L_0 phi(x) = 1/2 tr(sigma sigma^T D^2 phi) + <b, grad phi>`.
pub fn kolmogorov_apply(model: &SdeModel, phi: &ScalarField, x: &[f64]) -> Result<f64> {
    kolmogorov_apply_with(model, phi, x, STENCIL_STEP)
}

/// As [`kolmogorov_apply`], with an explicit stencil step for fields that
/// carry no analytic derivatives.
pub fn kolmogorov_apply_with(model: &SdeModel, phi: &ScalarField, x: &[f64], h: f64) -> Result<f64> {
    if x.len() != model.dim() {
        return invalid("point has the wrong dimension");
    }
    if let Some((g, hess)) = phi.derivatives(x) {
        return Ok(operator_at(model, x, &g, &hess));
    }
    let (_, g, hess) = fd_derivatives(|y| phi.eval(y), x, h)?;
    Ok(operator_at(model, x, &g, &hess))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainVerdict {
    InDomainEvidence,
    OutOfDomainEvidence,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainOptions {
    /// Extrapolation error allowed per node, relative to `1 + ‖L phi‖_kappa`.
    pub cauchy_tol: f64,
    /// Outer/inner weighted-sup ratios at or below this count as bounded.
    pub bounded_ratio: f64,
    /// Ratios at or above this count as growth.
    pub growth_ratio: f64,
}

impl Default for DomainOptions {
    fn default() -> Self {
        Self { cauchy_tol: 1e-2, bounded_ratio: 1.25, growth_ratio: 1.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainReport {
    pub verdict: DomainVerdict,
    /// `sup_grid kappa |P_t phi - phi| / t` per ladder time.
    pub quotient_sups: Vec<(f64, f64)>,
    pub quotients_bounded: bool,
    /// Largest weighted extrapolation error over the grid.
    pub cauchy_error: f64,
    pub limits_exist: bool,
    /// Weighted sup of the limit field on the inner half and the whole grid.
    pub inner_sup: f64,
    pub outer_sup: f64,
    pub growth: f64,
    /// Weighted quotient sup growth between the same two regions.
    pub quotient_growth: f64,
}

/// Evidence for or against `phi ∈ D(L)` in the `kappa`-weighted sense:
/// bounded weighted quotients along the ladder, Cauchy pointwise limits, and
/// a limit field whose weighted sup stops growing on the outer half of the
/// grid. Never a proof.
pub fn domain_check(
    p: &SemigroupEvaluator,
    phi: &ScalarField,
    kappa: &Weight,
    grid: &Grid,
    ladder: &[f64],
    opts: &DomainOptions,
) -> Result<DomainReport> {
    check_ladder(ladder)?;
    let nodes: Vec<Vec<f64>> = grid.nodes().collect();
    let estimates = nodes
        .par_iter()
        .map(|x| fd_generator(p, phi, x, ladder))
        .collect::<Result<Vec<_>>>()?;
    let half: Vec<f64> = (0..grid.dim()).map(|j| 0.5 * (grid.upper()[j] - grid.lower()[j]) / 2.0).collect();
    let center: Vec<f64> = (0..grid.dim()).map(|j| 0.5 * (grid.upper()[j] + grid.lower()[j])).collect();
    let inner = |x: &[f64]| (0..x.len()).all(|j| (x[j] - center[j]).abs() <= half[j] + 1e-12);
    let weights: Vec<f64> = nodes.iter().map(|x| kappa.eval(x)).collect();

    let mut inner_sup: f64 = 0.0;
    let mut outer_sup: f64 = 0.0;
    let mut cauchy: f64 = 0.0;
    let mut conclusive = true;
    for ((x, e), w) in nodes.iter().zip(&estimates).zip(&weights) {
        let v = w * e.value.abs();
        outer_sup = outer_sup.max(v);
        if inner(x) {
            inner_sup = inner_sup.max(v);
        }
        cauchy = cauchy.max(w * e.error);
        conclusive &= e.conclusive;
    }
    let ratio = |inner: f64, outer: f64| {
        if outer <= 1e-12 {
            1.0
        } else if inner <= 1e-12 {
            f64::INFINITY
        } else {
            outer / inner
        }
    };
    let growth = ratio(inner_sup, outer_sup);
    let limits_exist = conclusive && cauchy <= opts.cauchy_tol * (1.0 + outer_sup);

    let mut quotient_sups = Vec::with_capacity(ladder.len());
    let mut quotient_growth: f64 = 1.0;
    for (k, &t) in ladder.iter().enumerate() {
        let (mut all, mut inn) = (0.0f64, 0.0f64);
        for ((x, e), w) in nodes.iter().zip(&estimates).zip(&weights) {
            let v = w * e.trace[k].quotient.abs();
            all = all.max(v);
            if inner(x) {
                inn = inn.max(v);
            }
        }
        quotient_growth = quotient_growth.max(ratio(inn, all));
        quotient_sups.push((t, all));
    }
    let (lo, hi) = quotient_sups
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), (_, v)| (lo.min(*v), hi.max(*v)));
    let quotients_bounded = hi <= 2.0 * lo + 1e-12;

    let verdict = if growth >= opts.growth_ratio || quotient_growth >= opts.growth_ratio || !quotients_bounded {
        DomainVerdict::OutOfDomainEvidence
    } else if limits_exist && growth <= opts.bounded_ratio && quotient_growth <= opts.bounded_ratio {
        DomainVerdict::InDomainEvidence
    } else {
        DomainVerdict::Inconclusive
    };
    Ok(DomainReport {
        verdict,
        quotient_sups,
        quotients_bounded,
        cauchy_error: cauchy,
        limits_exist,
        inner_sup,
        outer_sup,
        growth,
        quotient_growth,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResolventValue {
    pub value: f64,
    /// Quadrature discrepancy plus propagated evaluator error bars.
    pub error: f64,
    /// `M e^{(omega - lambda) T} C (1 + |x|^p) / (lambda - omega)` from the
    /// field's envelope; `None` without an envelope.
    pub tail_bound: Option<f64>,
}

/// `J(lambda) phi(x) = ∫_0^∞ e^{-lambda t} P_t phi(x) dt`, truncated at
/// `t_max` and integrated by composite Gauss–Legendre on unit panels.
pub fn resolvent_quadrature(
    p: &SemigroupEvaluator,
    lambda: f64,
    phi: &ScalarField,
    x: &[f64],
    t_max: f64,
    order: usize,
) -> Result<ResolventValue> {
    if !(lambda > p.growth.omega) {
        return Err(Error::BelowGrowth { lambda, rate: p.growth.omega });
    }
    if !(t_max > 0.0) || order < 2 {
        return invalid("need t_max > 0 and quadrature order >= 2");
    }
    let panels = t_max.ceil() as usize;
    let width = t_max / panels as f64;
    let integrate = |rule: &GaussLegendre| -> Result<(f64, f64)> {
        let mut acc = 0.0;
        let mut err = 0.0;
        for k in 0..panels {
            let a = k as f64 * width;
            for (node, w) in rule.nodes.iter().zip(&rule.weights) {
                let t = a + 0.5 * width * (node + 1.0);
                let (v, e) = p.eval(t, phi, x)?;
                let scale = 0.5 * width * w * (-lambda * t).exp();
                acc += scale * v;
                err += scale.abs() * e;
            }
        }
        Ok((acc, err))
    };
    let (value, noise) = integrate(&GaussLegendre::new(order))?;
    let (coarse, _) = integrate(&GaussLegendre::new(order / 2 + 1))?;
    let tail_bound = phi.envelope().map(|env| {
        let weight = 1.0 + crate::statespace::norm(x).powf(env.degree);
        p.growth.m * ((p.growth.omega - lambda) * t_max).exp() * env.constant * weight / (lambda - p.growth.omega)
    });
    Ok(ResolventValue { value, error: (value - coarse).abs() + noise, tail_bound })
}

/// Gauss–Legendre order and horizon used where a resolvent is tabulated.
pub const RESOLVENT_ORDER: usize = 20;
pub const RESOLVENT_HORIZON: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResolventResidual {
    /// `|lambda J phi - L_0 J phi - phi|(x)`.
    pub residual: f64,
    pub budget: f64,
    pub pass: bool,
}

/// Checks `(lambda - L_0) J(lambda) phi = phi` at `x`, with `L_0` applied by
/// central differences of step `h` to the quadrature resolvent.
pub fn resolvent_identity_check(
    model: &SdeModel,
    p: &SemigroupEvaluator,
    lambda: f64,
    phi: &ScalarField,
    x: &[f64],
    h: f64,
) -> Result<ResolventResidual> {
    if !(h > 0.0) {
        return invalid("stencil step must be positive");
    }
    let worst = Mutex::new(0.0f64);
    let tail = Mutex::new(0.0f64);
    let j = |y: &[f64]| {
        let r = resolvent_quadrature(p, lambda, phi, y, RESOLVENT_HORIZON, RESOLVENT_ORDER)?;
        let mut w = worst.lock().expect("error accumulator");
        *w = w.max(r.error);
        let mut tl = tail.lock().expect("error accumulator");
        *tl = tl.max(r.tail_bound.unwrap_or(0.0));
        Ok(r.value)
    };
    let phi_x = phi.eval(x)?;
    let signed = |step: f64| -> Result<(f64, f64)> {
        let (j0, g, hess) = fd_derivatives(j, x, step)?;
        Ok((lambda * j0 - operator_at(model, x, &g, &hess) - phi_x, j0))
    };
    let (fine, j0) = signed(h)?;
    let (coarse, _) = signed(2.0 * h)?;
    let residual = fine.abs();
    let a = model.covariance(x);
    let b = model.drift(x);
    let d = x.len();
    // Evaluation errors amplified by the stencil, the O(h^2) stencil
    // truncation estimated from the 2h stencil, and a roundoff floor.
    let amplification = lambda.abs()
        + (0..d).map(|i| 2.0 * a[i * d + i].abs() / (h * h) + b[i].abs() / h).sum::<f64>()
        + (0..d).flat_map(|i| (0..d).map(move |k| (i, k))).filter(|(i, k)| i != k).map(|(i, k)| a[i * d + k].abs() / (h * h)).sum::<f64>();
    let eval_err = worst.into_inner().expect("error accumulator") + tail.into_inner().expect("error accumulator");
    let truncation = (coarse - fine).abs() / 3.0;
    let budget = amplification * eval_err + 2.0 * truncation + 1e-8 * (1.0 + j0.abs());
    Ok(ResolventResidual { residual, budget, pass: residual <= budget })
}

/// `((n/t)(n/t - L_0)^{-1})^n phi` on a one-dimensional grid: `n` tridiagonal
/// solves with central differences and the boundary values frozen at `phi`.
pub fn euler_reconstruct(model: &SdeModel, phi: &ScalarField, t: f64, n: usize, grid: &Grid) -> Result<ScalarField> {
    if model.dim() != 1 || grid.dim() != 1 {
        return invalid("Euler reconstruction is one-dimensional");
    }
    if !(t > 0.0) || n == 0 {
        return invalid("need t > 0 and n >= 1");
    }
    let m = grid.len();
    if m < 3 {
        return invalid("grid needs interior nodes");
    }
    let h = grid.step(0);
    let rate = n as f64 / t;
    let xs = grid.axis_coords(0);
    let mut v = xs.iter().map(|x| phi.eval(&[*x])).collect::<Result<Vec<_>>>()?;
    // Rows of (rate - L_0): lower, diagonal, upper.
    let mut lower = vec![0.0; m];
    let mut diag = vec![1.0; m];
    let mut upper = vec![0.0; m];
    for i in 1..m - 1 {
        let x = [xs[i]];
        let a = model.covariance(&x)[0];
        let b = model.drift(&x)[0];
        let diff = 0.5 * a / (h * h);
        let adv = b / (2.0 * h);
        lower[i] = -(diff - adv);
        diag[i] = rate + 2.0 * diff;
        upper[i] = -(diff + adv);
    }
    // Thomas factorization, reused for every step.
    let mut c = vec![0.0; m];
    let mut piv = vec![0.0; m];
    piv[0] = diag[0];
    c[0] = upper[0] / piv[0];
    for i in 1..m {
        piv[i] = diag[i] - lower[i] * c[i - 1];
        if piv[i].abs() < 1e-12 * diag[i].abs().max(1.0) {
            return Err(Error::Singular(format!("tridiagonal pivot vanishes at node {i}")));
        }
        c[i] = upper[i] / piv[i];
    }
    let mut rhs = vec![0.0; m];
    for _ in 0..n {
        rhs[0] = v[0];
        rhs[m - 1] = v[m - 1];
        for i in 1..m - 1 {
            rhs[i] = rate * v[i];
        }
        v[0] = rhs[0] / piv[0];
        for i in 1..m {
            v[i] = (rhs[i] - lower[i] * v[i - 1]) / piv[i];
        }
        for i in (0..m - 1).rev() {
            v[i] -= c[i] * v[i + 1];
        }
    }
    ScalarField::sampled(grid.clone(), v)
}

/// Random stream reserved for duality residual runs.
pub const FPK_STREAM: u32 = 0x4650_4b00;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FpkResidual {
    /// Mean of `phi(X_t) - phi(x) - ∫_0^t L_0 phi(X_s) ds` at step `dt`.
    pub residual: f64,
    pub stderr: f64,
    /// Coarse minus fine mean on coupled half-step paths.
    pub pilot_shift: f64,
    pub pilot_stderr: f64,
    /// Estimated discretization bias: `2 (|shift| + 3 stderr(shift))`.
    pub budget: f64,
    pub pass: bool,
    pub aborted: usize,
}

/// Duality residual `∫ phi dnu_t - phi(x) - ∫_0^t ∫ L_0 phi dnu_s ds` with
/// `nu_s` the law of the Euler–Maruyama path from `x`.
pub fn fpk_residual(
    model: &SdeModel,
    phi: &ScalarField,
    x: &[f64],
    t: f64,
    particles: usize,
    dt: f64,
    policy: &RngPolicy,
) -> Result<FpkResidual> {
    fpk_residual_against(model, model, phi, x, t, particles, dt, policy)
}

/// As [`fpk_residual`], but with the paths of `path_model` and the operator
/// of `operator_model` (negative controls).
///
/// Each particle runs a coarse path at `dt` and a fine path at `dt/2` from
/// the same Brownian increments. The coarse estimate is reported; the
/// coarse–fine difference calibrates the first-order time-step bias.
#[allow(clippy::too_many_arguments)]
pub fn fpk_residual_against(
    path_model: &SdeModel,
    operator_model: &SdeModel,
    phi: &ScalarField,
    x: &[f64],
    t: f64,
    particles: usize,
    dt: f64,
    policy: &RngPolicy,
) -> Result<FpkResidual> {
    let d = path_model.dim();
    if x.len() != d || operator_model.dim() != d || operator_model.noise_dim() != path_model.noise_dim() {
        return invalid("dimensions disagree");
    }
    if particles < 2 || !(t > 0.0) || !(dt > 0.0) {
        return invalid("need t, dt > 0 and at least two particles");
    }
    let steps = (t / dt * (1.0 - 1e-12)).ceil() as usize;
    let dt = t / steps as f64;
    let r = path_model.noise_dim();
    let phi_x = phi.eval(x)?;
    let analytic = phi.has_derivatives();

    let out: Vec<Option<(f64, f64)>> = (0..particles)
        .into_par_iter()
        .map(|i| -> Result<Option<(f64, f64)>> {
            let mut rng = policy.rng(FPK_STREAM, i as u32);
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * r];
            let mut ob = vec![0.0; d];
            let mut os = vec![0.0; d * r];
            let mut g = vec![0.0; d];
            let mut hs = vec![0.0; d * d];
            let mut z1 = vec![0.0; r];
            let mut z2 = vec![0.0; r];
            let mut gen = |y: &[f64]| -> Result<f64> {
                if !analytic {
                    return kolmogorov_apply(operator_model, phi, y);
                }
                phi.derivatives_into(y, &mut g, &mut hs);
                operator_model.drift_into(y, &mut ob);
                operator_model.diffusion_into(y, &mut os);
                let mut acc = 0.0;
                for p in 0..d {
                    acc += ob[p] * g[p];
                    for q in 0..d {
                        let a: f64 = (0..r).map(|l| os[p * r + l] * os[q * r + l]).sum();
                        acc += 0.5 * a * hs[p * d + q];
                    }
                }
                Ok(acc)
            };
            let mut step = |y: &mut [f64], z: &[f64], h: f64| {
                path_model.drift_into(y, &mut b);
                path_model.diffusion_into(y, &mut s);
                let sq = h.sqrt();
                for j in 0..d {
                    let noise: f64 = (0..r).map(|l| s[j * r + l] * z[l]).sum();
                    y[j] += b[j] * h + noise * sq;
                }
            };
            let mut coarse = x.to_vec();
            let mut fine = x.to_vec();
            let g0 = gen(x)?;
            let (mut int_c, mut int_f) = (0.5 * g0 * dt, 0.5 * g0 * 0.5 * dt);
            for k in 0..steps {
                for l in 0..r {
                    z1[l] = StandardNormal.sample(&mut rng);
                    z2[l] = StandardNormal.sample(&mut rng);
                }
                step(&mut fine, &z1, 0.5 * dt);
                let mid = gen(&fine)?;
                step(&mut fine, &z2, 0.5 * dt);
                let zc: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| (a + b) / std::f64::consts::SQRT_2).collect();
                step(&mut coarse, &zc, dt);
                if coarse.iter().chain(&fine).any(|v| !v.is_finite()) {
                    return Ok(None);
                }
                let gc = gen(&coarse)?;
                let gf = gen(&fine)?;
                let last = k + 1 == steps;
                let wc = if last { 0.5 } else { 1.0 };
                int_c += wc * gc * dt;
                int_f += 0.5 * dt * (mid + wc * gf);
            }
            let yc = phi.eval(&coarse)? - phi_x - int_c;
            let yf = phi.eval(&fine)? - phi_x - int_f;
            Ok(Some((yc, yf)))
        })
        .collect::<Result<Vec<_>>>()?;
    let aborted = out.iter().filter(|o| o.is_none()).count();
    if aborted as f64 > MAX_ABORTED_FRACTION * particles as f64 {
        return Err(Error::Numerical(format!("{aborted} of {particles} paths exploded")));
    }
    let kept: Vec<(f64, f64)> = out.into_iter().flatten().collect();
    let (residual, stderr) = mean_stderr(kept.iter().map(|p| p.0));
    let (pilot_shift, pilot_stderr) = mean_stderr(kept.iter().map(|p| p.0 - p.1));
    let budget = 2.0 * (pilot_shift.abs() + 3.0 * pilot_stderr);
    Ok(FpkResidual {
        residual,
        stderr,
        pilot_shift,
        pilot_stderr,
        budget,
        pass: residual.abs() <= 3.0 * stderr + budget,
        aborted,
    })
}
