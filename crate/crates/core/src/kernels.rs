//! Transition kernel families `mu_t(x, dy)` and numerical checks of the
//! representation conditions: weighted mass bound, tightness on compacts
//! and convergence to `delta_x` along approach paths.
//!
//! Measurability in `x` is satisfied by construction (every family is a
//! function of `(t, x)`) and is not tested.

use std::fmt;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::quad::{cholesky_psd, GaussHermite};
use crate::statespace::{norm, CompactExhaustion, RngPolicy, ScalarField, Weight};

/// Finite signed measure given by weighted atoms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    /// Flat, `len() * dim` coordinates.
    points: Vec<f64>,
    weights: Vec<f64>,
    total_mass: f64,
    /// Atoms are the measure itself rather than a random sample of it.
    exact: bool,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>, exact: bool) -> Result<Self> {
        if dim == 0 || points.len() != weights.len() * dim {
            return invalid("points and weights disagree in length");
        }
        if weights.is_empty() {
            return invalid("measure needs at least one atom");
        }
        if weights.iter().any(|w| !w.is_finite()) || points.iter().any(|p| !p.is_finite()) {
            return invalid("non-finite atom");
        }
        let total_mass = weights.iter().sum();
        Ok(Self { dim, points, weights, total_mass, exact })
    }

    /// `n` equally weighted sample points of a probability measure.
    pub fn samples(dim: usize, points: Vec<f64>) -> Result<Self> {
        let n = points.len() / dim.max(1);
        Self::new(dim, points, vec![1.0 / n as f64; n], false)
    }

    pub fn dirac(x: &[f64]) -> Self {
        Self { dim: x.len(), points: x.to_vec(), weights: vec![1.0], total_mass: 1.0, exact: true }
    }

    /// Exact convex combination of point masses.
    pub fn atoms(x: &[&[f64]], weights: &[f64]) -> Result<Self> {
        let dim = x.first().map_or(0, |p| p.len());
        let points = x.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(dim, points, weights.to_vec(), true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    /// `(∫ phi dmu / mass, stderr)`; the error is zero for exact measures.
    pub fn integrate(&self, phi: &ScalarField) -> Result<(f64, f64)> {
        let vals = (0..self.len())
            .map(|i| phi.eval(self.point(i)))
            .collect::<Result<Vec<_>>>()?;
        let mean = vals.iter().zip(&self.weights).map(|(v, w)| v * w).sum::<f64>() / self.total_mass;
        if self.exact || self.len() < 2 {
            return Ok((mean, 0.0));
        }
        let abs_mass: f64 = self.weights.iter().map(|w| w.abs()).sum();
        let var = vals
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| w.abs() * (v - mean).powi(2))
            .sum::<f64>()
            / abs_mass;
        let n_eff = abs_mass * abs_mass / self.weights.iter().map(|w| w * w).sum::<f64>();
        Ok((mean, (var / (n_eff - 1.0).max(1.0)).sqrt()))
    }
}

pub type MeanFn = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;
pub type CovFn = dyn Fn(f64) -> Vec<f64> + Send + Sync;
pub type SamplerFn = dyn Fn(f64, &[f64], usize, &RngPolicy, u32) -> Result<EmpiricalMeasure> + Send + Sync;
pub type AtomFn = dyn Fn(f64, &[f64]) -> EmpiricalMeasure + Send + Sync;

#[derive(Clone)]
enum Repr {
    Gaussian { mean: Arc<MeanFn>, cov: Arc<CovFn> },
    Sampler(Arc<SamplerFn>),
    Atoms(Arc<AtomFn>),
}

/// A family of measures `mu_t(x, .)`, `0 <= t <= horizon`.
#[derive(Clone)]
pub struct KernelFamily {
    name: String,
    dim: usize,
    horizon: f64,
    repr: Repr,
    /// Largest polynomial degree integrable against every measure; `None` for all.
    moment_degree: Option<f64>,
    quadrature_order: usize,
}

impl fmt::Debug for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelFamily")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .finish()
    }
}

/// Result of integrating a field against one kernel measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KernelValue {
    pub value: f64,
    pub stderr: f64,
    /// Gauss–Hermite order for closed-form kernels.
    pub quadrature_order: Option<usize>,
}

/// OU variance `sigma^2 (1 - e^{-2at}) / (2a)`, continuous at `a = 0`.
pub fn ou_variance(a: f64, sigma: f64, t: f64) -> f64 {
    if (a * t).abs() < 1e-8 {
        sigma * sigma * t * (1.0 - a * t)
    } else {
        sigma * sigma * (-(-2.0 * a * t).exp_m1()) / (2.0 * a)
    }
}

impl KernelFamily {
    /// Gaussian kernel `N(mean(t, x), cov(t))`; `cov` is row-major `d x d`.
    pub fn gaussian(
        name: impl Into<String>,
        dim: usize,
        horizon: f64,
        mean: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
        cov: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            horizon,
            repr: Repr::Gaussian { mean: Arc::new(mean), cov: Arc::new(cov) },
            moment_degree: None,
            quadrature_order: 64,
        }
    }

    /// Random sampler; must return `delta_x` at `t = 0`.
    pub fn sampler(
        name: impl Into<String>,
        dim: usize,
        horizon: f64,
        moment_degree: Option<f64>,
        f: impl Fn(f64, &[f64], usize, &RngPolicy, u32) -> Result<EmpiricalMeasure> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            horizon,
            repr: Repr::Sampler(Arc::new(f)),
            moment_degree,
            quadrature_order: 0,
        }
    }

    /// Deterministic finitely atomic family.
    pub fn atoms(
        name: impl Into<String>,
        dim: usize,
        horizon: f64,
        f: impl Fn(f64, &[f64]) -> EmpiricalMeasure + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            horizon,
            repr: Repr::Atoms(Arc::new(f)),
            moment_degree: None,
            quadrature_order: 0,
        }
    }

    /// One-dimensional OU marginals `N(e^{-at} x, sigma^2 (1 - e^{-2at}) / (2a))`.
    pub fn ornstein_uhlenbeck(a: f64, sigma: f64, horizon: f64) -> Self {
        Self::gaussian(
            "ornstein_uhlenbeck",
            1,
            horizon,
            move |t, x| vec![(-a * t).exp() * x[0]],
            move |t| vec![ou_variance(a, sigma, t)],
        )
    }

    /// `N(x, sigma^2 t I_d)`.
    pub fn brownian(dim: usize, sigma: f64, horizon: f64) -> Self {
        Self::gaussian("brownian", dim, horizon, |_, x| x.to_vec(), move |t| {
            let mut c = vec![0.0; dim * dim];
            for i in 0..dim {
                c[i * dim + i] = sigma * sigma * t;
            }
            c
        })
    }

    pub fn identity(dim: usize, horizon: f64) -> Self {
        Self::atoms("identity", dim, horizon, |_, x| EmpiricalMeasure::dirac(x))
    }

    /// `delta_{x + v t}`.
    pub fn shift(velocity: f64, horizon: f64) -> Self {
        Self::atoms("shift", 1, horizon, move |t, x| EmpiricalMeasure::dirac(&[x[0] + velocity * t]))
    }

    /// `delta_{x + jump}` for `t > 0`, `delta_x` at `t = 0`.
    pub fn jump_at_zero(jump: f64, horizon: f64) -> Self {
        Self::atoms("jump_at_zero", 1, horizon, move |t, x| {
            if t > 0.0 {
                EmpiricalMeasure::dirac(&[x[0] + jump])
            } else {
                EmpiricalMeasure::dirac(x)
            }
        })
    }

    /// `1/2 delta_x + 1/2 delta_{x + 1/t}` for `t > 0`, `delta_x` at `t = 0`.
    pub fn escape(horizon: f64) -> Self {
        Self::atoms("escape", 1, horizon, |t, x| {
            if t > 0.0 {
                let far = [x[0] + 1.0 / t];
                EmpiricalMeasure::atoms(&[x, &far], &[0.5, 0.5]).expect("two atoms")
            } else {
                EmpiricalMeasure::dirac(x)
            }
        })
    }

    pub fn with_quadrature_order(mut self, order: usize) -> Self {
        self.quadrature_order = order;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn is_closed_form(&self) -> bool {
        matches!(self.repr, Repr::Gaussian { .. })
    }

    fn check_args(&self, t: f64, x: &[f64]) -> Result<()> {
        if !(t >= 0.0 && t <= self.horizon) {
            return invalid(format!("time {t} outside [0, {}]", self.horizon));
        }
        if x.len() != self.dim {
            return invalid(format!("point has dimension {}, kernel has {}", x.len(), self.dim));
        }
        Ok(())
    }

    /// A realization of `mu_t(x, .)`: the measure itself for atomic
    /// families, `n` samples for Gaussian and random families.
    pub fn measure(&self, t: f64, x: &[f64], n: usize, policy: &RngPolicy, stream: u32) -> Result<EmpiricalMeasure> {
        self.check_args(t, x)?;
        match &self.repr {
            Repr::Atoms(f) => Ok(f(t, x)),
            Repr::Sampler(f) => {
                if t == 0.0 {
                    return Ok(EmpiricalMeasure::dirac(x));
                }
                f(t, x, n, policy, stream)
            }
            Repr::Gaussian { mean, cov } => {
                let m = mean(t, x);
                let c = cov(t);
                if c.iter().all(|v| *v == 0.0) {
                    return Ok(EmpiricalMeasure::dirac(&m));
                }
                let d = self.dim;
                let l = cholesky_psd(&c, d)?;
                let mut pts = vec![0.0; n * d];
                pts.par_chunks_mut(d).enumerate().for_each(|(i, y)| {
                    let mut rng = policy.rng(stream, i as u32);
                    let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    for r in 0..d {
                        y[r] = m[r] + (0..=r).map(|j| l[r * d + j] * z[j]).sum::<f64>();
                    }
                });
                EmpiricalMeasure::samples(d, pts)
            }
        }
    }

    /// `∫ phi dmu_t(x, .)`: quadrature for closed forms, otherwise the
    /// (sample) mean with its standard error.
    pub fn apply(&self, t: f64, phi: &ScalarField, x: &[f64], n: usize, policy: &RngPolicy) -> Result<KernelValue> {
        self.check_args(t, x)?;
        if let (Some(p), Some(env)) = (self.moment_degree, phi.envelope()) {
            if env.degree > p {
                return Err(Error::EnvelopeViolation(format!(
                    "field grows like |x|^{} but the kernel only integrates degree {p}",
                    env.degree
                )));
            }
        }
        match &self.repr {
            Repr::Gaussian { mean, cov } => {
                let m = mean(t, x);
                let c = cov(t);
                if c.iter().all(|v| *v == 0.0) {
                    return Ok(KernelValue { value: phi.eval(&m)?, stderr: 0.0, quadrature_order: None });
                }
                let gh = GaussHermite::new(self.quadrature_order);
                let l = cholesky_psd(&c, self.dim)?;
                let err = std::cell::RefCell::new(None);
                let s = gh.expect_nd(&m, &l, |y| {
                    phi.eval(y).unwrap_or_else(|e| {
                        err.borrow_mut().get_or_insert(e);
                        f64::NAN
                    })
                });
                if let Some(e) = err.into_inner() {
                    return Err(e);
                }
                // Normalizing makes the integral of constants exact.
                let value = s / gh.weights.iter().sum::<f64>().powi(self.dim as i32);
                Ok(KernelValue { value, stderr: 0.0, quadrature_order: Some(self.quadrature_order) })
            }
            _ => {
                let mu = self.measure(t, x, n, policy, 0)?;
                let (value, stderr) = mu.integrate(phi)?;
                Ok(KernelValue { value, stderr, quadrature_order: None })
            }
        }
    }

    /// `∫ kappa(y)^{-1} |mu_t|(x, dy)`.
    fn inverse_weight_mass(&self, t: f64, x: &[f64], kappa: &Weight, n: usize, policy: &RngPolicy, stream: u32) -> Result<f64> {
        match &self.repr {
            Repr::Gaussian { mean, cov } => {
                let m = mean(t, x);
                let c = cov(t);
                if c.iter().all(|v| *v == 0.0) {
                    return Ok(kappa.inverse(&m));
                }
                let gh = GaussHermite::new(self.quadrature_order);
                let l = cholesky_psd(&c, self.dim)?;
                Ok(gh.expect_nd(&m, &l, |y| kappa.inverse(y)))
            }
            _ => {
                let mu = self.measure(t, x, n, policy, stream)?;
                Ok((0..mu.len()).map(|i| mu.weights[i].abs() * kappa.inverse(mu.point(i))).sum())
            }
        }
    }
}

pub fn apply_kernel(
    k: &KernelFamily,
    t: f64,
    phi: &ScalarField,
    x: &[f64],
    n: usize,
    policy: &RngPolicy,
) -> Result<KernelValue> {
    k.apply(t, phi, x, n, policy)
}

/// Smallest radius `R` such that, for every measure, the `kappa^{-1}`-weighted
/// mass of `{|y| > R}` is below `eps` times its total weighted mass. Infinite
/// when no `R <= max_radius` works.
pub fn tightness_radius(measures: &[EmpiricalMeasure], kappa: &Weight, eps: f64, max_radius: f64) -> Result<f64> {
    if measures.is_empty() {
        return invalid("need at least one measure");
    }
    if !(eps > 0.0 && eps < 1.0) {
        return invalid("eps must lie in (0, 1)");
    }
    let mut worst: f64 = 0.0;
    for mu in measures {
        let mut atoms: Vec<(f64, f64)> = (0..mu.len())
            .map(|i| {
                let y = mu.point(i);
                (norm(y), mu.weights[i].abs() * kappa.inverse(y))
            })
            .collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = atoms.len();
        let mut suffix = vec![0.0; n + 1];
        for i in (0..n).rev() {
            suffix[i] = suffix[i + 1] + atoms[i].1;
        }
        let total = suffix[0];
        // Candidates are 0 and the atom radii; `end` is the first atom strictly beyond the candidate.
        let mut r = f64::INFINITY;
        let mut end = atoms.iter().take_while(|a| a.0 <= 0.0).count();
        let mut candidate = 0.0;
        loop {
            if suffix[end] < eps * total {
                r = candidate;
                break;
            }
            if end == n {
                break;
            }
            candidate = atoms[end].0;
            while end < n && atoms[end].0 <= candidate {
                end += 1;
            }
        }
        worst = worst.max(r);
    }
    Ok(if worst > max_radius { f64::INFINITY } else { worst })
}

/// Approach paths `t_k = t0 2^{-k}`, `x_k = x + r0 2^{-k} dir`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApproachPaths {
    pub t0: f64,
    pub r0: f64,
    pub levels: usize,
    pub base_points: Vec<Vec<f64>>,
    pub directions: Vec<Vec<f64>>,
}

impl ApproachPaths {
    pub fn default_1d(t0: f64) -> Self {
        Self {
            t0,
            r0: 0.5,
            levels: 24,
            base_points: vec![vec![0.0], vec![0.7], vec![-1.3]],
            directions: vec![vec![1.0], vec![-1.0]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelCheckConfig {
    /// Declared bound for the weighted mass supremum.
    pub mass_bound: f64,
    /// Uniform times on `(0, T]` in addition to the geometric ones.
    pub uniform_times: usize,
    /// Geometric times `T 2^{-k}`, `k = 1..=geometric_levels`.
    pub geometric_levels: usize,
    /// Sample points per axis on each compact.
    pub points_per_axis: usize,
    pub particles: usize,
    pub max_radius: f64,
    /// Number of trailing rungs of each approach path that must lie within tolerance.
    pub tail_rungs: usize,
    pub approach: ApproachPaths,
    pub policy: RngPolicy,
}

impl KernelCheckConfig {
    pub fn default_1d(horizon: f64) -> Self {
        Self {
            mass_bound: 10.0,
            uniform_times: 10,
            geometric_levels: 30,
            points_per_axis: 21,
            particles: 4000,
            max_radius: 1e4,
            tail_rungs: 3,
            approach: ApproachPaths::default_1d(horizon.min(0.5)),
            policy: RngPolicy::new(7),
        }
    }

    fn times(&self, horizon: f64) -> Vec<f64> {
        let mut ts = vec![0.0];
        ts.extend((1..=self.uniform_times).map(|i| horizon * i as f64 / self.uniform_times as f64));
        ts.extend((1..=self.geometric_levels).map(|k| horizon * 0.5f64.powi(k as i32)));
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MassCondition {
    pub sup: f64,
    pub bound: f64,
    pub argmax_t: f64,
    pub argmax_x: Vec<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TightnessEntry {
    pub compact_radius: f64,
    /// `None` when the search up to `max_radius` was exhausted.
    pub radius: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TightnessCondition {
    pub horizon: f64,
    pub eps: f64,
    pub max_radius: f64,
    pub entries: Vec<TightnessEntry>,
    /// Only the configured exhaustion is checked, not every compact.
    pub scope: &'static str,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApproachTrace {
    pub test_fn: usize,
    pub base: Vec<f64>,
    pub direction: Vec<f64>,
    pub times: Vec<f64>,
    pub deviations: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinuityCondition {
    pub tol: f64,
    pub traces: Vec<ApproachTrace>,
    /// Largest tail deviation over all traces.
    pub worst: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelReport {
    pub family: String,
    pub condition3: MassCondition,
    pub condition4: TightnessCondition,
    pub condition5: ContinuityCondition,
}

impl KernelReport {
    /// Numbers (3, 4, 5) of the conditions that failed.
    pub fn failed(&self) -> Vec<u8> {
        let mut out = Vec::new();
        if !self.condition3.pass {
            out.push(3);
        }
        if !self.condition4.pass {
            out.push(4);
        }
        if !self.condition5.pass {
            out.push(5);
        }
        out
    }
}

fn lattice_in_ball(dim: usize, radius: f64, per_axis: usize) -> Vec<Vec<f64>> {
    let per_axis = per_axis.max(2);
    let step = 2.0 * radius / (per_axis - 1) as f64;
    let total = per_axis.pow(dim as u32);
    (0..total)
        .map(|mut k| {
            let mut x = vec![0.0; dim];
            for v in x.iter_mut() {
                *v = -radius + (k % per_axis) as f64 * step;
                k /= per_axis;
            }
            x
        })
        .filter(|x| norm(x) <= radius * (1.0 + 1e-12))
        .collect()
}

/// Checks conditions (3)–(5) for `k` on `[0, horizon]`.
#[allow(clippy::too_many_arguments)]
pub fn check_kernel_conditions(
    k: &KernelFamily,
    kappa: &Weight,
    horizon: f64,
    compacts: &CompactExhaustion,
    test_fns: &[ScalarField],
    eps: f64,
    tol: f64,
    cfg: &KernelCheckConfig,
) -> Result<KernelReport> {
    if !(eps > 0.0 && eps < 1.0) {
        return invalid("eps must lie in (0, 1)");
    }
    if !(tol > 0.0) {
        return invalid("tolerance must be positive");
    }
    if !(horizon > 0.0 && horizon <= k.horizon) {
        return invalid("horizon must lie in (0, kernel horizon]");
    }
    let times = cfg.times(horizon);
    let d = k.dim;

    // (3) sup over the time grid and a lattice on the largest compact.
    let xs = lattice_in_ball(d, compacts.largest().radius, cfg.points_per_axis);
    let jobs: Vec<(usize, usize)> = (0..times.len()).flat_map(|i| (0..xs.len()).map(move |j| (i, j))).collect();
    let masses = jobs
        .par_iter()
        .map(|&(i, j)| {
            let stream = 1_000_000 + (i * xs.len() + j) as u32;
            k.inverse_weight_mass(times[i], &xs[j], kappa, cfg.particles, &cfg.policy, stream)
                .map(|m| kappa.eval(&xs[j]) * m)
        })
        .collect::<Result<Vec<_>>>()?;
    let (best, sup) = masses
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let condition3 = MassCondition {
        sup,
        bound: cfg.mass_bound,
        argmax_t: times[jobs[best].0],
        argmax_x: xs[jobs[best].1].clone(),
        pass: sup.is_finite() && sup <= cfg.mass_bound,
    };

    // (4) tightness of the weighted family per compact.
    let mut entries = Vec::with_capacity(compacts.len());
    for (c_idx, c) in compacts.compacts().enumerate() {
        let pts = lattice_in_ball(d, c.radius, cfg.points_per_axis);
        let jobs: Vec<(usize, usize)> = (0..times.len()).flat_map(|i| (0..pts.len()).map(move |j| (i, j))).collect();
        let measures = jobs
            .par_iter()
            .map(|&(i, j)| {
                let stream = ((c_idx * times.len() + i) * pts.len() + j) as u32;
                k.measure(times[i], &pts[j], cfg.particles, &cfg.policy, stream)
            })
            .collect::<Result<Vec<_>>>()?;
        let r = tightness_radius(&measures, kappa, eps, cfg.max_radius)?;
        entries.push(TightnessEntry {
            compact_radius: c.radius,
            radius: r.is_finite().then_some(r),
            pass: r.is_finite(),
        });
    }
    let condition4 = TightnessCondition {
        horizon,
        eps,
        max_radius: cfg.max_radius,
        pass: entries.iter().all(|e| e.pass),
        entries,
        scope: "configured exhaustion",
    };

    // (5) convergence to delta_x along approach paths.
    let ap = &cfg.approach;
    let mut specs = Vec::new();
    for (fi, _) in test_fns.iter().enumerate() {
        for base in &ap.base_points {
            for dir in &ap.directions {
                specs.push((fi, base.clone(), dir.clone()));
            }
        }
    }
    let traces = specs
        .par_iter()
        .map(|(fi, base, dir)| {
            let phi = &test_fns[*fi];
            let target = phi.eval(base)?;
            let mut ts = Vec::with_capacity(ap.levels + 1);
            let mut devs = Vec::with_capacity(ap.levels + 1);
            let mut errs = Vec::with_capacity(ap.levels + 1);
            for lvl in 0..=ap.levels {
                let s = 0.5f64.powi(lvl as i32);
                let t = (ap.t0 * s).min(horizon);
                let x: Vec<f64> = base.iter().zip(dir).map(|(b, u)| b + ap.r0 * s * u).collect();
                let v = k.apply(t, phi, &x, cfg.particles, &cfg.policy)?;
                ts.push(t);
                devs.push((v.value - target).abs());
                errs.push(v.stderr);
            }
            let tail = cfg.tail_rungs.clamp(1, devs.len());
            let pass = devs[devs.len() - tail..]
                .iter()
                .zip(&errs[errs.len() - tail..])
                .all(|(d, e)| d - 3.0 * e <= tol);
            Ok(ApproachTrace {
                test_fn: *fi,
                base: base.clone(),
                direction: dir.clone(),
                times: ts,
                deviations: devs,
                stderrs: errs,
                pass,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = traces
        .iter()
        .map(|tr| tr.deviations[tr.deviations.len() - cfg.tail_rungs.clamp(1, tr.deviations.len())..].iter().copied().fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let condition5 = ContinuityCondition { tol, pass: traces.iter().all(|t| t.pass), traces, worst };

    Ok(KernelReport { family: k.name.clone(), condition3, condition4, condition5 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::make_exhaustion;

    fn policy() -> RngPolicy {
        RngPolicy::new(2024)
    }

    #[test]
    fn identity_and_shift_kernels() {
        let id = KernelFamily::identity(1, 1.0);
        let v = apply_kernel(&id, 0.3, &ScalarField::cos(), &[0.4], 1, &policy()).unwrap();
        assert_eq!((v.value, v.stderr), (0.4f64.cos(), 0.0));
        let sh = KernelFamily::shift(1.0, 2.0);
        let v = apply_kernel(&sh, 1.0, &ScalarField::sin(), &[0.0], 1, &policy()).unwrap();
        assert_eq!(v.value, 1f64.sin());
    }

    #[test]
    fn brownian_second_moment_by_sampling() {
        let k = KernelFamily::brownian(1, 1.0, 1.0);
        let mu = k.measure(1.0, &[0.0], 100_000, &policy(), 3).unwrap();
        let (m, se) = mu.integrate(&ScalarField::square()).unwrap();
        assert!((m - 1.0).abs() <= 3.0 * se, "{m} ± {se}");
        assert!((se - 2f64.sqrt() / 100_000f64.sqrt()).abs() < 2e-4);
        // quadrature for the closed form is exact for polynomials
        let q = apply_kernel(&k, 1.0, &ScalarField::square(), &[0.0], 1, &policy()).unwrap();
        assert!((q.value - 1.0).abs() < 1e-13);
        assert_eq!(q.quadrature_order, Some(64));
    }

    #[test]
    fn probability_kernels_integrate_one_exactly() {
        let k = KernelFamily::ornstein_uhlenbeck(1.0, 1.0, 1.0);
        for t in [0.0, 1e-6, 0.3, 1.0] {
            let v = apply_kernel(&k, t, &ScalarField::constant(1.0), &[2.5], 1, &policy()).unwrap();
            assert_eq!(v.value, 1.0);
        }
        let mu = KernelFamily::brownian(1, 1.0, 1.0).measure(0.5, &[0.0], 999, &policy(), 0).unwrap();
        assert!((mu.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn envelope_violation_refused() {
        let k = KernelFamily::sampler("finite-mean", 1, 1.0, Some(1.0), |_, x, _, _, _| Ok(EmpiricalMeasure::dirac(x)));
        let r = apply_kernel(&k, 0.5, &ScalarField::square(), &[0.0], 10, &policy());
        assert!(matches!(r, Err(Error::EnvelopeViolation(_))));
    }

    #[test]
    fn tightness_radius_examples() {
        let k = Weight::Unit;
        assert_eq!(tightness_radius(&[EmpiricalMeasure::dirac(&[0.0])], &k, 0.1, 1e3).unwrap(), 0.0);
        let two = EmpiricalMeasure::atoms(&[&[0.0], &[100.0]], &[0.5, 0.5]).unwrap();
        assert_eq!(tightness_radius(std::slice::from_ref(&two), &k, 0.25, 1e3).unwrap(), 100.0);
        assert_eq!(tightness_radius(&[two], &k, 0.25, 50.0).unwrap(), f64::INFINITY);
        let mu = KernelFamily::brownian(1, 1.0, 1.0).measure(1.0, &[0.0], 100_000, &policy(), 9).unwrap();
        let r = tightness_radius(&[mu], &k, 0.05, 1e3).unwrap();
        assert!((r - 1.96).abs() < 0.1, "{r}");
    }

    fn tests_fns() -> Vec<ScalarField> {
        vec![ScalarField::sin(), ScalarField::cos(), ScalarField::gaussian_bump()]
    }

    #[test]
    fn ou_passes_all_conditions() {
        let k = KernelFamily::ornstein_uhlenbeck(1.0, 1.0, 1.0);
        let ex = make_exhaustion(1.0, 2.0, 3).unwrap();
        let cfg = KernelCheckConfig { particles: 2000, ..KernelCheckConfig::default_1d(1.0) };
        let rep = check_kernel_conditions(&k, &Weight::Unit, 1.0, &ex, &tests_fns(), 0.05, 1e-3, &cfg).unwrap();
        assert!(rep.failed().is_empty(), "{rep:#?}");
        assert!((rep.condition3.sup - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jump_family_fails_continuity_only() {
        let k = KernelFamily::jump_at_zero(1.0, 1.0);
        let ex = make_exhaustion(1.0, 2.0, 3).unwrap();
        let cfg = KernelCheckConfig::default_1d(1.0);
        let rep = check_kernel_conditions(&k, &Weight::Unit, 1.0, &ex, &tests_fns(), 0.05, 1e-3, &cfg).unwrap();
        assert_eq!(rep.failed(), vec![5]);
        let at_zero = rep
            .condition5
            .traces
            .iter()
            .find(|t| t.test_fn == 0 && t.base == [0.0])
            .unwrap();
        let last = *at_zero.deviations.last().unwrap();
        assert!((last - 1f64.sin()).abs() < 1e-6, "{last}");
    }

    #[test]
    fn escape_family_fails_tightness() {
        let k = KernelFamily::escape(1.0);
        let ex = make_exhaustion(1.0, 2.0, 3).unwrap();
        let cfg = KernelCheckConfig::default_1d(1.0);
        let rep = check_kernel_conditions(&k, &Weight::Unit, 1.0, &ex, &tests_fns(), 0.05, 1e-3, &cfg).unwrap();
        assert!(rep.failed().contains(&4));
        assert!(rep.condition3.pass);
        // Half of the mass leaves every ball, so the family does not tend to delta_x either.
        assert!(!rep.condition5.pass);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn monotone_on_common_particles(shift in 0.0f64..2.0, x in -2.0f64..2.0, seed in 0u64..1000) {
                let k = KernelFamily::brownian(1, 1.0, 1.0);
                let mu = k.measure(0.7, &[x], 500, &RngPolicy::new(seed), 0).unwrap();
                let phi = ScalarField::sin();
                let psi = ScalarField::closed(move |y| y[0].sin() + shift);
                let a = mu.integrate(&phi).unwrap().0;
                let b = mu.integrate(&psi).unwrap().0;
                prop_assert!(a <= b + 1e-12);
            }

            #[test]
            fn weighted_tightness_is_monotone_in_eps(e1 in 0.01f64..0.5, de in 0.0f64..0.4, seed in 0u64..100) {
                let k = KernelFamily::brownian(1, 1.0, 1.0);
                let mu = k.measure(1.0, &[0.0], 2000, &RngPolicy::new(seed), 0).unwrap();
                let w = Weight::Polynomial { m: 1.0 };
                let a = tightness_radius(std::slice::from_ref(&mu), &w, e1, 1e3).unwrap();
                let b = tightness_radius(&[mu], &w, (e1 + de).min(0.99), 1e3).unwrap();
                prop_assert!(b <= a);
            }
        }
    }
}
