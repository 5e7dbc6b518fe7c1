//! Euler–Maruyama simulation of `dX = b(X) dt + sigma(X) dW` on R^d, the
//! Monte Carlo transition semigroup `P_t phi(x) = E phi(X(t, x))`, and
//! sample-based checks of the coefficient conditions and moment bounds.

use std::fmt;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::statespace::{norm, RngPolicy, ScalarField};

/// Fills `out` (length d) with `b(x)`.
pub type DriftFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
/// Fills `out` (row-major d x d1) with `sigma(x)`.
pub type DiffusionFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
pub type ProfileFn = dyn Fn(f64) -> f64 + Send + Sync;

/// Constants the user declares for the coefficient conditions.
#[derive(Clone)]
pub struct DeclaredConstants {
    /// `C` in `2<x, b(x)> + |sigma(x)|^2 <= C (1 + |x|^2)`.
    pub growth: f64,
    /// `K(R)` in `2<x-y, b(x)-b(y)> + |sigma(x)-sigma(y)|^2 <= K(R) |x-y|^2` on `|x|, |y| <= R`.
    pub monotonicity: Arc<ProfileFn>,
    /// `m` in `sup (|b(x)| + |sigma(x)|) / (1 + |x|^m) < inf`.
    pub exponent: f64,
    /// Declared value of that supremum.
    pub ratio_bound: f64,
}

impl fmt::Debug for DeclaredConstants {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeclaredConstants")
            .field("growth", &self.growth)
            .field("exponent", &self.exponent)
            .field("ratio_bound", &self.ratio_bound)
            .finish_non_exhaustive()
    }
}

#[derive(Clone)]
pub struct SdeModel {
    name: String,
    dim: usize,
    noise_dim: usize,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    pub constants: DeclaredConstants,
    /// Largest polynomial degree the transition laws integrate; `None` for all.
    pub moment_degree: Option<f64>,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("constants", &self.constants)
            .finish()
    }
}

impl SdeModel {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        noise_dim: usize,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        constants: DeclaredConstants,
    ) -> Result<Self> {
        if dim == 0 || dim > crate::statespace::MAX_DIM || noise_dim == 0 {
            return invalid("dimensions must be positive and at most 3");
        }
        if !(constants.growth > 0.0) || !(constants.ratio_bound > 0.0) || !(constants.exponent >= 0.0) {
            return invalid("declared constants must be positive");
        }
        Ok(Self {
            name: name.into(),
            dim,
            noise_dim,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            constants,
            moment_degree: None,
        })
    }

    /// `dX = -a X dt + sigma dW` on R.
    pub fn ornstein_uhlenbeck(a: f64, sigma: f64) -> Self {
        let constants = DeclaredConstants {
            growth: (sigma * sigma).max(1e-12) + 2.0 * (-a).max(0.0),
            monotonicity: Arc::new(move |_| (-2.0 * a).max(0.0)),
            exponent: 1.0,
            ratio_bound: a.abs() + sigma.abs(),
        };
        Self::new(
            "ornstein_uhlenbeck",
            1,
            1,
            move |x, out| out[0] = -a * x[0],
            move |_, out| out[0] = sigma,
            constants,
        )
        .expect("valid OU model")
    }

    /// `dX = sigma dW` in R^d.
    pub fn brownian(dim: usize, sigma: f64) -> Self {
        let constants = DeclaredConstants {
            growth: (dim as f64 * sigma * sigma).max(1e-12),
            monotonicity: Arc::new(|_| 0.0),
            exponent: 0.0,
            ratio_bound: (dim as f64).sqrt() * sigma.abs() + 1e-12,
        };
        Self::new(
            "brownian",
            dim,
            dim,
            |_, out| out.fill(0.0),
            move |_, out| {
                out.fill(0.0);
                for i in 0..dim {
                    out[i * dim + i] = sigma;
                }
            },
            constants,
        )
        .expect("valid Brownian model")
    }

    /// No dynamics at all.
    pub fn frozen(dim: usize) -> Self {
        let constants = DeclaredConstants {
            growth: 1e-12,
            monotonicity: Arc::new(|_| 0.0),
            exponent: 0.0,
            ratio_bound: 1e-12,
        };
        Self::new("frozen", dim, dim, |_, out| out.fill(0.0), |_, out| out.fill(0.0), constants)
            .expect("valid frozen model")
    }

    /// `dX = (X - X^3) dt + sigma dW` on R.
    pub fn double_well(sigma: f64) -> Self {
        let constants = DeclaredConstants {
            growth: 2.0 + sigma * sigma,
            monotonicity: Arc::new(|_| 2.0),
            exponent: 3.0,
            ratio_bound: 1.0 + sigma.abs(),
        };
        Self::new(
            "double_well",
            1,
            1,
            |x, out| out[0] = x[0] - x[0].powi(3),
            move |_, out| out[0] = sigma,
            constants,
        )
        .expect("valid double-well model")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.drift)(x, &mut out);
        out
    }

    pub fn diffusion(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.noise_dim];
        (self.diffusion)(x, &mut out);
        out
    }

    /// `sigma sigma^T` at `x`, row-major `d x d`.
    pub fn covariance(&self, x: &[f64]) -> Vec<f64> {
        let s = self.diffusion(x);
        let (d, r) = (self.dim, self.noise_dim);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..r).map(|k| s[i * r + k] * s[j * r + k]).sum();
            }
        }
        a
    }

    /// A copy with the drift replaced by its negation.
    pub fn with_negated_drift(&self) -> Self {
        let b = self.drift.clone();
        let mut out = self.clone();
        out.name = format!("{}-negated-drift", self.name);
        out.drift = Arc::new(move |x, o| {
            b(x, o);
            o.iter_mut().for_each(|v| *v = -*v);
        });
        out
    }
}

/// Time grid `t_k = k dt`, `k = 0..=steps`, with `steps dt = horizon`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    /// Uses the smallest step count whose spacing does not exceed `dt`.
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !(horizon >= 0.0) {
            return invalid("need dt > 0 and a nonnegative horizon");
        }
        let steps = ((horizon / dt) * (1.0 - 1e-12)).ceil().max(0.0) as usize;
        let dt = if steps == 0 { dt } else { horizon / steps as f64 };
        Ok(Self { horizon, steps, dt })
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }
}

/// Per-particle Euler–Maruyama driver. `visit(state, k, t_k, x_k)` is
/// called at every grid time including `t_0`; returns the final states in
/// particle order and whether each path stayed finite.
#[allow(clippy::too_many_arguments)]
pub fn simulate_with<S: Send>(
    model: &SdeModel,
    x0: &[f64],
    grid: TimeGrid,
    particles: usize,
    policy: &RngPolicy,
    stream: u32,
    init: impl Fn() -> S + Sync,
    visit: impl Fn(&mut S, usize, f64, &[f64]) + Sync,
) -> Result<Vec<(S, bool)>> {
    if x0.len() != model.dim {
        return invalid("initial point has the wrong dimension");
    }
    if particles == 0 {
        return invalid("need at least one particle");
    }
    let (d, r) = (model.dim, model.noise_dim);
    let sq = grid.dt.sqrt();
    Ok((0..particles)
        .into_par_iter()
        .map(|i| {
            let mut rng = policy.rng(stream, i as u32);
            let mut state = init();
            let mut x = x0.to_vec();
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * r];
            let mut z = vec![0.0; r];
            visit(&mut state, 0, 0.0, &x);
            for k in 0..grid.steps {
                (model.drift)(&x, &mut b);
                (model.diffusion)(&x, &mut s);
                for v in z.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                for j in 0..d {
                    let noise: f64 = (0..r).map(|l| s[j * r + l] * z[l]).sum();
                    x[j] += b[j] * grid.dt + noise * sq;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return (state, false);
                }
                visit(&mut state, k + 1, grid.time(k + 1), &x);
            }
            (state, true)
        })
        .collect())
}

/// Simulated paths recorded every `stride` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub dim: usize,
    pub particles: usize,
    pub dt: f64,
    /// Recorded times; always starts at 0 and ends at the horizon.
    pub times: Vec<f64>,
    /// `particles x times.len() x dim`, row-major; NaN after an aborted step.
    pub states: Vec<f64>,
    /// `sup_k |X_k|` over every simulated step (not only recorded ones).
    pub sup_norms: Vec<f64>,
    pub aborted: Vec<bool>,
    pub policy: RngPolicy,
}

impl PathEnsemble {
    pub fn recorded(&self) -> usize {
        self.times.len()
    }

    pub fn state(&self, particle: usize, k: usize) -> &[f64] {
        let base = (particle * self.recorded() + k) * self.dim;
        &self.states[base..base + self.dim]
    }

    pub fn terminal(&self, particle: usize) -> &[f64] {
        self.state(particle, self.recorded() - 1)
    }

    pub fn aborted_count(&self) -> usize {
        self.aborted.iter().filter(|a| **a).count()
    }

    pub fn aborted_fraction(&self) -> f64 {
        self.aborted_count() as f64 / self.particles as f64
    }

    /// Mean and standard error of `f` over the finite paths.
    pub fn terminal_mean(&self, f: impl Fn(&[f64]) -> f64) -> (f64, f64) {
        mean_stderr((0..self.particles).filter(|&i| !self.aborted[i]).map(|i| f(self.terminal(i))))
    }
}

/// Sample mean and standard error, summed in the given order.
pub fn mean_stderr(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn simulate_paths(
    model: &SdeModel,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    particles: usize,
    policy: &RngPolicy,
) -> Result<PathEnsemble> {
    simulate_paths_strided(model, x0, horizon, dt, particles, policy, 1)
}

pub fn simulate_paths_strided(
    model: &SdeModel,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    particles: usize,
    policy: &RngPolicy,
    stride: usize,
) -> Result<PathEnsemble> {
    let grid = TimeGrid::new(horizon, dt)?;
    let stride = stride.max(1);
    let mut rec: Vec<usize> = (0..=grid.steps).step_by(stride).collect();
    if *rec.last().unwrap() != grid.steps {
        rec.push(grid.steps);
    }
    let d = model.dim;
    let slots = rec.len();
    let out = simulate_with(
        model,
        x0,
        grid,
        particles,
        policy,
        0,
        || (vec![f64::NAN; slots * d], 0usize, 0.0f64),
        |st, k, _, x| {
            st.2 = st.2.max(norm(x));
            if k % stride == 0 || k == grid.steps {
                st.0[st.1 * d..(st.1 + 1) * d].copy_from_slice(x);
                st.1 += 1;
            }
        },
    )?;
    let mut states = Vec::with_capacity(particles * slots * d);
    let mut sup_norms = Vec::with_capacity(particles);
    let mut aborted = Vec::with_capacity(particles);
    for ((buf, _, sup), ok) in out {
        states.extend_from_slice(&buf);
        sup_norms.push(if ok { sup } else { f64::NAN });
        aborted.push(!ok);
    }
    Ok(PathEnsemble {
        dim: d,
        particles,
        dt: grid.dt,
        times: rec.iter().map(|&k| grid.time(k)).collect(),
        states,
        sup_norms,
        aborted,
        policy: *policy,
    })
}

/// Largest excluded fraction of exploded paths for a valid experiment.
pub const MAX_ABORTED_FRACTION: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub aborted: usize,
}

fn check_envelope(model: &SdeModel, phi: &ScalarField) -> Result<()> {
    if let (Some(p), Some(env)) = (model.moment_degree, phi.envelope()) {
        if env.degree > p {
            return Err(Error::EnvelopeViolation(format!(
                "field grows like |x|^{} beyond the declared moment degree {p}",
                env.degree
            )));
        }
    }
    Ok(())
}

/// `P_t phi(x)` by Monte Carlo over Euler–Maruyama terminal states.
pub fn mc_semigroup(
    model: &SdeModel,
    phi: &ScalarField,
    t: f64,
    x: &[f64],
    particles: usize,
    dt: f64,
    policy: &RngPolicy,
) -> Result<McEstimate> {
    mc_semigroup_stream(model, phi, t, x, particles, dt, policy, 0)
}

#[allow(clippy::too_many_arguments)]
pub fn mc_semigroup_stream(
    model: &SdeModel,
    phi: &ScalarField,
    t: f64,
    x: &[f64],
    particles: usize,
    dt: f64,
    policy: &RngPolicy,
    stream: u32,
) -> Result<McEstimate> {
    check_envelope(model, phi)?;
    let grid = TimeGrid::new(t, dt)?;
    let steps = grid.steps;
    let out = simulate_with(model, x, grid, particles, policy, stream, Vec::new, |st, k, _, y| {
        if k == steps {
            *st = y.to_vec();
        }
    })?;
    let aborted = out.iter().filter(|o| !o.1).count();
    let vals = out
        .iter()
        .filter(|o| o.1)
        .map(|o| phi.eval(&o.0))
        .collect::<Result<Vec<_>>>()?;
    let (mean, stderr) = mean_stderr(vals.into_iter());
    Ok(McEstimate { mean, stderr, aborted })
}

/// Worst sample of one inequality.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    /// `lhs - rhs` at the worst sample; positive means violated.
    pub excess: f64,
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RadiusCheck {
    pub radius: f64,
    pub samples: usize,
    pub monotonicity: Violation,
    pub growth: Violation,
    pub ratio: Violation,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientReport {
    pub radii: Vec<RadiusCheck>,
    pub pass: bool,
}

fn worse(v: &mut Option<Violation>, excess: f64, x: &[f64], y: Option<&[f64]>) {
    if v.as_ref().is_none_or(|w| excess > w.excess) {
        *v = Some(Violation { excess, x: x.to_vec(), y: y.map(<[f64]>::to_vec) });
    }
}

/// Van der Corput radical inverse in base `b`.
fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= b as f64;
        r += f * (i % b) as f64;
        i /= b;
    }
    r
}

const PRIMES: [u64; 6] = [2, 3, 5, 7, 11, 13];

/// Halton point pairs `(x, y)` in the box `[-R, R]^d`.
pub fn halton_pairs(dim: usize, radius: f64, count: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    (1..=count as u64)
        .map(|i| {
            let coord = |j: usize| radius * (2.0 * radical_inverse(i, PRIMES[j]) - 1.0);
            ((0..dim).map(coord).collect(), (dim..2 * dim).map(coord).collect())
        })
        .collect()
}

/// Falsification check of the monotonicity, growth and growth-ratio
/// conditions on the sample pairs inside each radius.
pub fn check_coefficients(model: &SdeModel, pairs: &[(Vec<f64>, Vec<f64>)], radii: &[f64]) -> Result<CoefficientReport> {
    let c = &model.constants;
    let mut out = Vec::with_capacity(radii.len());
    for &radius in radii {
        let k_r = (c.monotonicity)(radius);
        let (mut mono, mut grow, mut ratio) = (None, None, None);
        let mut count = 0;
        for (x, y) in pairs {
            if x.len() != model.dim || y.len() != model.dim {
                return invalid("sample pair has the wrong dimension");
            }
            if norm(x) > radius || norm(y) > radius {
                continue;
            }
            count += 1;
            let (bx, by) = (model.drift(x), model.drift(y));
            let (sx, sy) = (model.diffusion(x), model.diffusion(y));
            let diff2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
            let inner: f64 = (0..model.dim).map(|j| (x[j] - y[j]) * (bx[j] - by[j])).sum();
            let sdiff: f64 = sx.iter().zip(&sy).map(|(a, b)| (a - b).powi(2)).sum();
            let lhs = 2.0 * inner + sdiff;
            worse(&mut mono, lhs - k_r * diff2, x, Some(y));
            for p in [x, y] {
                let b = model.drift(p);
                let s = model.diffusion(p);
                let xb: f64 = p.iter().zip(&b).map(|(u, v)| u * v).sum();
                let s2: f64 = s.iter().map(|v| v * v).sum();
                let n2: f64 = p.iter().map(|v| v * v).sum();
                worse(&mut grow, 2.0 * xb + s2 - c.growth * (1.0 + n2), p, None);
                let r = (norm(&b) + s2.sqrt()) / (1.0 + norm(p).powf(c.exponent));
                worse(&mut ratio, r - c.ratio_bound, p, None);
            }
        }
        let (Some(monotonicity), Some(growth), Some(ratio)) = (mono, grow, ratio) else {
            return invalid(format!("no sample pair lies within radius {radius}"));
        };
        // Round-off of order 1e-12 relative is not a violation.
        let slack = 1e-9;
        let pass = monotonicity.excess <= slack && growth.excess <= slack && ratio.excess <= slack;
        out.push(RadiusCheck { radius, samples: count, monotonicity, growth, ratio, pass });
    }
    Ok(CoefficientReport { pass: out.iter().all(|r| r.pass), radii: out })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentReport {
    pub p: f64,
    /// Empirical `E sup_t |X_t|^p`.
    pub value: f64,
    pub stderr: f64,
    /// `C_{T,p} (1 + |x0|^p)`.
    pub bound: f64,
    pub pass: bool,
}

/// `E sup_t |X_t|^p <= C (1 + |x0|^p)` on the ensemble, with the Monte Carlo
/// error attached; passes when the estimate minus three standard errors is
/// below the bound.
pub fn moment_check(ensemble: &PathEnsemble, x0: &[f64], p: f64, c_tp: f64) -> Result<MomentReport> {
    if !(p >= 2.0) {
        return invalid("moment exponent must be at least 2");
    }
    if ensemble.aborted_fraction() > MAX_ABORTED_FRACTION {
        return Err(Error::Numerical(format!(
            "{} of {} paths exploded",
            ensemble.aborted_count(),
            ensemble.particles
        )));
    }
    let (value, stderr) = mean_stderr(
        ensemble
            .sup_norms
            .iter()
            .zip(&ensemble.aborted)
            .filter(|(_, a)| !**a)
            .map(|(s, _)| s.powf(p)),
    );
    let bound = c_tp * (1.0 + norm(x0).powf(p));
    Ok(MomentReport { p, value, stderr, bound, pass: value - 3.0 * stderr <= bound })
}

/// Empirical surrogate for `C_{T,p}`: `E sup |X|^p / (1 + |x0|^p)` plus three
/// standard errors, from an independent run at half the step.
pub fn pilot_moment_constant(
    model: &SdeModel,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    particles: usize,
    p: f64,
    policy: &RngPolicy,
) -> Result<f64> {
    let pilot_policy = RngPolicy::new(policy.derive_seed(u32::MAX, 0));
    let ens = simulate_paths_strided(model, x0, horizon, dt / 2.0, particles, &pilot_policy, usize::MAX)?;
    let rep = moment_check(&ens, x0, p, 1.0)?;
    Ok((rep.value + 3.0 * rep.stderr) / (1.0 + norm(x0).powf(p)))
}
