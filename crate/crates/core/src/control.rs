//! Convex control semigroup `P_t phi(x) = sup_alpha E[phi(X^alpha_t) - ∫ g(alpha)]`
//! for `dX = b(X, alpha) dt + sigma dW` with a finite control set, computed
//! by grid dynamic programming, plus the checks that go with it.
//!
//! The grid scheme computes the value over Markov feedback policies; for
//! this problem class that coincides with the value over progressively
//! measurable controls, and the Hopf–Cole formula serves as an independent
//! referee for the quadratic-cost instance.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::quad::GaussLegendre;
use crate::statespace::{Grid, RngPolicy, ScalarField};

pub type ControlDrift = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
pub struct ControlProblem {
    name: String,
    dim: usize,
    drift: Arc<ControlDrift>,
    controls: Vec<Vec<f64>>,
    costs: Vec<f64>,
    pub sigma: f64,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("controls", &self.controls.len())
            .field("sigma", &self.sigma)
            .finish()
    }
}

impl ControlProblem {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        drift: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        controls: Vec<Vec<f64>>,
        cost: impl Fn(&[f64]) -> f64,
        sigma: f64,
    ) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return invalid("control problems are supported in one or two dimensions");
        }
        if !(sigma > 0.0) {
            return invalid("noise must be positive");
        }
        let zero = controls.iter().position(|a| a.iter().all(|v| *v == 0.0));
        let Some(zero) = zero else {
            return invalid("control set must contain 0");
        };
        let costs: Vec<f64> = controls.iter().map(|a| cost(a)).collect();
        if costs[zero] != 0.0 {
            return invalid("running cost must vanish at the zero control");
        }
        if costs.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return invalid("running cost must be finite and nonnegative");
        }
        Ok(Self { name: name.into(), dim, drift: Arc::new(drift), controls, costs, sigma })
    }

    /// `b(x, a) = a`, `g(a) = a^2 / 2`, `A` = `count` equispaced points of `[-k, k]`.
    pub fn hopf_cole(sigma: f64, k: f64, count: usize) -> Result<Self> {
        if count < 3 || count.is_multiple_of(2) {
            return invalid("use an odd number of controls so that 0 is included");
        }
        let controls: Vec<Vec<f64>> = (0..count)
            .map(|i| {
                let v = -k + 2.0 * k * i as f64 / (count - 1) as f64;
                vec![if i == count / 2 { 0.0 } else { v }]
            })
            .collect();
        Self::new("hopf_cole", 1, |_, a, out| out[0] = a[0], controls, |a| 0.5 * a[0] * a[0], sigma)
    }

    /// `A = {0}`: the heat semigroup with variance `sigma^2 t`.
    pub fn heat(dim: usize, sigma: f64) -> Result<Self> {
        Self::new("heat", dim, |_, _, out| out.fill(0.0), vec![vec![0.0; dim]], |_| 0.0, sigma)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn controls(&self) -> &[Vec<f64>] {
        &self.controls
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn drift(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.drift)(x, a, &mut out);
        out
    }

    /// `g*(y) = max_a (<a, y> - g(a))` over the finite control set.
    pub fn conjugate(&self, y: &[f64]) -> f64 {
        self.controls
            .iter()
            .zip(&self.costs)
            .map(|(a, g)| a.iter().zip(y).map(|(u, v)| u * v).sum::<f64>() - g)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_a (<b(x,a), p> - g(a))`.
    pub fn hamiltonian(&self, x: &[f64], p: &[f64]) -> f64 {
        let mut b = vec![0.0; self.dim];
        let mut best = f64::NEG_INFINITY;
        for (a, g) in self.controls.iter().zip(&self.costs) {
            (self.drift)(x, a, &mut b);
            best = best.max(b.iter().zip(p).map(|(u, v)| u * v).sum::<f64>() - g);
        }
        best
    }

    /// `max_{a, |x| in grid} |b(x, a)|` over the nodes of `grid`.
    fn drift_bound(&self, grid: &Grid) -> f64 {
        let mut b = vec![0.0; self.dim];
        let mut m: f64 = 0.0;
        for x in grid.nodes() {
            for a in &self.controls {
                (self.drift)(&x, a, &mut b);
                m = m.max(crate::statespace::norm(&b));
            }
        }
        m
    }
}

/// Gradient and Hessian of `phi` at `x`: analytic when declared, otherwise a
/// central stencil of step `h`.
fn derivatives(phi: &ScalarField, x: &[f64], h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(d) = phi.derivatives(x) {
        return Ok(d);
    }
    let d = x.len();
    let f0 = phi.eval(x)?;
    let mut g = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    for i in 0..d {
        let mut y = x.to_vec();
        y[i] = x[i] + h;
        let fp = phi.eval(&y)?;
        y[i] = x[i] - h;
        let fm = phi.eval(&y)?;
        g[i] = (fp - fm) / (2.0 * h);
        hess[i * d + i] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in 0..i {
            let corner = |si: f64, sj: f64| {
                let mut z = x.to_vec();
                z[i] += si * h;
                z[j] += sj * h;
                phi.eval(&z)
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?) / (4.0 * h * h);
            hess[i * d + j] = v;
            hess[j * d + i] = v;
        }
    }
    Ok((g, hess))
}

/// `(L phi)(x) = sigma^2/2 Δphi + max_a (<b(x,a), grad phi> - g(a))`.
pub fn hjb_generator(prob: &ControlProblem, phi: &ScalarField, x: &[f64]) -> Result<f64> {
    if x.len() != prob.dim {
        return invalid("point has the wrong dimension");
    }
    let (g, h) = derivatives(phi, x, 1e-3)?;
    let lap: f64 = (0..prob.dim).map(|i| h[i * prob.dim + i]).sum();
    Ok(0.5 * prob.sigma * prob.sigma * lap + prob.hamiltonian(x, &g))
}

/// Largest `sigma^2 dt / h^2` the explicit scheme accepts.
pub const CFL_LIMIT: f64 = 0.5;

/// Default step: puts the three Gauss–Hermite nodes `±sqrt(3 dt) sigma` on
/// neighbouring grid nodes (CFL ratio 1/3).
pub fn default_dt(sigma: f64, h: f64) -> f64 {
    h * h / (3.0 * sigma * sigma)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchemeInfo {
    pub dt: f64,
    pub h: f64,
    pub steps: usize,
    pub cfl: f64,
    /// `max |b(x, a)|` over grid and controls.
    pub drift_bound: f64,
    /// All stencil weights nonnegative and summing to one, `g >= 0`, `g(0) = 0`.
    pub monotone: bool,
    /// A constant input came back bit-identical after one step.
    pub constant_preserving: bool,
}

/// Value function `u(t_k) = P_{t_k} phi` on a common grid.
#[derive(Clone, Debug)]
pub struct ValueField {
    pub grid: Grid,
    pub times: Vec<f64>,
    layers: Vec<Arc<Vec<f64>>>,
    pub scheme: SchemeInfo,
}

impl ValueField {
    pub fn new(grid: Grid, times: Vec<f64>, layers: Vec<Vec<f64>>, scheme: SchemeInfo) -> Result<Self> {
        if times.len() != layers.len() || times.is_empty() || times[0] != 0.0 {
            return invalid("value field needs one layer per time, starting at 0");
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || layers.iter().any(|l| l.len() != grid.len()) {
            return invalid("times must increase and layers must match the grid");
        }
        Ok(Self { grid, times, layers: layers.into_iter().map(Arc::new).collect(), scheme })
    }

    /// `u(t) = phi` for all recorded `t` (not a solution; a counterexample).
    pub fn frozen(phi: &ScalarField, grid: &Grid, times: Vec<f64>) -> Result<Self> {
        let layer: Vec<f64> = grid.nodes().map(|x| phi.eval(&x)).collect::<Result<_>>()?;
        let dt = if times.len() > 1 { times[1] - times[0] } else { 0.0 };
        let scheme = SchemeInfo {
            dt,
            h: (0..grid.dim()).map(|j| grid.step(j)).fold(f64::INFINITY, f64::min),
            steps: times.len().saturating_sub(1),
            cfl: 0.0,
            drift_bound: 0.0,
            monotone: true,
            constant_preserving: true,
        };
        let layers = vec![layer; times.len()];
        Self::new(grid.clone(), times, layers, scheme)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn layer(&self, k: usize) -> &[f64] {
        &self.layers[k]
    }

    pub fn field(&self, k: usize) -> ScalarField {
        ScalarField::sampled(self.grid.clone(), self.layers[k].to_vec()).expect("layer matches grid")
    }

    pub fn last(&self) -> ScalarField {
        self.field(self.len() - 1)
    }

    /// Index of the recorded time closest to `t`.
    pub fn nearest_time(&self, t: f64) -> usize {
        (0..self.len())
            .min_by(|&a, &b| (self.times[a] - t).abs().total_cmp(&(self.times[b] - t).abs()))
            .expect("nonempty")
    }

    /// `u(t_k, x)` by multilinear interpolation on the grid.
    pub fn eval(&self, k: usize, x: &[f64]) -> Result<f64> {
        self.field(k).eval(x)
    }

    /// Consistency budget of the scheme against the HJB equation: the
    /// numerical diffusion `|b| h / 2` of linear interpolation acting on the
    /// second derivative, plus a floor for the difference quotients.
    pub fn consistency_budget(&self) -> f64 {
        let h = self.scheme.h;
        let last = self.layer(self.len() - 1);
        let n = self.grid.counts()[0];
        let stride = self.grid.len() / n;
        let mut d2: f64 = 0.0;
        if self.grid.dim() == 1 {
            for i in 1..n - 1 {
                d2 = d2.max(((last[(i + 1) * stride] - 2.0 * last[i * stride] + last[(i - 1) * stride]) / (h * h)).abs());
            }
        }
        0.5 * self.scheme.drift_bound * h * (1.0 + d2) + 1e-3
    }
}

/// Per-(control, node) multilinear stencil of the one-step expectation.
struct Stencil {
    /// For each control: flat list of (node, weight) per grid node.
    offsets: Vec<Vec<usize>>,
    entries: Vec<Vec<(u32, f64)>>,
}

const GH3: [(f64, f64); 3] = [(-1.732_050_807_568_877_2, 1.0 / 6.0), (0.0, 2.0 / 3.0), (1.732_050_807_568_877_2, 1.0 / 6.0)];

fn multilinear(grid: &Grid, y: &[f64], out: &mut Vec<(u32, f64)>, scale: f64) {
    let d = grid.dim();
    let mut base = [0usize; 2];
    let mut frac = [0.0f64; 2];
    for j in 0..d {
        let n = grid.counts()[j];
        let f = ((y[j] - grid.lower()[j]) / grid.step(j)).clamp(0.0, (n - 1) as f64);
        let i0 = (f.floor() as usize).min(n.saturating_sub(2));
        base[j] = i0;
        frac[j] = f - i0 as f64;
    }
    for corner in 0..(1usize << d) {
        let mut w = scale;
        let mut idx = [0usize; 2];
        for j in 0..d {
            let up = corner >> j & 1 == 1;
            w *= if up { frac[j] } else { 1.0 - frac[j] };
            idx[j] = base[j] + up as usize;
        }
        if w > 0.0 {
            out.push((grid.flat_index(&idx[..d]) as u32, w));
        }
    }
}

fn build_stencil(prob: &ControlProblem, grid: &Grid, dt: f64) -> Stencil {
    let d = prob.dim;
    let sq = prob.sigma * dt.sqrt();
    let nodes: Vec<Vec<f64>> = grid.nodes().collect();
    let mut offsets = Vec::with_capacity(prob.controls.len());
    let mut entries = Vec::with_capacity(prob.controls.len());
    let gh: Vec<(Vec<f64>, f64)> = if d == 1 {
        GH3.iter().map(|(z, w)| (vec![*z], *w)).collect()
    } else {
        GH3.iter().flat_map(|(z1, w1)| GH3.iter().map(move |(z2, w2)| (vec![*z1, *z2], w1 * w2))).collect()
    };
    for a in &prob.controls {
        let mut off = Vec::with_capacity(nodes.len() + 1);
        let mut ent = Vec::new();
        let mut b = vec![0.0; d];
        let mut y = vec![0.0; d];
        for x in &nodes {
            off.push(ent.len());
            (prob.drift)(x, a, &mut b);
            for (z, w) in &gh {
                for j in 0..d {
                    y[j] = x[j] + b[j] * dt + sq * z[j];
                }
                multilinear(grid, &y, &mut ent, *w);
            }
        }
        off.push(ent.len());
        offsets.push(off);
        entries.push(ent);
    }
    Stencil { offsets, entries }
}

impl Stencil {
    /// One DP step; written as `u_i + ∑ w (u_j - u_i)` so constants are
    /// reproduced bit for bit.
    fn step(&self, costs: &[f64], dt: f64, u: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let ui = u[i];
            let mut best = f64::NEG_INFINITY;
            for (c, g) in costs.iter().enumerate() {
                let (s, e) = (self.offsets[c][i], self.offsets[c][i + 1]);
                let mut acc = 0.0;
                for &(j, w) in &self.entries[c][s..e] {
                    acc += w * (u[j as usize] - ui);
                }
                best = best.max(ui + acc - g * dt);
            }
            *o = best;
        });
    }

    fn monotone(&self) -> bool {
        self.entries.iter().zip(&self.offsets).all(|(ent, off)| {
            ent.iter().all(|(_, w)| *w >= 0.0)
                && off.windows(2).all(|r| (ent[r[0]..r[1]].iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-12)
        })
    }
}

/// `u_{k+1}(x) = max_a [E u_k(x + b(x,a) dt + sigma sqrt(dt) Z) - g(a) dt]`
/// with three-point Gauss–Hermite per axis and multilinear interpolation;
/// queries beyond the grid use the edge values. `dt = None` takes
/// [`default_dt`]. `records` evenly spaced layers are kept besides `t = 0`.
pub fn dp_semigroup(
    prob: &ControlProblem,
    phi: &ScalarField,
    t: f64,
    grid: &Grid,
    dt: Option<f64>,
    records: usize,
) -> Result<ValueField> {
    if grid.dim() != prob.dim {
        return invalid("grid dimension differs from the problem");
    }
    if !(t >= 0.0) {
        return invalid("time must be nonnegative");
    }
    let h = (0..grid.dim()).map(|j| grid.step(j)).fold(f64::INFINITY, f64::min);
    let dt_max = dt.unwrap_or_else(|| default_dt(prob.sigma, h));
    let cfl = prob.sigma * prob.sigma * dt_max / (h * h);
    if !(cfl <= CFL_LIMIT) {
        return Err(Error::Cfl { ratio: cfl, limit: CFL_LIMIT });
    }
    // Whole steps of exactly `dt_max` keep the Gauss–Hermite nodes on grid
    // nodes; any remainder is taken as one short final step.
    let whole = ((t / dt_max) * (1.0 + 1e-12)).floor() as usize;
    let rest = t - whole as f64 * dt_max;
    let rest = if rest > 1e-9 * dt_max { rest } else { 0.0 };
    let steps = whole + usize::from(rest > 0.0);
    let dt = dt_max;
    let stencil = build_stencil(prob, grid, dt);
    let short = (rest > 0.0).then(|| build_stencil(prob, grid, rest));

    let probe = vec![1.0; grid.len()];
    let mut probe_out = vec![0.0; grid.len()];
    let mut constant_preserving = true;
    let mut monotone = stencil.monotone();
    for (st, step) in std::iter::once((&stencil, dt)).chain(short.as_ref().map(|s| (s, rest))) {
        st.step(&prob.costs, step, &probe, &mut probe_out);
        constant_preserving &= probe_out.iter().all(|v| *v == 1.0);
        monotone &= st.monotone();
    }
    let scheme = SchemeInfo {
        dt,
        h,
        steps,
        cfl,
        drift_bound: prob.drift_bound(grid),
        monotone,
        constant_preserving,
    };
    if !scheme.monotone || !scheme.constant_preserving {
        return Err(Error::Numerical("DP stencil lost monotonicity or constant preservation".into()));
    }

    let mut u: Vec<f64> = grid.nodes().map(|x| phi.eval(&x)).collect::<Result<_>>()?;
    let records = records.clamp(1, steps.max(1));
    let marks: Vec<usize> = (1..=records).map(|r| (r * steps + records / 2) / records).collect();
    let mut times = vec![0.0];
    let mut layers = vec![u.clone()];
    let mut next = vec![0.0; u.len()];
    let mut mark = 0;
    for k in 1..=steps {
        match (&short, k > whole) {
            (Some(st), true) => st.step(&prob.costs, rest, &u, &mut next),
            _ => stencil.step(&prob.costs, dt, &u, &mut next),
        }
        std::mem::swap(&mut u, &mut next);
        if mark < marks.len() && marks[mark] == k {
            while mark < marks.len() && marks[mark] == k {
                mark += 1;
            }
            times.push(if k > whole { t } else { k as f64 * dt });
            layers.push(u.clone());
        }
    }
    ValueField::new(grid.clone(), times, layers, scheme)
}

/// `sigma^2 log E[exp(phi(x + sigma sqrt(t) Z) / sigma^2)]`, the value
/// function of the quadratic-cost instance with unbounded controls.
pub fn hopf_cole_oracle(sigma: f64, phi: &ScalarField, t: f64, x: f64) -> Result<f64> {
    if !(t >= 0.0) || !(sigma > 0.0) {
        return invalid("need t >= 0 and sigma > 0");
    }
    if t == 0.0 {
        return phi.eval(&[x]);
    }
    let bound = match phi.envelope() {
        Some(env) if env.degree == 0.0 => env.constant,
        _ => return Err(Error::Quadrature("Hopf–Cole oracle needs a bounded field (envelope of degree 0)".into())),
    };
    let s2 = sigma * sigma;
    // Mass beyond |z| = 12 times the largest possible weight ratio.
    let tail = 2.0 * (-72.0f64).exp() * (2.0 * bound / s2).exp();
    if tail > 1e-12 {
        return Err(Error::Quadrature(format!("Gaussian tail bound {tail:e} is not certified")));
    }
    let sd = sigma * t.sqrt();
    let err = std::cell::RefCell::new(None);
    let integrand = |z: f64| {
        let v = phi.eval(&[x + sd * z]).unwrap_or_else(|e| {
            err.borrow_mut().get_or_insert(e);
            f64::NAN
        });
        ((v - bound) / s2).exp() * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
    };
    let gl = GaussLegendre::new(20);
    let coarse = gl.composite(-12.0, 12.0, 48, integrand);
    let fine = gl.composite(-12.0, 12.0, 96, integrand);
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    let (vc, vf) = (bound + s2 * coarse.ln(), bound + s2 * fine.ln());
    if (vc - vf).abs() > 1e-8 {
        return Err(Error::Quadrature(format!("resolutions disagree by {:e}", (vc - vf).abs())));
    }
    Ok(vf)
}

fn check_margin(grid: &Grid, probes: &[Vec<f64>], margin: f64) -> Result<()> {
    for p in probes {
        for j in 0..grid.dim() {
            if p[j] - grid.lower()[j] < margin || grid.upper()[j] - p[j] < margin {
                return invalid(format!("probe {p:?} is closer than {margin} to the grid boundary"));
            }
        }
    }
    Ok(())
}

/// Probes must keep at least `4 sigma sqrt(t)` from the grid edge.
pub fn probe_margin(prob: &ControlProblem, t: f64) -> f64 {
    4.0 * prob.sigma * t.sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub lambda: f64,
    /// `min (lambda P phi + (1-lambda) P psi - P(lambda phi + (1-lambda) psi))`.
    pub convexity_residual: f64,
    /// `min (P max(phi,psi) - P min(phi,psi))`.
    pub monotonicity_residual: f64,
    /// `max |P_t m - m|` for the constant `m = 3`.
    pub constant_error: f64,
    pub probes: usize,
    pub pass: bool,
}

/// Convexity, monotonicity and constant preservation of `P_t` at the probes.
#[allow(clippy::too_many_arguments)]
pub fn convexity_monotonicity_check(
    prob: &ControlProblem,
    phi: &ScalarField,
    psi: &ScalarField,
    lambda: f64,
    t: f64,
    grid: &Grid,
    probes: &[Vec<f64>],
    tol: f64,
) -> Result<ConvexityReport> {
    if !(0.0..=1.0).contains(&lambda) {
        return invalid("lambda must lie in [0, 1]");
    }
    check_margin(grid, probes, probe_margin(prob, t))?;
    let tab = |f: &dyn Fn(&[f64]) -> Result<f64>| -> Result<ScalarField> {
        let v: Vec<f64> = grid.nodes().map(|x| f(&x)).collect::<Result<_>>()?;
        ScalarField::sampled(grid.clone(), v)
    };
    let mix = tab(&|x| Ok(lambda * phi.eval(x)? + (1.0 - lambda) * psi.eval(x)?))?;
    let lo = tab(&|x| Ok(phi.eval(x)?.min(psi.eval(x)?)))?;
    let hi = tab(&|x| Ok(phi.eval(x)?.max(psi.eval(x)?)))?;
    let run = |f: &ScalarField| dp_semigroup(prob, f, t, grid, None, 1).map(|v| v.last());
    let (pp, ps, pm, pl, ph) = (run(phi)?, run(psi)?, run(&mix)?, run(&lo)?, run(&hi)?);
    let pc = run(&ScalarField::constant(3.0))?;
    let mut convexity = f64::INFINITY;
    let mut monotone = f64::INFINITY;
    let mut constant: f64 = 0.0;
    for x in probes {
        convexity = convexity.min(lambda * pp.eval(x)? + (1.0 - lambda) * ps.eval(x)? - pm.eval(x)?);
        monotone = monotone.min(ph.eval(x)? - pl.eval(x)?);
        constant = constant.max((pc.eval(x)? - 3.0).abs());
    }
    Ok(ConvexityReport {
        lambda,
        convexity_residual: convexity,
        monotonicity_residual: monotone,
        constant_error: constant,
        probes: probes.len(),
        pass: convexity >= -tol && monotone >= -tol && constant == 0.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DpReport {
    pub s: f64,
    pub t: f64,
    /// `max |P_{s+t} phi - P_s (P_t phi)|` over the probes.
    pub gap: f64,
    pub budget: f64,
    pub pass: bool,
}

/// Semigroup property of the scheme: `P_{s+t}` against `P_s` applied to the
/// tabulated `P_t phi`.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_programming_check(
    prob: &ControlProblem,
    phi: &ScalarField,
    s: f64,
    t: f64,
    grid: &Grid,
    probes: &[Vec<f64>],
    budget: f64,
) -> Result<DpReport> {
    check_margin(grid, probes, probe_margin(prob, s + t))?;
    let inner = dp_semigroup(prob, phi, t, grid, None, 1)?.last();
    let nested = dp_semigroup(prob, &inner, s, grid, None, 1)?.last();
    let direct = dp_semigroup(prob, phi, s + t, grid, None, 1)?.last();
    let mut gap: f64 = 0.0;
    for x in probes {
        gap = gap.max((direct.eval(x)? - nested.eval(x)?).abs());
    }
    Ok(DpReport { s, t, gap, budget, pass: gap <= budget })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `psi >= u` near the point; tests the subsolution inequality.
    Sub,
    /// `psi <= u`; tests the supersolution inequality.
    Super,
}

/// Quadratic test functions touching `u` at a grid point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuadraticFamily {
    /// Range of the curvature gap `|c_x - u_xx|`.
    pub curvature: (f64, f64),
    /// Half-width of the touching window in grid nodes and recorded layers.
    pub window_nodes: usize,
    pub window_layers: usize,
    pub count: usize,
    pub policy: RngPolicy,
    pub stream: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViscosityEntry {
    pub side: Side,
    pub t: f64,
    pub x: f64,
    pub slope_t: f64,
    pub slope_x: f64,
    pub curvature_t: f64,
    pub curvature_x: f64,
    /// `(L psi)(t, x)`.
    pub generator: f64,
    /// Amount by which the inequality fails (0 if it holds).
    pub violation: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViscosityReport {
    pub tol: f64,
    pub entries: Vec<ViscosityEntry>,
    pub violations: usize,
    pub max_violation: f64,
    pub skipped: usize,
}

/// Touches `u` at the recorded time nearest `t` and the grid node nearest
/// `x` with quadratics `psi = u + p_t ds + p_x dy + c_t ds^2/2 + c_x dy^2/2`
/// (slopes and curvatures from difference quotients of `u`), certifies the
/// touching on a window, and checks `p_t <= L psi + tol` (from above) or
/// `p_t >= L psi - tol` (from below). One-dimensional fields only.
pub fn viscosity_test(
    u: &ValueField,
    prob: &ControlProblem,
    t: f64,
    x: f64,
    family: &QuadraticFamily,
    tol: f64,
) -> Result<ViscosityReport> {
    if u.grid.dim() != 1 || prob.dim != 1 {
        return invalid("viscosity harness is one-dimensional");
    }
    let h = u.grid.step(0);
    let n = u.grid.counts()[0];
    let i = (((x - u.grid.lower()[0]) / h).round().max(0.0) as usize).min(n - 1);
    let k = u.nearest_time(t);
    let (wn, wl) = (family.window_nodes.max(1), family.window_layers.max(1));
    let mut entries = Vec::with_capacity(family.count);
    let skip_all = if i < wn || i + wn >= n {
        Some("touching window leaves the grid".to_string())
    } else if k < wl || k + wl >= u.len() {
        Some("touching window leaves the recorded times".to_string())
    } else {
        None
    };
    let (tk, xi) = (u.times[k], u.grid.coord(0, i));
    let mut rng = family.policy.rng(family.stream, 0);
    for _ in 0..family.count {
        let side = if rng.random::<bool>() { Side::Sub } else { Side::Super };
        let gap = family.curvature.0 + (family.curvature.1 - family.curvature.0) * rng.random::<f64>();
        if let Some(reason) = &skip_all {
            entries.push(ViscosityEntry {
                side,
                t: tk,
                x: xi,
                slope_t: f64::NAN,
                slope_x: f64::NAN,
                curvature_t: f64::NAN,
                curvature_x: f64::NAN,
                generator: f64::NAN,
                violation: None,
                skipped: Some(reason.clone()),
            });
            continue;
        }
        let l = |kk: usize| u.layer(kk);
        let (tm, tp) = (u.times[k] - u.times[k - 1], u.times[k + 1] - u.times[k]);
        let ut = (l(k + 1)[i] - l(k - 1)[i]) / (tm + tp);
        let utt = 2.0 * (tm * l(k + 1)[i] - (tm + tp) * l(k)[i] + tp * l(k - 1)[i]) / (tm * tp * (tm + tp));
        let ux = (l(k)[i + 1] - l(k)[i - 1]) / (2.0 * h);
        let uxx = (l(k)[i + 1] - 2.0 * l(k)[i] + l(k)[i - 1]) / (h * h);
        let utx = ((l(k + 1)[i + 1] - l(k + 1)[i - 1]) - (l(k - 1)[i + 1] - l(k - 1)[i - 1])) / (2.0 * h * (tm + tp));
        let sign = if side == Side::Sub { 1.0 } else { -1.0 };
        let cx = uxx + sign * gap;
        // Makes the 2x2 form of psi - u definite despite the mixed term.
        let ct = utt + sign * (2.0 * utx * utx / gap + gap);
        let psi = |s: f64, y: f64| {
            let (ds, dy) = (s - tk, y - xi);
            l(k)[i] + ut * ds + ux * dy + 0.5 * ct * ds * ds + 0.5 * cx * dy * dy
        };
        let eps = 1e-12 * (1.0 + l(k)[i].abs());
        let mut touching = true;
        for kk in k - wl..=k + wl {
            for ii in i - wn..=i + wn {
                let diff = psi(u.times[kk], u.grid.coord(0, ii)) - l(kk)[ii];
                if sign * diff < -eps {
                    touching = false;
                }
            }
        }
        let generator = 0.5 * prob.sigma * prob.sigma * cx + prob.hamiltonian(&[xi], &[ux]);
        let (violation, skipped) = if touching {
            let v = match side {
                Side::Sub => (ut - generator).max(0.0),
                Side::Super => (generator - ut).max(0.0),
            };
            (Some(v), None)
        } else {
            (None, Some(format!("test function crosses u inside the window ({side:?})")))
        };
        entries.push(ViscosityEntry {
            side,
            t: tk,
            x: xi,
            slope_t: ut,
            slope_x: ux,
            curvature_t: ct,
            curvature_x: cx,
            generator,
            violation,
            skipped,
        });
    }
    let violations = entries.iter().filter(|e| e.violation.is_some_and(|v| v > tol)).count();
    let max_violation = entries.iter().filter_map(|e| e.violation).fold(0.0, f64::max);
    let skipped = entries.iter().filter(|e| e.skipped.is_some()).count();
    Ok(ViscosityReport { tol, entries, violations, max_violation, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hc() -> ControlProblem {
        ControlProblem::hopf_cole(1.0, 4.0, 41).unwrap()
    }

    #[test]
    fn problem_validation() {
        let no_zero = ControlProblem::new("x", 1, |_, a, o| o[0] = a[0], vec![vec![1.0]], |_| 0.0, 1.0);
        assert!(no_zero.is_err());
        let bad_cost = ControlProblem::new("x", 1, |_, a, o| o[0] = a[0], vec![vec![0.0]], |_| 1.0, 1.0);
        assert!(bad_cost.is_err());
        assert!(ControlProblem::heat(3, 1.0).is_err());
        let p = hc();
        assert_eq!(p.controls().len(), 41);
        assert!(p.controls().iter().any(|a| a[0] == 0.0));
        // g*(y) = y^2 / 2 on the grid points of A.
        assert!((p.conjugate(&[0.6]) - 0.18).abs() < 1e-12);
    }

    #[test]
    fn hjb_generator_examples() {
        let heat = ControlProblem::heat(1, 0.8).unwrap();
        for x in [-1.0, 0.3] {
            let v = hjb_generator(&heat, &ScalarField::cos(), &[x]).unwrap();
            assert!((v + 0.32 * f64::cos(x)).abs() < 1e-14);
        }
        assert_eq!(hjb_generator(&hc(), &ScalarField::constant(2.0), &[0.1]).unwrap(), 0.0);
        let fine = ControlProblem::hopf_cole(1.0, 4.0, 801).unwrap();
        for x in [-0.7f64, 0.2, 1.4] {
            let v = hjb_generator(&fine, &ScalarField::sin(), &[x]).unwrap();
            let exact = -0.5 * x.sin() + 0.5 * x.cos().powi(2);
            assert!((v - exact).abs() < 1e-4);
        }
    }

    #[test]
    fn cfl_is_enforced() {
        let grid = Grid::uniform_1d(-2.0, 2.0, 41).unwrap();
        let r = dp_semigroup(&hc(), &ScalarField::cos(), 0.1, &grid, Some(0.01), 1);
        assert!(matches!(r, Err(Error::Cfl { .. })));
    }

    #[test]
    fn heat_reduction_and_constants() {
        let heat = ControlProblem::heat(1, 1.0).unwrap();
        let grid = Grid::uniform_1d(-6.0, 6.0, 601).unwrap();
        let u = dp_semigroup(&heat, &ScalarField::cos(), 0.25, &grid, None, 5).unwrap();
        assert_eq!(u.field(0).values().unwrap(), grid.nodes().map(|x| x[0].cos()).collect::<Vec<_>>().as_slice());
        assert!(u.scheme.cfl <= 1.0 / 3.0 + 1e-12 && u.scheme.monotone && u.scheme.constant_preserving);
        let last = u.last();
        for x in [-1.0f64, 0.0, 1.0] {
            assert!((last.eval(&[x]).unwrap() - (-0.125f64).exp() * x.cos()).abs() < 1e-4);
        }
        let c = dp_semigroup(&hc(), &ScalarField::constant(3.0), 0.1, &grid, None, 3).unwrap();
        for k in 0..c.len() {
            assert!(c.layer(k).iter().all(|v| *v == 3.0));
        }
    }

    #[test]
    fn dp_matches_hopf_cole_on_coarse_grid() {
        let grid = Grid::uniform_1d(-4.0, 4.0, 401).unwrap();
        let u = dp_semigroup(&hc(), &ScalarField::cos(), 0.25, &grid, None, 1).unwrap().last();
        for x in [-1.0, 0.0, 1.0] {
            let oracle = hopf_cole_oracle(1.0, &ScalarField::cos(), 0.25, x).unwrap();
            assert!((u.eval(&[x]).unwrap() - oracle).abs() < 1e-2, "x = {x}");
        }
    }

    #[test]
    fn hopf_cole_examples() {
        assert!((hopf_cole_oracle(1.0, &ScalarField::constant(2.5), 0.3, 0.1).unwrap() - 2.5).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for t in [1e-1, 1e-2, 1e-3, 1e-4] {
            let gap = (hopf_cole_oracle(1.0, &ScalarField::cos(), t, 0.4).unwrap() - 0.4f64.cos()).abs();
            assert!(gap < prev);
            prev = gap;
        }
        assert!(prev < 1e-3);
        assert!(matches!(hopf_cole_oracle(1.0, &ScalarField::square(), 0.1, 0.0), Err(Error::Quadrature(_))));
        // Short-time expansion: v ≈ phi + t (phi''/2 + phi'^2/2).
        let t = 1e-3;
        let v = hopf_cole_oracle(1.0, &ScalarField::cos(), t, 0.0).unwrap();
        assert!((v - (1.0 - 0.5 * t)).abs() < 1e-6);
    }

    #[test]
    fn convexity_and_monotonicity() {
        let grid = Grid::uniform_1d(-4.0, 4.0, 201).unwrap();
        let probes: Vec<Vec<f64>> = (-4..=4).map(|k| vec![0.25 * k as f64]).collect();
        let r = convexity_monotonicity_check(&hc(), &ScalarField::cos(), &ScalarField::sin(), 0.5, 0.25, &grid, &probes, 1e-9).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.convexity_residual >= -1e-9);
        assert_eq!(r.constant_error, 0.0);
        let same = convexity_monotonicity_check(&hc(), &ScalarField::cos(), &ScalarField::cos(), 0.3, 0.25, &grid, &probes, 1e-9).unwrap();
        assert!(same.convexity_residual.abs() < 1e-12);
        let far = vec![vec![3.5]];
        assert!(convexity_monotonicity_check(&hc(), &ScalarField::cos(), &ScalarField::sin(), 0.5, 0.25, &grid, &far, 1e-9).is_err());
    }

    #[test]
    fn dynamic_programming_examples() {
        let grid = Grid::uniform_1d(-4.0, 4.0, 201).unwrap();
        let probes: Vec<Vec<f64>> = vec![vec![-1.0], vec![0.0], vec![1.0]];
        let zero = dynamic_programming_check(&hc(), &ScalarField::cos(), 0.0, 0.2, &grid, &probes, 1e-2).unwrap();
        assert_eq!(zero.gap, 0.0);
        let heat = ControlProblem::heat(1, 1.0).unwrap();
        let h = dynamic_programming_check(&heat, &ScalarField::cos(), 0.1, 0.1, &grid, &probes, 1e-4).unwrap();
        assert!(h.pass, "{h:?}");
        let r = dynamic_programming_check(&hc(), &ScalarField::cos(), 0.125, 0.125, &grid, &probes, 1e-2).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn viscosity_examples() {
        let heat = ControlProblem::heat(1, 1.0).unwrap();
        let grid = Grid::uniform_1d(-6.0, 6.0, 601).unwrap();
        let family = QuadraticFamily {
            curvature: (0.05, 1.0),
            window_nodes: 2,
            window_layers: 1,
            count: 20,
            policy: RngPolicy::new(5),
            stream: 1,
        };
        let u = dp_semigroup(&heat, &ScalarField::cos(), 0.2, &grid, None, 20).unwrap();
        let rep = viscosity_test(&u, &heat, 0.1, 0.4, &family, u.consistency_budget()).unwrap();
        assert_eq!(rep.violations, 0, "{rep:?}");
        assert!(rep.skipped < rep.entries.len());

        let times: Vec<f64> = (0..=10).map(|k| 0.01 * k as f64).collect();
        let frozen = ValueField::frozen(&ScalarField::cos(), &grid, times).unwrap();
        let tight = QuadraticFamily { curvature: (1e-4, 1e-3), count: 10, ..family };
        let x = std::f64::consts::PI;
        let rep = viscosity_test(&frozen, &heat, 0.05, x, &tight, frozen.consistency_budget()).unwrap();
        assert!(rep.violations > 0);
        assert!(rep.max_violation >= 0.5 * (x.cos()).abs() - frozen.consistency_budget(), "{rep:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(8))]

            #[test]
            fn scheme_is_a_sup_norm_contraction(c1 in -2.0f64..2.0, c2 in -2.0f64..2.0, f in 0.5f64..3.0) {
                let grid = Grid::uniform_1d(-3.0, 3.0, 61).unwrap();
                let phi = ScalarField::closed(move |x| c1 * (f * x[0]).sin());
                let psi = ScalarField::closed(move |x| c2 * x[0].cos());
                let d0 = grid.nodes().map(|x| (phi.eval(&x).unwrap() - psi.eval(&x).unwrap()).abs()).fold(0.0, f64::max);
                let a = dp_semigroup(&hc(), &phi, 0.1, &grid, None, 1).unwrap();
                let b = dp_semigroup(&hc(), &psi, 0.1, &grid, None, 1).unwrap();
                let la = a.layer(a.len() - 1);
                let lb = b.layer(b.len() - 1);
                let d1 = la.iter().zip(lb).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                prop_assert!(d1 <= d0 + 1e-12);
            }
        }
    }
}
