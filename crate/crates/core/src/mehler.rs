//! Generalized Mehler semigroups `P_t phi(x) = ∫ phi(T_t x + y) mu_t(dy)` on
//! R^d with diagonal drift `T_t = diag(e^{t alpha_j})` and Lévy noise.
//!
//! `mu_t` is known through its characteristic function
//! `exp(-∫_0^t lambda(T_s^* xi) ds)`; densities come from FFT inversion
//! (one dimension), trigonometric fields are propagated exactly in Fourier
//! space.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quad::{cholesky_psd, integrate_adaptive, integrate_real};
use crate::statespace::{Grid, RngPolicy, ScalarField};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// `e^{iu} - 1 - i u / (1 + r2)` without cancellation for small `u`.
fn compensated_exp(u: f64, r2: f64) -> Complex64 {
    let half = (0.5 * u).sin();
    let re = -2.0 * half * half;
    let sin_minus_u = if u.abs() < 0.1 {
        let u2 = u * u;
        -u * u2 / 6.0 * (1.0 - u2 / 20.0 * (1.0 - u2 / 42.0 * (1.0 - u2 / 72.0)))
    } else {
        u.sin() - u
    };
    Complex64::new(re, sin_minus_u + u * r2 / (1.0 + r2))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Law of the jumps of a compound Poisson part.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpLaw {
    /// Probability vector over jump sizes.
    Atoms { points: Vec<Vec<f64>>, probs: Vec<f64> },
    /// One-dimensional `N(mean, sd^2)` jump sizes.
    Normal { mean: f64, sd: f64 },
}

impl JumpLaw {
    fn dim(&self) -> usize {
        match self {
            JumpLaw::Atoms { points, .. } => points.first().map_or(0, Vec::len),
            JumpLaw::Normal { .. } => 1,
        }
    }

    /// `E[e^{i<xi, J>}]`.
    fn charfn(&self, xi: &[f64]) -> Complex64 {
        match self {
            JumpLaw::Atoms { points, probs } => points
                .iter()
                .zip(probs)
                .map(|(p, w)| *w * Complex64::from_polar(1.0, dot(xi, p)))
                .sum(),
            JumpLaw::Normal { mean, sd } => {
                Complex64::from_polar((-0.5 * xi[0] * xi[0] * sd * sd).exp(), xi[0] * mean)
            }
        }
    }

    /// `E[e^{i<xi,J>} - 1 - i<xi,J>/(1+|J|^2)]`, exact for atoms.
    fn compensated(&self, xi: &[f64], compensator: &[f64]) -> Complex64 {
        match self {
            JumpLaw::Atoms { points, probs } => points
                .iter()
                .zip(probs)
                .map(|(p, w)| *w * compensated_exp(dot(xi, p), dot(p, p)))
                .sum(),
            JumpLaw::Normal { .. } => self.charfn(xi) - 1.0 - I * dot(xi, compensator),
        }
    }

    /// `E[J / (1 + |J|^2)]`.
    fn compensator(&self) -> Result<Vec<f64>> {
        match self {
            JumpLaw::Atoms { points, probs } => {
                let d = self.dim();
                let mut c = vec![0.0; d];
                for (p, w) in points.iter().zip(probs) {
                    let r2 = dot(p, p);
                    for j in 0..d {
                        c[j] += w * p[j] / (1.0 + r2);
                    }
                }
                Ok(c)
            }
            JumpLaw::Normal { mean, sd } => {
                if *sd == 0.0 {
                    return Ok(vec![mean / (1.0 + mean * mean)]);
                }
                let (v, _) = integrate_real(
                    |z| {
                        let x = mean + sd * z;
                        x / (1.0 + x * x) * (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
                    },
                    -40.0,
                    40.0,
                    1e-15,
                    1e-13,
                )?;
                Ok(vec![v])
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            JumpLaw::Atoms { points, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (p, w) in points.iter().zip(probs) {
                    acc += w;
                    if u < acc {
                        return p.clone();
                    }
                }
                points[points.len() - 1].clone()
            }
            JumpLaw::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                vec![mean + sd * z]
            }
        }
    }
}

fn in_annulus(r: f64, eps: f64) -> bool {
    r >= eps && r <= 1.0 / eps
}

/// Compound Poisson jumps: `rate` times the law.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FiniteActivity {
    pub rate: f64,
    pub law: JumpLaw,
}

/// One-dimensional Lévy density on `[lower, upper]` (possibly singular at 0).
#[derive(Clone)]
pub struct JumpDensity {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    density: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for JumpDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "JumpDensity({} on [{}, {}])", self.name, self.lower, self.upper)
    }
}

impl JumpDensity {
    pub fn new(name: impl Into<String>, lower: f64, upper: f64, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        if !(lower < upper) {
            return invalid("density support needs lower < upper");
        }
        Ok(Self { name: name.into(), lower, upper, density: Arc::new(f) })
    }

    /// `x^{-3/2}` on `(0, 1]`.
    pub fn stable_half() -> Self {
        Self::new("x^-3/2 on (0,1]", 0.0, 1.0, |x| x.powf(-1.5)).expect("valid support")
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.density)(x)
    }

    /// Sub-intervals of the support inside the annulus `eps <= |x| <= 1/eps`.
    fn pieces(&self, eps: Option<f64>) -> Vec<(f64, f64)> {
        let Some(eps) = eps else {
            return vec![(self.lower, self.upper)];
        };
        let mut out = Vec::new();
        for (a, b) in [(-1.0 / eps, -eps), (eps, 1.0 / eps)] {
            let lo = a.max(self.lower);
            let hi = b.min(self.upper);
            if lo < hi {
                out.push((lo, hi));
            }
        }
        out
    }
}

/// Lévy measure: compound Poisson part plus an optional density.
#[derive(Clone, Debug, Default)]
pub struct LevyMeasure {
    pub finite: Option<FiniteActivity>,
    pub density: Option<JumpDensity>,
}

/// Lévy–Khintchine triplet `(a, R, M)`.
#[derive(Clone, Debug)]
pub struct LevyTriplet {
    dim: usize,
    pub a: Vec<f64>,
    /// Row-major `d x d`, symmetric positive semidefinite.
    pub r: Vec<f64>,
    pub m: LevyMeasure,
    compensator: Vec<f64>,
    /// `∫ (|x|^2 ∧ 1) M(dx)`.
    pub small_moment: f64,
}

impl LevyTriplet {
    pub fn new(a: Vec<f64>, r: Vec<f64>, m: LevyMeasure) -> Result<Self> {
        let d = a.len();
        if d == 0 || d > crate::statespace::MAX_DIM || r.len() != d * d {
            return invalid("triplet dimensions disagree");
        }
        for i in 0..d {
            for j in 0..d {
                if r[i * d + j] != r[j * d + i] {
                    return invalid("covariance must be symmetric");
                }
            }
        }
        cholesky_psd(&r, d).map_err(|_| Error::InvalidArgument("covariance must be positive semidefinite".into()))?;
        let mut small_moment = 0.0;
        let mut compensator = vec![0.0; d];
        if let Some(fa) = &m.finite {
            if !(fa.rate > 0.0) {
                return invalid("jump rate must be positive");
            }
            if fa.law.dim() != d {
                return invalid("jump law dimension disagrees with the triplet");
            }
            if let JumpLaw::Atoms { points, probs } = &fa.law {
                if points.len() != probs.len() || probs.iter().any(|p| !(*p >= 0.0)) {
                    return invalid("jump atoms need nonnegative probabilities");
                }
                if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return invalid("jump probabilities must sum to one");
                }
                if points.iter().any(|p| p.iter().all(|v| *v == 0.0)) {
                    return invalid("Lévy measure must not charge the origin");
                }
            }
            compensator = fa.law.compensator()?;
            small_moment += fa.rate
                * match &fa.law {
                    JumpLaw::Atoms { points, probs } => {
                        points.iter().zip(probs).map(|(p, w)| w * dot(p, p).min(1.0)).sum()
                    }
                    JumpLaw::Normal { mean, sd } => {
                        integrate_real(
                            |z| {
                                let x = mean + sd * z;
                                (x * x).min(1.0) * (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
                            },
                            -40.0,
                            40.0,
                            1e-15,
                            1e-12,
                        )?
                        .0
                    }
                };
        }
        if let Some(den) = &m.density {
            if d != 1 {
                return invalid("Lévy densities are supported in one dimension only");
            }
            let (v, _) = integrate_real(|x| (x * x).min(1.0) * den.eval(x), den.lower, den.upper, 1e-14, 1e-12)?;
            if !v.is_finite() {
                return invalid("∫ (|x|^2 ∧ 1) M(dx) is not finite");
            }
            small_moment += v;
        }
        Ok(Self { dim: d, a, r, m, compensator, small_moment })
    }

    /// `(0, sigma^2, 0)` in one dimension.
    pub fn gaussian_1d(sigma: f64) -> Self {
        Self::new(vec![0.0], vec![sigma * sigma], LevyMeasure::default()).expect("valid triplet")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_density(&self) -> bool {
        self.m.density.is_some()
    }

    pub fn is_symmetric(&self) -> bool {
        let atoms_sym = match &self.m.finite {
            None => true,
            Some(FiniteActivity { law: JumpLaw::Normal { mean, .. }, .. }) => *mean == 0.0,
            Some(FiniteActivity { law: JumpLaw::Atoms { points, probs }, .. }) => points.iter().zip(probs).all(|(p, w)| {
                let neg: Vec<f64> = p.iter().map(|v| -v).collect();
                points.iter().zip(probs).any(|(q, u)| *q == neg && u == w)
            }),
        };
        let dens_sym = self.m.density.is_none();
        self.a.iter().all(|v| *v == 0.0) && atoms_sym && dens_sym
    }

    fn exponent(&self, xi: &[f64], eps: Option<f64>) -> Result<Complex64> {
        let d = self.dim;
        if xi.len() != d {
            return invalid("frequency has the wrong dimension");
        }
        let quad_form: f64 = (0..d).map(|i| (0..d).map(|j| xi[i] * self.r[i * d + j] * xi[j]).sum::<f64>()).sum();
        let mut lam = Complex64::new(0.5 * quad_form, -dot(xi, &self.a));
        if let Some(fa) = &self.m.finite {
            let contribution = match (eps, &fa.law) {
                (Some(e), JumpLaw::Atoms { points, probs }) => points
                    .iter()
                    .zip(probs)
                    .filter(|(p, _)| in_annulus(dot(p, p).sqrt(), e))
                    .map(|(p, w)| *w * compensated_exp(dot(xi, p), dot(p, p)))
                    .sum(),
                (Some(e), JumpLaw::Normal { mean, sd }) => {
                    // Normal jumps restricted to the annulus need quadrature.
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (lo, hi) in [(-1.0 / e, -e), (e, 1.0 / e)] {
                        let r = integrate_adaptive(
                            |x| {
                                let z = (x - mean) / sd;
                                compensated_exp(xi[0] * x, x * x) * (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
                            },
                            lo,
                            hi,
                            1e-14,
                            1e-12,
                            4000,
                        )?;
                        acc += r.value;
                    }
                    acc
                }
                (None, law) => law.compensated(xi, &self.compensator),
            };
            lam -= fa.rate * contribution;
        }
        if let Some(den) = &self.m.density {
            for (lo, hi) in den.pieces(eps) {
                let r = integrate_adaptive(|x| compensated_exp(xi[0] * x, x * x) * den.eval(x), lo, hi, 1e-14, 1e-12, 4000)?;
                lam -= r.value;
            }
        }
        if lam.re < -1e-10 * (1.0 + lam.norm()) {
            return Err(Error::Numerical(format!("Re lambda = {} < 0 at xi = {xi:?}", lam.re)));
        }
        Ok(lam)
    }
}

/// `lambda(xi) = -i<xi,a> + <xi,R xi>/2 - ∫ (e^{i<xi,x>} - 1 - i<xi,x>/(1+|x|^2)) M(dx)`.
pub fn levy_exponent(tr: &LevyTriplet, xi: &[f64]) -> Result<Complex64> {
    tr.exponent(xi, None)
}

/// The exponent with `M` restricted to `eps <= |x| <= 1/eps`.
pub fn truncated_exponent(tr: &LevyTriplet, eps: f64, xi: &[f64]) -> Result<Complex64> {
    if !(eps > 0.0 && eps < 1.0) {
        return invalid("eps must lie in (0, 1)");
    }
    tr.exponent(xi, Some(eps))
}

/// Drift spectrum plus noise.
#[derive(Clone, Debug)]
pub struct MehlerModel {
    pub alphas: Vec<f64>,
    pub triplet: LevyTriplet,
    /// Restriction of the Lévy measure to an annulus, if any.
    pub truncation: Option<f64>,
}

impl MehlerModel {
    pub fn new(alphas: Vec<f64>, triplet: LevyTriplet) -> Result<Self> {
        if alphas.len() != triplet.dim() || alphas.iter().any(|a| !a.is_finite()) {
            return invalid("drift spectrum must be finite and match the triplet dimension");
        }
        Ok(Self { alphas, triplet, truncation: None })
    }

    /// OU with `alpha = -a` and Gaussian noise of variance `sigma^2`.
    pub fn gaussian_ou(a: f64, sigma: f64) -> Self {
        Self::new(vec![-a], LevyTriplet::gaussian_1d(sigma)).expect("valid model")
    }

    /// Same model with `M` replaced by `1_{eps <= |x| <= 1/eps} M`.
    pub fn truncated(&self, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return invalid("eps must lie in (0, 1)");
        }
        Ok(Self { truncation: Some(eps), ..self.clone() })
    }

    pub fn dim(&self) -> usize {
        self.alphas.len()
    }

    pub fn exponent(&self, xi: &[f64]) -> Result<Complex64> {
        self.triplet.exponent(xi, self.truncation)
    }

    /// `T_s^* xi = (e^{s alpha_j} xi_j)`.
    pub fn adjoint_flow(&self, s: f64, xi: &[f64]) -> Vec<f64> {
        xi.iter().zip(&self.alphas).map(|(x, a)| (s * a).exp() * x).collect()
    }

    /// `T_t x`.
    pub fn flow(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.adjoint_flow(t, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CharfnValue {
    pub value: Complex64,
    /// Error estimate of the time integral of the exponent.
    pub error: f64,
}

/// `mu_hat_t(xi) = exp(-∫_0^t lambda(T_s^* xi) ds)`.
pub fn mu_charfn(model: &MehlerModel, t: f64, xi: &[f64]) -> Result<CharfnValue> {
    if !(t >= 0.0) {
        return invalid("time must be nonnegative");
    }
    if t == 0.0 || xi.iter().all(|v| *v == 0.0) {
        return Ok(CharfnValue { value: Complex64::new(1.0, 0.0), error: 0.0 });
    }
    let failure = std::cell::RefCell::new(None);
    let r = integrate_adaptive(
        |s| {
            model.exponent(&model.adjoint_flow(s, xi)).unwrap_or_else(|e| {
                failure.borrow_mut().get_or_insert(e);
                Complex64::new(f64::NAN, 0.0)
            })
        },
        0.0,
        t,
        1e-14,
        1e-13,
        2000,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let r = r?;
    Ok(CharfnValue { value: (-r.value).exp(), error: r.error })
}

/// FFT-inverted density with its diagnostics.
#[derive(Clone, Debug)]
pub struct Density {
    pub field: ScalarField,
    /// Trapezoid mass on the grid.
    pub mass: f64,
    pub max_imag: f64,
    pub min_value: f64,
    /// `|mu_hat|` at the edge of the dual grid.
    pub edge_decay: f64,
}

/// Largest `|mu_hat_t|` allowed at the dual-grid edge.
pub const EDGE_DECAY: f64 = 1e-8;

/// Density of `mu_t` on a symmetric one-dimensional grid by discrete
/// Fourier inversion.
pub fn mu_density_fft(model: &MehlerModel, t: f64, grid: &Grid) -> Result<Density> {
    if grid.dim() != 1 || model.dim() != 1 {
        return invalid("FFT inversion is implemented for one dimension");
    }
    let (lo, hi) = (grid.lower()[0], grid.upper()[0]);
    if (lo + hi).abs() > 1e-12 * hi.abs() {
        return invalid("grid must be symmetric about the origin");
    }
    if !(t > 0.0) {
        return invalid("mu_0 is a point mass and has no density");
    }
    let n = grid.counts()[0];
    let h = grid.step(0);
    let dxi = 2.0 * PI / (n as f64 * h);
    let xi0 = -((n / 2) as f64) * dxi;
    let edge = [mu_charfn(model, t, &[xi0])?, mu_charfn(model, t, &[-xi0])?]
        .iter()
        .map(|c| c.value.norm())
        .fold(0.0, f64::max);
    if edge > EDGE_DECAY {
        return Err(Error::InsufficientDecay {
            edge,
            suggestion: format!(
                "refine the grid: spacing {h} resolves |xi| <= {:.3}; more nodes on the same interval extend the dual grid",
                -xi0
            ),
        });
    }
    let x0 = grid.coord(0, 0);
    let mut buf = (0..n)
        .into_par_iter()
        .map(|j| {
            let xi = xi0 + j as f64 * dxi;
            mu_charfn(model, t, &[xi]).map(|c| c.value * Complex64::from_polar(1.0, -(j as f64) * dxi * x0))
        })
        .collect::<Result<Vec<_>>>()?;
    FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut buf);
    let mut values = Vec::with_capacity(n);
    let mut max_imag: f64 = 0.0;
    for (k, v) in buf.iter().enumerate() {
        let x = grid.coord(0, k);
        let f = dxi / (2.0 * PI) * v * Complex64::from_polar(1.0, -xi0 * x);
        max_imag = max_imag.max(f.im.abs());
        values.push(f.re);
    }
    let min_value = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mass = h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]));
    if max_imag > 1e-10 {
        return Err(Error::Numerical(format!("density has imaginary residue {max_imag:e}")));
    }
    if min_value < -1e-8 {
        return Err(Error::Numerical(format!("density undershoots to {min_value:e}")));
    }
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::Numerical(format!("density mass {mass} differs from one; widen the grid")));
    }
    Ok(Density { field: ScalarField::sampled(grid.clone(), values)?, mass, max_imag, min_value, edge_decay: edge })
}

/// Finite Hermitian-symmetric combination of point masses in frequency space.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralMeasure {
    pub atoms: Vec<(Vec<f64>, Complex64)>,
}

impl SpectralMeasure {
    pub fn new(atoms: Vec<(Vec<f64>, Complex64)>) -> Result<Self> {
        let s = Self { atoms };
        s.check_hermitian()?;
        Ok(s)
    }

    /// `delta_0`, whose transform is the constant one.
    pub fn one(dim: usize) -> Self {
        Self { atoms: vec![(vec![0.0; dim], Complex64::new(1.0, 0.0))] }
    }

    /// `cos(<xi, x>)`.
    pub fn cos(xi: &[f64]) -> Self {
        let neg: Vec<f64> = xi.iter().map(|v| -v).collect();
        let half = Complex64::new(0.5, 0.0);
        Self { atoms: vec![(xi.to_vec(), half), (neg, half)] }
    }

    /// `sin(<xi, x>)`.
    pub fn sin(xi: &[f64]) -> Self {
        let neg: Vec<f64> = xi.iter().map(|v| -v).collect();
        Self { atoms: vec![(xi.to_vec(), Complex64::new(0.0, -0.5)), (neg, Complex64::new(0.0, 0.5))] }
    }

    /// `self + c other`.
    pub fn plus(mut self, c: f64, other: &SpectralMeasure) -> Self {
        self.atoms.extend(other.atoms.iter().map(|(x, w)| (x.clone(), c * w)));
        self
    }

    pub fn dim(&self) -> usize {
        self.atoms.first().map_or(0, |a| a.0.len())
    }

    fn check_hermitian(&self) -> Result<()> {
        for (xi, w) in &self.atoms {
            let neg: Vec<f64> = xi.iter().map(|v| -v).collect();
            // Sum the weights at -xi; repeated frequencies are allowed.
            let at_neg: Complex64 = self.atoms.iter().filter(|(z, _)| *z == neg).map(|(_, u)| *u).sum();
            let at_pos: Complex64 = self.atoms.iter().filter(|(z, _)| z == xi).map(|(_, u)| *u).sum();
            if (at_neg - at_pos.conj()).norm() > 1e-15 * (1.0 + w.norm()) {
                return Err(Error::NotHermitian(format!("weight at {xi:?} is not conjugate to the weight at its negative")));
            }
        }
        Ok(())
    }

    /// `phi(x) = ∑ w e^{i<xi,x>}` (real by symmetry).
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.atoms.iter().map(|(xi, w)| (w * Complex64::from_polar(1.0, dot(xi, x))).re).sum()
    }

    /// The real field `nu_hat` with analytic derivatives.
    pub fn field(&self) -> ScalarField {
        let a = self.atoms.clone();
        let b = self.atoms.clone();
        let bound: f64 = self.atoms.iter().map(|(_, w)| w.norm()).sum();
        ScalarField::closed(move |x| a.iter().map(|(xi, w)| (w * Complex64::from_polar(1.0, dot(xi, x))).re).sum())
            .with_envelope(0.0, bound)
            .with_derivatives(move |x, g, h| {
                let d = x.len();
                g.fill(0.0);
                h.fill(0.0);
                for (xi, w) in &b {
                    let e = w * Complex64::from_polar(1.0, dot(xi, x));
                    for i in 0..d {
                        g[i] += (I * xi[i] * e).re;
                        for j in 0..d {
                            h[i * d + j] -= xi[i] * xi[j] * e.re;
                        }
                    }
                }
            })
    }
}

/// What the Mehler semigroup acts on.
#[derive(Clone, Debug)]
pub enum Observable {
    Field(ScalarField),
    Spectral(SpectralMeasure),
}

impl From<ScalarField> for Observable {
    fn from(f: ScalarField) -> Self {
        Observable::Field(f)
    }
}

impl From<SpectralMeasure> for Observable {
    fn from(s: SpectralMeasure) -> Self {
        Observable::Spectral(s)
    }
}

impl Observable {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            Observable::Field(f) => f.eval(x),
            Observable::Spectral(s) => Ok(s.eval(x)),
        }
    }
}

/// Options for evaluating `P_t phi` through the density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityOptions {
    pub half_width: f64,
    pub nodes: usize,
}

impl Default for DensityOptions {
    fn default() -> Self {
        Self { half_width: 20.0, nodes: 4097 }
    }
}

/// `P_t phi(x)`: exact Fourier propagation for spectral observables,
/// trapezoid quadrature against the FFT density for fields.
pub fn mehler_eval(model: &MehlerModel, t: f64, phi: &Observable, x: &[f64], opts: &DensityOptions) -> Result<f64> {
    if x.len() != model.dim() {
        return invalid("point has the wrong dimension");
    }
    if t == 0.0 {
        return phi.eval(x);
    }
    match phi {
        Observable::Spectral(s) => {
            let tx = model.flow(t, x);
            let mut acc = Complex64::new(0.0, 0.0);
            for (xi, w) in &s.atoms {
                acc += w * Complex64::from_polar(1.0, dot(xi, &tx)) * mu_charfn(model, t, xi)?.value;
            }
            Ok(acc.re)
        }
        Observable::Field(f) => {
            let grid = Grid::symmetric(&[opts.half_width], &[opts.nodes])?;
            let den = mu_density_fft(model, t, &grid)?;
            density_expectation(&den, &model.flow(t, x), f)
        }
    }
}

/// `∫ f(shift + y) rho(y) dy / mass` by the trapezoid rule on the density grid.
pub fn density_expectation(den: &Density, shift: &[f64], f: &ScalarField) -> Result<f64> {
    let grid = den.field.grid().expect("sampled density");
    let vals = den.field.values().expect("sampled density");
    let n = vals.len();
    let h = grid.step(0);
    let mut acc = 0.0;
    for (k, rho) in vals.iter().enumerate() {
        let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        acc += w * rho * f.eval(&[shift[0] + grid.coord(0, k)])?;
    }
    Ok(acc * h / den.mass)
}

/// Draws `n` samples of `mu_t` for a finite-activity Lévy measure:
/// drift and Gaussian parts exactly, jumps at uniform times.
pub fn sample_mu(model: &MehlerModel, t: f64, n: usize, policy: &RngPolicy, stream: u32) -> Result<Vec<Vec<f64>>> {
    let tr = &model.triplet;
    if tr.has_density() {
        return invalid("direct sampling needs a finite-activity Lévy measure");
    }
    if model.truncation.is_some() {
        return invalid("direct sampling of truncated models is not supported");
    }
    let d = model.dim();
    // ∫_0^t e^{c s} ds
    let e = |c: f64| if (c * t).abs() < 1e-12 { t } else { (c * t).exp_m1() / c };
    let mut drift: Vec<f64> = tr.a.clone();
    if let Some(fa) = &tr.m.finite {
        for (v, c) in drift.iter_mut().zip(&tr.compensator) {
            *v -= fa.rate * c;
        }
    }
    let mean: Vec<f64> = (0..d).map(|j| drift[j] * e(model.alphas[j])).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = tr.r[i * d + j] * e(model.alphas[i] + model.alphas[j]);
        }
    }
    let l = cholesky_psd(&cov, d)?;
    let poisson = match &tr.m.finite {
        Some(fa) if fa.rate * t > 0.0 => {
            Some(Poisson::new(fa.rate * t).map_err(|e| Error::InvalidArgument(e.to_string()))?)
        }
        _ => None,
    };
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = policy.rng(stream, i as u32);
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut y: Vec<f64> = (0..d).map(|r| mean[r] + (0..=r).map(|c| l[r * d + c] * z[c]).sum::<f64>()).collect();
            if let (Some(p), Some(fa)) = (&poisson, &tr.m.finite) {
                let count = p.sample(&mut rng) as usize;
                for _ in 0..count {
                    let u: f64 = rng.random::<f64>() * t;
                    let jump = fa.law.sample(&mut rng);
                    for j in 0..d {
                        y[j] += (model.alphas[j] * u).exp() * jump[j];
                    }
                }
            }
            y
        })
        .collect())
}

/// Monte Carlo `P_t phi(x)` from direct samples of `mu_t`.
pub fn mehler_eval_mc(model: &MehlerModel, t: f64, phi: &ScalarField, x: &[f64], n: usize, policy: &RngPolicy) -> Result<(f64, f64)> {
    let tx = model.flow(t, x);
    let ys = sample_mu(model, t, n, policy, 0)?;
    let vals = ys
        .iter()
        .map(|y| {
            let p: Vec<f64> = tx.iter().zip(y).map(|(a, b)| a + b).collect();
            phi.eval(&p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::sde::mean_stderr(vals.into_iter()))
}

/// Kolmogorov–Smirnov distance between samples and the distribution of a
/// one-dimensional grid density (cumulative trapezoid, linear in between).
pub fn ks_distance(samples: &[f64], den: &Density) -> f64 {
    let grid = den.field.grid().expect("sampled density");
    let vals = den.field.values().expect("sampled density");
    let h = grid.step(0);
    let mut cdf = vec![0.0; vals.len()];
    for k in 1..vals.len() {
        cdf[k] = cdf[k - 1] + 0.5 * h * (vals[k - 1] + vals[k]);
    }
    let total = cdf[cdf.len() - 1];
    let lo = grid.lower()[0];
    let f = |x: f64| {
        let s = (x - lo) / h;
        if s <= 0.0 {
            0.0
        } else if s >= (vals.len() - 1) as f64 {
            1.0
        } else {
            let k = s.floor() as usize;
            let fr = s - k as f64;
            (cdf[k] + fr * (cdf[k + 1] - cdf[k])) / total
        }
    };
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let fx = f(x);
            (fx - i as f64 / n).abs().max(((i + 1) as f64 / n - fx).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruncationRow {
    pub eps: f64,
    /// `sup_{x in C} |P_t^eps phi(x) - P_t phi(x)|` over the probe lattice.
    pub gap: f64,
    /// Radius holding all but [`TIGHTNESS_MASS`] of `mu_t^eps`, from
    /// [`tail_bound`]; `None` beyond the search range.
    pub tightness_radius: Option<f64>,
}

/// Mass level of the tightness radii in the truncation study.
pub const TIGHTNESS_MASS: f64 = 0.05;

/// Upper bound on `mu_t(|x| > r)` in one dimension by the truncation
/// inequality `mu(|x| > r) <= r ∫_0^{2/r} (1 - Re mu_hat(xi)) dxi`.
pub fn tail_bound(model: &MehlerModel, t: f64, r: f64) -> Result<f64> {
    if model.dim() != 1 || !(r > 0.0) {
        return invalid("tail bound needs one dimension and r > 0");
    }
    let gl = crate::quad::GaussLegendre::new(24);
    let b = 2.0 / r;
    let mut acc = 0.0;
    for (z, w) in gl.nodes.iter().zip(&gl.weights) {
        let xi = 0.5 * b * (z + 1.0);
        acc += w * (1.0 - mu_charfn(model, t, &[xi])?.value.re);
    }
    Ok(r * 0.5 * b * acc)
}

/// Smallest `r = 2^k / 4` (k < 24) with `tail_bound(r) <= mass`.
pub fn tightness_radius(model: &MehlerModel, t: f64, mass: f64) -> Result<Option<f64>> {
    for k in 0..24 {
        let r = 0.25 * f64::powi(2.0, k);
        if tail_bound(model, t, r)? <= mass {
            return Ok(Some(r));
        }
    }
    Ok(None)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruncationStudy {
    pub t: f64,
    pub compact_radius: f64,
    pub rows: Vec<TruncationRow>,
    pub strictly_decreasing: bool,
}

/// Gap between the truncated and the full semigroup on a compact, per `eps`.
pub fn truncation_convergence_study(
    model: &MehlerModel,
    t: f64,
    phi: &Observable,
    compact_radius: f64,
    eps_list: &[f64],
    probes: usize,
    opts: &DensityOptions,
) -> Result<TruncationStudy> {
    if model.dim() != 1 {
        return invalid("the study probes a one-dimensional compact");
    }
    let probes = probes.max(2);
    let xs: Vec<f64> = (0..probes)
        .map(|i| -compact_radius + 2.0 * compact_radius * i as f64 / (probes - 1) as f64)
        .collect();
    let full = xs
        .par_iter()
        .map(|x| mehler_eval(model, t, phi, &[*x], opts))
        .collect::<Result<Vec<_>>>()?;
    let rows = eps_list
        .par_iter()
        .map(|&eps| {
            let m = model.truncated(eps)?;
            let mut gap: f64 = 0.0;
            for (x, f) in xs.iter().zip(&full) {
                gap = gap.max((mehler_eval(&m, t, phi, &[*x], opts)? - f).abs());
            }
            let tightness_radius = tightness_radius(&m, t, TIGHTNESS_MASS)?;
            Ok(TruncationRow { eps, gap, tightness_radius })
        })
        .collect::<Result<Vec<_>>>()?;
    let strictly_decreasing = rows.windows(2).all(|w| w[1].gap < w[0].gap);
    Ok(TruncationStudy { t, compact_radius, rows, strictly_decreasing })
}

/// Pseudo-differential Kolmogorov operator on `phi = nu_hat`:
/// `∑ w (i<A^* xi, x> - lambda(xi)) e^{i<xi,x>}` with `A^* xi = (alpha_j xi_j)`.
pub fn lescot_generator(model: &MehlerModel, nu: &SpectralMeasure, x: &[f64]) -> Result<f64> {
    nu.check_hermitian()?;
    if nu.dim() != model.dim() || x.len() != model.dim() {
        return invalid("dimensions disagree");
    }
    let mut acc = Complex64::new(0.0, 0.0);
    let mut scale: f64 = 0.0;
    for (xi, w) in &nu.atoms {
        let axi: Vec<f64> = xi.iter().zip(&model.alphas).map(|(v, a)| v * a).collect();
        let term = w * (I * dot(&axi, x) - model.exponent(xi)?) * Complex64::from_polar(1.0, dot(xi, x));
        scale = scale.max(term.norm());
        acc += term;
    }
    if acc.im.abs() > 1e-10 * (1.0 + scale) {
        return Err(Error::Numerical(format!("imaginary residue {:e}", acc.im)));
    }
    Ok(acc.re)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    fn poisson_at_one() -> LevyTriplet {
        let law = JumpLaw::Atoms { points: vec![vec![1.0]], probs: vec![1.0] };
        LevyTriplet::new(vec![0.0], vec![0.0], LevyMeasure { finite: Some(FiniteActivity { rate: 1.0, law }), density: None }).unwrap()
    }

    fn stable_half() -> LevyTriplet {
        LevyTriplet::new(vec![0.0], vec![0.0], LevyMeasure { finite: None, density: Some(JumpDensity::stable_half()) }).unwrap()
    }

    #[test]
    fn exponent_examples() {
        let g = LevyTriplet::gaussian_1d(1.5);
        assert_eq!(levy_exponent(&g, &[0.0]).unwrap(), Complex64::new(0.0, 0.0));
        let xi = 0.7;
        assert!(close(levy_exponent(&g, &[xi]).unwrap(), Complex64::new(2.25 * xi * xi / 2.0, 0.0), 1e-15));
        let p = poisson_at_one();
        for xi in [0.3, -1.1, 2.0, 17.0] {
            let expected = 1.0 - Complex64::from_polar(1.0, xi) + I * xi / 2.0;
            assert!(close(levy_exponent(&p, &[xi]).unwrap(), expected, 1e-14), "xi = {xi}");
        }
    }

    #[test]
    fn exponent_symmetry_and_sign() {
        for tr in [poisson_at_one(), stable_half(), LevyTriplet::gaussian_1d(0.3)] {
            for xi in [0.1, 1.0, 5.0] {
                let a = levy_exponent(&tr, &[xi]).unwrap();
                let b = levy_exponent(&tr, &[-xi]).unwrap();
                assert!(close(b, a.conj(), 1e-12));
                assert!(a.re >= 0.0);
            }
        }
    }

    #[test]
    fn stable_half_exponent_matches_closed_form() {
        // ∫_0^1 (cos(xi x) - 1) x^{-3/2} dx at xi = 1, against a fine composite rule with the
        // singular part subtracted: cos(u) - 1 = -u^2/2 + O(u^4).
        let tr = stable_half();
        let lam = levy_exponent(&tr, &[1.0]).unwrap();
        let gl = crate::quad::GaussLegendre::new(20);
        let re = -gl.composite(0.0, 1.0, 400, |x| {
            let c = if x < 1e-3 { -x * x / 2.0 + x.powi(4) / 24.0 } else { x.cos() - 1.0 };
            c * x.powf(-1.5)
        });
        assert!((lam.re - re).abs() < 1e-9, "{} vs {re}", lam.re);
    }

    #[test]
    fn triplet_validation() {
        assert!(LevyTriplet::new(vec![0.0], vec![-1.0], LevyMeasure::default()).is_err());
        let zero = JumpLaw::Atoms { points: vec![vec![0.0]], probs: vec![1.0] };
        let m = LevyMeasure { finite: Some(FiniteActivity { rate: 1.0, law: zero }), density: None };
        assert!(LevyTriplet::new(vec![0.0], vec![1.0], m).is_err());
        let bad = JumpDensity::new("x^-3", 0.0, 1.0, |x: f64| x.powi(-3)).unwrap();
        let m = LevyMeasure { finite: None, density: Some(bad) };
        assert!(LevyTriplet::new(vec![0.0], vec![1.0], m).is_err());
    }

    #[test]
    fn charfn_examples() {
        let (a, s) = (1.3, 0.8);
        let m = MehlerModel::gaussian_ou(a, s);
        assert_eq!(mu_charfn(&m, 0.0, &[3.0]).unwrap().value, Complex64::new(1.0, 0.0));
        for (t, xi) in [(0.2, 1.0), (1.0, 2.5), (3.0, -0.4)] {
            let exact = (-s * s * xi * xi * (1.0 - (-2.0 * a * t).exp()) / (4.0 * a)).exp();
            assert!(close(mu_charfn(&m, t, &[xi]).unwrap().value, exact.into(), 1e-12));
        }
        let p = MehlerModel::new(vec![0.0], poisson_at_one()).unwrap();
        let xi = 1.7;
        let t = 0.6;
        let exact = (-t * levy_exponent(&p.triplet, &[xi]).unwrap()).exp();
        assert!(close(mu_charfn(&p, t, &[xi]).unwrap().value, exact, 1e-13));
    }

    #[test]
    fn gaussian_density_matches_normal_pdf() {
        let (a, s, t) = (1.0, 1.0, 0.7);
        let m = MehlerModel::gaussian_ou(a, s);
        let grid = Grid::symmetric(&[12.0], &[1025]).unwrap();
        let den = mu_density_fft(&m, t, &grid).unwrap();
        let v = crate::kernels::ou_variance(a, s, t);
        let mut err: f64 = 0.0;
        for (k, f) in den.field.values().unwrap().iter().enumerate() {
            let x = grid.coord(0, k);
            let exact = (-x * x / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
            err = err.max((f - exact).abs());
        }
        assert!(err < 1e-6, "{err}");
        assert!((den.mass - 1.0).abs() < 1e-6);
        let vals = den.field.values().unwrap();
        let asym = (0..vals.len()).map(|k| (vals[k] - vals[vals.len() - 1 - k]).abs()).fold(0.0, f64::max);
        assert!(asym <= 1e-10);
    }

    #[test]
    fn insufficient_decay_refused() {
        let m = MehlerModel::gaussian_ou(1.0, 0.05);
        let grid = Grid::symmetric(&[50.0], &[101]).unwrap();
        assert!(matches!(mu_density_fft(&m, 0.01, &grid), Err(Error::InsufficientDecay { .. })));
    }

    #[test]
    fn mehler_eval_examples() {
        let m = MehlerModel::gaussian_ou(1.0, 1.0);
        let opts = DensityOptions::default();
        let one = mehler_eval(&m, 0.5, &ScalarField::constant(1.0).into(), &[0.3], &opts).unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        let zero_t = mehler_eval(&m, 0.0, &ScalarField::sin().into(), &[0.3], &opts).unwrap();
        assert_eq!(zero_t, 0.3f64.sin());
        let (x, t) = (2.0f64, 0.5f64);
        let v = crate::kernels::ou_variance(1.0, 1.0, t);
        let exact = (x * (-t).exp()).sin() * (-v / 2.0).exp();
        let by_density = mehler_eval(&m, t, &ScalarField::sin().into(), &[x], &opts).unwrap();
        let by_fourier = mehler_eval(&m, t, &SpectralMeasure::sin(&[1.0]).into(), &[x], &opts).unwrap();
        assert!((by_density - exact).abs() < 1e-8);
        assert!((by_fourier - exact).abs() < 1e-12);
    }

    #[test]
    fn lescot_examples() {
        let a = 0.9;
        let xi0 = 1.7;
        let nu = SpectralMeasure::cos(&[xi0]);
        let no_noise = MehlerModel::new(vec![-a], LevyTriplet::new(vec![0.0], vec![0.0], LevyMeasure::default()).unwrap()).unwrap();
        for x in [-1.0, 0.2, 2.5] {
            let l = lescot_generator(&no_noise, &nu, &[x]).unwrap();
            assert!((l - a * xi0 * x * (xi0 * x).sin()).abs() < 1e-12);
        }
        assert_eq!(lescot_generator(&no_noise, &SpectralMeasure::one(1), &[0.4]).unwrap(), 0.0);
        let asym = SpectralMeasure { atoms: vec![(vec![1.0], Complex64::new(1.0, 0.0))] };
        assert!(matches!(lescot_generator(&no_noise, &asym, &[0.0]), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn truncation_examples() {
        let p = poisson_at_one();
        for xi in [0.5, -2.0] {
            assert_eq!(truncated_exponent(&p, 0.5, &[xi]).unwrap(), levy_exponent(&p, &[xi]).unwrap());
        }
        let s = stable_half();
        assert_eq!(truncated_exponent(&s, 0.1, &[0.0]).unwrap(), Complex64::new(0.0, 0.0));
        let gap = |eps: f64| {
            (0..=20)
                .map(|k| -1.0 + 0.1 * k as f64)
                .map(|xi| (truncated_exponent(&s, eps, &[xi]).unwrap() - levy_exponent(&s, &[xi]).unwrap()).norm())
                .fold(0.0, f64::max)
        };
        let g: Vec<f64> = [0.5, 0.1, 0.02].iter().map(|e| gap(*e)).collect();
        assert!(g[0] > g[1] && g[1] > g[2], "{g:?}");
    }

    #[test]
    fn truncation_study_examples() {
        let opts = DensityOptions::default();
        let stable = MehlerModel::new(vec![-1.0], stable_half()).unwrap();
        let one: Observable = SpectralMeasure::one(1).into();
        let s = truncation_convergence_study(&stable, 1.0, &one, 2.0, &[0.5, 0.1], 11, &opts).unwrap();
        assert!(s.rows.iter().all(|r| r.gap <= 1e-10));
        // finite activity inside every annulus: the truncation changes nothing
        let g = LevyTriplet::new(vec![0.0], vec![0.5], poisson_at_one().m).unwrap();
        let fin = MehlerModel::new(vec![-1.0], g).unwrap();
        let nu: Observable = SpectralMeasure::cos(&[1.0]).into();
        let s = truncation_convergence_study(&fin, 1.0, &nu, 2.0, &[0.5, 0.1], 11, &opts).unwrap();
        assert!(s.rows.iter().all(|r| r.gap <= 1e-8), "{s:?}");
        let s = truncation_convergence_study(&stable, 1.0, &nu, 2.0, &[0.5, 0.1, 0.02], 11, &opts).unwrap();
        assert!(s.strictly_decreasing);
        assert!(s.rows.iter().all(|r| r.tightness_radius.is_some()));
    }

    #[test]
    fn tail_bound_for_a_gaussian() {
        // standard normal in the limit; the bound is about r (2/r)^3 / 6, loose but
        // above the true tail
        let m = MehlerModel::gaussian_ou(0.5, 1.0);
        let b = tail_bound(&m, 40.0, 4.0).unwrap();
        assert!((b - 4.0 * 0.5f64.powi(3) / 6.0).abs() < 5e-3 && b > 6.4e-5, "{b}");
        assert!(tail_bound(&m, 40.0, 8.0).unwrap() < 0.05);
        let r = tightness_radius(&m, 40.0, 0.05).unwrap().unwrap();
        assert!((2.0..=8.0).contains(&r), "{r}");
    }

    #[test]
    fn sampled_compound_poisson_moments() {
        // OU with symmetric +-1 jumps: mean 0, variance ∫_0^t e^{-2as}(sigma^2 + rate) ds.
        let law = JumpLaw::Atoms { points: vec![vec![1.0], vec![-1.0]], probs: vec![0.5, 0.5] };
        let tr = LevyTriplet::new(vec![0.0], vec![0.25], LevyMeasure { finite: Some(FiniteActivity { rate: 2.0, law }), density: None }).unwrap();
        let m = MehlerModel::new(vec![-1.0], tr).unwrap();
        let t = 0.8;
        let ys = sample_mu(&m, t, 100_000, &RngPolicy::new(1), 0).unwrap();
        let (mean, se) = crate::sde::mean_stderr(ys.iter().map(|y| y[0]));
        let (sq, se2) = crate::sde::mean_stderr(ys.iter().map(|y| y[0] * y[0]));
        let var = 2.25 * (1.0 - (-2.0 * t).exp()) / 2.0;
        assert!(mean.abs() < 3.0 * se);
        assert!((sq - var).abs() < 3.0 * se2, "{sq} vs {var}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn charfn_bounded_and_hermitian(t in 0.0f64..2.0, xi in -5.0f64..5.0) {
                let law = JumpLaw::Normal { mean: 0.4, sd: 0.3 };
                let tr = LevyTriplet::new(vec![0.2], vec![0.5], LevyMeasure { finite: Some(FiniteActivity { rate: 1.5, law }), density: None }).unwrap();
                let m = MehlerModel::new(vec![-0.7], tr).unwrap();
                let a = mu_charfn(&m, t, &[xi]).unwrap().value;
                let b = mu_charfn(&m, t, &[-xi]).unwrap().value;
                prop_assert!(a.norm() <= 1.0 + 1e-14);
                prop_assert!((b - a.conj()).norm() < 1e-12);
            }
        }
    }
}
