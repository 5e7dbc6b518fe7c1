//! Weighted sup-norm, compact seminorms, the mixed seminorms built from a
//! compact exhaustion and a null sequence, and a sequential convergence
//! classifier (norm-boundedness plus uniform convergence on compacts).
//!
//! Closed-form fields are sampled on a lattice of configurable spacing;
//! sampled fields are read at their own nodes.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::statespace::{Compact, CompactExhaustion, ScalarField, TailEnvelope, Weight};

/// Lattice used to sample closed-form fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub dim: usize,
    pub step: f64,
}

impl Sampling {
    pub fn line(step: f64) -> Self {
        Self { dim: 1, step }
    }
}

impl Default for Sampling {
    fn default() -> Self {
        Self::line(1e-2)
    }
}

/// A supremum over a compact with a bound on what the discrete sampling may
/// have missed between nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SupValue {
    pub value: f64,
    pub error_bound: f64,
}

/// Weighted norm on a truncation ball, with the tail certificate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NormEstimate {
    pub value: f64,
    /// Bound of `kappa |phi|` outside the truncation ball, from the declared envelope.
    pub tail_bound: Option<f64>,
    /// True when the tail bound does not exceed `value`.
    pub certified: bool,
}

impl NormEstimate {
    /// `max(value, tail_bound)`; infinite without a tail bound.
    pub fn upper(&self) -> f64 {
        match self.tail_bound {
            Some(t) => self.value.max(t),
            None => f64::INFINITY,
        }
    }
}

/// Supremum of `|g|` over the lattice points of `c`.
pub fn sup_on_compact(
    g: impl Fn(&[f64]) -> Result<f64>,
    c: &Compact,
    grid_hint: Option<&crate::statespace::Grid>,
    sampling: Sampling,
) -> Result<SupValue> {
    let owned;
    let grid = match grid_hint {
        Some(g) => g,
        None => {
            owned = c.covering_grid(sampling.dim, sampling.step)?;
            &owned
        }
    };
    let d = grid.dim();
    let mut best = f64::NEG_INFINITY;
    let mut max_jump: f64 = 0.0;
    let mut inside_vals = vec![f64::NAN; grid.len()];
    for (k, slot) in inside_vals.iter_mut().enumerate() {
        let x = grid.node(k);
        if c.contains(&x) {
            let v = g(&x)?.abs();
            *slot = v;
            best = best.max(v);
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::EmptyIntersection);
    }
    // Largest jump between axis neighbours estimates the modulus of continuity.
    for k in 0..grid.len() {
        if inside_vals[k].is_nan() {
            continue;
        }
        let idx = grid.multi_index(k);
        for j in 0..d {
            if idx[j] + 1 < grid.counts()[j] {
                let mut nb = idx.clone();
                nb[j] += 1;
                let v = inside_vals[grid.flat_index(&nb)];
                if !v.is_nan() {
                    max_jump = max_jump.max((v - inside_vals[k]).abs());
                }
            }
        }
    }
    let error_bound = 0.5 * max_jump * (d as f64).sqrt();
    Ok(SupValue { value: best, error_bound })
}

fn weighted_eval<'a>(
    phi: &'a ScalarField,
    kappa: &'a Weight,
) -> impl Fn(&[f64]) -> Result<f64> + 'a {
    move |x| Ok(kappa.eval(x) * phi.eval(x)?)
}

/// `sup_{|x| <= R} kappa |phi|`, with the envelope tail bound beyond `R`.
pub fn weighted_norm(
    phi: &ScalarField,
    kappa: &Weight,
    truncation_radius: f64,
    sampling: Sampling,
) -> Result<NormEstimate> {
    if !(truncation_radius > 0.0) {
        return invalid("truncation radius must be positive");
    }
    let ball = Compact::ball(truncation_radius);
    let sup = sup_on_compact(weighted_eval(phi, kappa), &ball, phi.grid(), sampling)?;
    Ok(certify(sup.value, phi.envelope(), kappa, truncation_radius))
}

fn certify(value: f64, env: Option<TailEnvelope>, kappa: &Weight, radius: f64) -> NormEstimate {
    let tail_bound = env.and_then(|e| e.weighted_tail(kappa, radius));
    let certified = tail_bound.is_some_and(|t| t <= value);
    NormEstimate { value, tail_bound, certified }
}

/// `p_{kappa,C}(phi) = sup_{x in C} kappa(x) |phi(x)|`.
pub fn compact_seminorm(
    phi: &ScalarField,
    kappa: &Weight,
    c: &Compact,
    sampling: Sampling,
) -> Result<SupValue> {
    sup_on_compact(weighted_eval(phi, kappa), c, phi.grid(), sampling)
}

/// Positive null sequence `a_n`, stored as a rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Coefficients {
    /// `a_n = ratio^n`, `0 < ratio < 1`.
    Geometric { ratio: f64 },
    /// `a_n = 1/n`.
    Harmonic,
    /// Stored prefix, then `a_{N+k} = a_N * tail_ratio^k`.
    Explicit { values: Vec<f64>, tail_ratio: f64 },
}

impl Coefficients {
    fn validate(&self) -> Result<()> {
        match self {
            Coefficients::Geometric { ratio } if !(*ratio > 0.0 && *ratio < 1.0) => {
                invalid("geometric ratio must lie in (0, 1)")
            }
            Coefficients::Explicit { values, tail_ratio } => {
                if values.is_empty() || values.iter().any(|a| !(*a > 0.0)) {
                    return invalid("explicit coefficients must be positive");
                }
                if !(*tail_ratio > 0.0 && *tail_ratio < 1.0) {
                    return invalid("tail ratio must lie in (0, 1)");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `a_n`, one based.
    pub fn get(&self, n: usize) -> f64 {
        match self {
            Coefficients::Geometric { ratio } => ratio.powi(n as i32),
            Coefficients::Harmonic => 1.0 / n as f64,
            Coefficients::Explicit { values, tail_ratio } => {
                if n <= values.len() {
                    values[n - 1]
                } else {
                    values[values.len() - 1] * tail_ratio.powi((n - values.len()) as i32)
                }
            }
        }
    }

    /// `sup_{n > count} a_n`.
    pub fn tail_sup(&self, count: usize) -> f64 {
        match self {
            Coefficients::Explicit { .. } | Coefficients::Geometric { .. } | Coefficients::Harmonic => {
                self.get(count + 1)
            }
        }
    }
}

/// `p_{kappa,(C_n),(a_n)}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedSeminorm {
    pub exhaustion: CompactExhaustion,
    pub coefficients: Coefficients,
}

impl MixedSeminorm {
    pub fn new(exhaustion: CompactExhaustion, coefficients: Coefficients) -> Result<Self> {
        coefficients.validate()?;
        Ok(Self { exhaustion, coefficients })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixedValue {
    pub value: f64,
    /// One-based index achieving the supremum over the stored prefix.
    pub argmax: usize,
    /// Per-n terms `a_n p_{kappa,C_n}(phi)`.
    pub terms: Vec<f64>,
    /// Bound on terms beyond the stored exhaustion, `a_{N+1} ||phi||_kappa`.
    pub tail_bound: Option<f64>,
    pub certified: bool,
}

/// `sup_n a_n p_{kappa,C_n}(phi)` over the stored exhaustion; the remaining
/// terms are bounded by `a_{N+1} ||phi||_kappa`.
pub fn mixed_seminorm(
    phi: &ScalarField,
    kappa: &Weight,
    s: &MixedSeminorm,
    sampling: Sampling,
) -> Result<MixedValue> {
    let mut terms = Vec::with_capacity(s.exhaustion.len());
    for (n, c) in s.exhaustion.compacts().enumerate() {
        let p = compact_seminorm(phi, kappa, &c, sampling)?;
        terms.push(s.coefficients.get(n + 1) * p.value);
    }
    let (argmax, value) = terms
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let outer = s.exhaustion.largest().radius;
    let norm = if phi.is_sampled() {
        None
    } else {
        let est = weighted_norm(phi, kappa, outer, sampling)?;
        Some(est.upper()).filter(|u| u.is_finite())
    };
    let tail_bound = norm.map(|u| s.coefficients.tail_sup(s.exhaustion.len()) * u);
    let certified = tail_bound.is_some_and(|t| t <= value);
    Ok(MixedValue { value, argmax: argmax + 1, terms, tail_bound, certified })
}

/// `sup |w kappa phi|` on the truncation ball for a bounded nonnegative `w`
/// whose product with `kappa` vanishes at infinity.
pub fn weightclass_seminorm(
    phi: &ScalarField,
    kappa: &Weight,
    w: &ScalarField,
    truncation_radius: f64,
    sampling: Sampling,
) -> Result<NormEstimate> {
    let ball = Compact::ball(truncation_radius);
    let hint = phi.grid().or(w.grid());
    let sup = sup_on_compact(
        |x| Ok(w.eval(x)? * kappa.eval(x) * phi.eval(x)?),
        &ball,
        hint,
        sampling,
    )?;
    let env = match (phi.envelope(), w.envelope()) {
        (Some(a), Some(b)) => Some(TailEnvelope::new(a.degree + b.degree, a.constant * b.constant)),
        _ => None,
    };
    Ok(certify(sup.value, env, kappa, truncation_radius))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceOptions {
    /// Declared bound for `sup_n ||phi_n||_kappa`.
    pub norm_bound: f64,
    /// Truncation radius of the norm estimate.
    pub norm_radius: f64,
    /// Fraction of the prefix (at its end) that must lie within `tol` on every compact.
    pub tail_fraction: f64,
    pub sampling: Sampling,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        Self { norm_bound: 10.0, norm_radius: 100.0, tail_fraction: 0.25, sampling: Sampling::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Converges,
    Diverges,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceVerdict {
    pub norm_bounded: bool,
    /// `sup_n ||phi_n||_kappa` over the prefix.
    pub norm_sup: f64,
    pub norm_trace: Vec<f64>,
    pub compact_uniform: bool,
    /// `deviation[k][n] = sup_{C_k} kappa |phi_n - phi|`.
    pub deviation: Vec<Vec<f64>>,
    pub verdict: Verdict,
    pub failure: Option<String>,
}

/// Judges a finite prefix of a sequence against the sequential
/// characterization: norm-bounded and uniformly convergent on each compact.
pub fn classify_convergence(
    sequence: &[ScalarField],
    limit: &ScalarField,
    kappa: &Weight,
    exhaustion: &CompactExhaustion,
    tol: f64,
    opts: &ConvergenceOptions,
) -> Result<ConvergenceVerdict> {
    if !(tol > 0.0) {
        return invalid("tolerance must be positive");
    }
    if sequence.is_empty() {
        return invalid("sequence must be nonempty");
    }
    let mut norm_trace = Vec::with_capacity(sequence.len());
    for phi in sequence {
        norm_trace.push(weighted_norm(phi, kappa, opts.norm_radius, opts.sampling)?.value);
    }
    let norm_sup = norm_trace.iter().copied().fold(0.0, f64::max);
    let norm_bounded = norm_sup <= opts.norm_bound;

    let n = sequence.len();
    let tail_len = ((n as f64 * opts.tail_fraction).ceil() as usize).clamp(1, n);
    let mut deviation = Vec::with_capacity(exhaustion.len());
    let mut compact_uniform = true;
    let mut worst: Option<(usize, f64)> = None;
    for (k, c) in exhaustion.compacts().enumerate() {
        let mut row = Vec::with_capacity(n);
        for phi in sequence {
            let dev = sup_on_compact(
                |x| Ok(kappa.eval(x) * (phi.eval(x)? - limit.eval(x)?)),
                &c,
                phi.grid(),
                opts.sampling,
            )?;
            row.push(dev.value);
        }
        let tail_max = row[n - tail_len..].iter().copied().fold(0.0, f64::max);
        if tail_max > tol {
            compact_uniform = false;
            if worst.is_none_or(|w| tail_max > w.1) {
                worst = Some((k, tail_max));
            }
        }
        deviation.push(row);
    }
    let failure = match (norm_bounded, compact_uniform) {
        (true, true) => None,
        (false, _) => Some(format!(
            "norm not bounded: sup ||phi_n|| = {norm_sup} exceeds declared bound {}",
            opts.norm_bound
        )),
        (true, false) => {
            let (k, v) = worst.expect("a failing compact");
            Some(format!(
                "not uniform on compact {} (radius {}): tail deviation {v} > tol {tol}",
                k + 1,
                exhaustion.radii()[k]
            ))
        }
    };
    let verdict = if norm_bounded && compact_uniform { Verdict::Converges } else { Verdict::Diverges };
    Ok(ConvergenceVerdict {
        norm_bounded,
        norm_sup,
        norm_trace,
        compact_uniform,
        deviation,
        verdict,
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::{make_exhaustion, CompactShape, Grid};
    use std::f64::consts::PI;

    fn near(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn weighted_norm_examples() {
        let s = Sampling::line(0.01);
        let one = weighted_norm(&ScalarField::constant(1.0), &Weight::Polynomial { m: 2.0 }, 10.0, s).unwrap();
        assert_eq!(one.value, 1.0);
        let sq = weighted_norm(&ScalarField::square(), &Weight::Polynomial { m: 2.0 }, 100.0, s).unwrap();
        assert!(sq.value > 0.9999 && sq.value <= 1.0, "{}", sq.value);
        let z = weighted_norm(&ScalarField::zero(), &Weight::Polynomial { m: 1.0 }, 5.0, s).unwrap();
        assert_eq!(z.value, 0.0);
    }

    #[test]
    fn norm_certification() {
        let s = Sampling::line(0.01);
        let sin = weighted_norm(&ScalarField::sin(), &Weight::Polynomial { m: 2.0 }, 10.0, s).unwrap();
        assert!(sin.certified);
        let x = weighted_norm(&ScalarField::coordinate(0), &Weight::Unit, 10.0, s).unwrap();
        assert!(!x.certified && x.tail_bound.is_none());
        let uncertified = weighted_norm(&ScalarField::closed(|x| x[0].cos()), &Weight::Unit, 10.0, s).unwrap();
        assert!(!uncertified.certified);
    }

    #[test]
    fn compact_seminorm_examples() {
        let s = Sampling::line(0.01);
        let a = compact_seminorm(&ScalarField::abs(), &Weight::Unit, &Compact::ball(2.0), s).unwrap();
        assert_eq!(a.value, 2.0);
        let c = compact_seminorm(&ScalarField::constant(-3.5), &Weight::Unit, &Compact::ball(7.0), s).unwrap();
        assert_eq!(c.value, 3.5);
        let sn = compact_seminorm(&ScalarField::sin(), &Weight::Unit, &Compact::ball(PI / 2.0), s).unwrap();
        assert!(near(sn.value, 1.0, 1e-15));
    }

    #[test]
    fn empty_intersection_is_an_error() {
        let g = Grid::uniform_1d(5.0, 6.0, 11).unwrap();
        let f = ScalarField::tabulate(&g, |x| x[0]);
        let r = compact_seminorm(&f, &Weight::Unit, &Compact::ball(1.0), Sampling::default());
        assert!(matches!(r, Err(Error::EmptyIntersection)));
    }

    #[test]
    fn mixed_seminorm_examples() {
        let s = Sampling::line(0.01);
        let ex = CompactExhaustion::from_radii((1..=8).map(f64::from).collect(), CompactShape::Ball).unwrap();
        let geo = MixedSeminorm::new(ex.clone(), Coefficients::Geometric { ratio: 0.5 }).unwrap();
        let z = mixed_seminorm(&ScalarField::zero(), &Weight::Unit, &geo, s).unwrap();
        assert_eq!(z.value, 0.0);
        let one = mixed_seminorm(&ScalarField::constant(1.0), &Weight::Unit, &geo, s).unwrap();
        assert_eq!((one.value, one.argmax), (0.5, 1));
        assert!(one.certified);
        let harm = MixedSeminorm::new(ex, Coefficients::Harmonic).unwrap();
        let abs = mixed_seminorm(&ScalarField::abs(), &Weight::Unit, &harm, s).unwrap();
        assert!(near(abs.value, 1.0, 1e-12));
        assert!(abs.terms.iter().all(|t| near(*t, 1.0, 1e-12)));
    }

    #[test]
    fn weightclass_examples() {
        let s = Sampling::line(0.001);
        let w = ScalarField::closed(|x| (-x[0] * x[0]).exp()).with_envelope(-4.0, 6.0);
        let zero_w = ScalarField::zero();
        let r0 = weightclass_seminorm(&ScalarField::sin(), &Weight::Unit, &zero_w, 10.0, s).unwrap();
        assert_eq!(r0.value, 0.0);
        let r1 = weightclass_seminorm(&ScalarField::constant(1.0), &Weight::Unit, &w, 10.0, s).unwrap();
        assert_eq!(r1.value, 1.0);
        // sup |x e^{-x^2}| at x = 1/sqrt(2)
        let exact = (-0.5f64).exp() / 2f64.sqrt();
        let r2 = weightclass_seminorm(&ScalarField::coordinate(0), &Weight::Unit, &w, 10.0, s).unwrap();
        assert!(near(r2.value, exact, 1e-6), "{} vs {exact}", r2.value);
        assert!(near(exact, 0.42888, 1e-5));
        assert!(r2.certified);
    }

    fn seq(f: impl Fn(usize) -> ScalarField, n: usize) -> Vec<ScalarField> {
        (1..=n).map(f).collect()
    }

    #[test]
    fn classify_examples() {
        let ex = make_exhaustion(1.25, 2.0, 3).unwrap(); // radii 1.25, 2.5, 5
        let opts = ConvergenceOptions { norm_bound: 2.0, norm_radius: 60.0, ..Default::default() };
        let constant = seq(|_| ScalarField::cos(), 10);
        let v = classify_convergence(&constant, &ScalarField::cos(), &Weight::Unit, &ex, 1e-9, &opts).unwrap();
        assert_eq!(v.verdict, Verdict::Converges);

        let shrink = seq(|n| ScalarField::closed(move |x| (x[0] / n as f64).sin()).with_envelope(0.0, 1.0), 50);
        let v = classify_convergence(&shrink, &ScalarField::zero(), &Weight::Unit, &ex, 0.2, &opts).unwrap();
        assert_eq!(v.verdict, Verdict::Converges, "{:?}", v.failure);

        let bump = seq(
            |n| {
                let c = n as f64;
                ScalarField::closed(move |x| c * (-(x[0] - c).powi(2)).exp())
            },
            50,
        );
        let v = classify_convergence(&bump, &ScalarField::zero(), &Weight::Unit, &ex, 0.2, &opts).unwrap();
        assert_eq!(v.verdict, Verdict::Diverges);
        assert!(!v.norm_bounded && v.compact_uniform);
        assert!(near(v.norm_sup, 50.0, 1e-9));

        let osc = seq(|n| ScalarField::closed(move |x| (n as f64 * x[0]).sin()), 50);
        let v = classify_convergence(&osc, &ScalarField::zero(), &Weight::Unit, &ex, 0.2, &opts).unwrap();
        assert_eq!(v.verdict, Verdict::Diverges);
        assert!(v.norm_bounded && !v.compact_uniform);
    }

    #[test]
    fn explicit_tolerance_bound_for_shrinking_sines() {
        // converges for every tol >= 2R/N
        let ex = make_exhaustion(1.25, 2.0, 3).unwrap();
        let r = 5.0;
        for n in [8usize, 20, 50] {
            let s = seq(|k| ScalarField::closed(move |x| (x[0] / k as f64).sin()), n);
            let tol = 2.0 * r / n as f64;
            let opts = ConvergenceOptions { norm_bound: 1.0, norm_radius: 20.0, ..Default::default() };
            let v = classify_convergence(&s, &ScalarField::zero(), &Weight::Unit, &ex, tol, &opts).unwrap();
            assert_eq!(v.verdict, Verdict::Converges, "N = {n}");
        }
    }

    #[test]
    fn rejects_bad_tolerance() {
        let ex = make_exhaustion(1.0, 2.0, 2).unwrap();
        let r = classify_convergence(&[ScalarField::zero()], &ScalarField::zero(), &Weight::Unit, &ex, 0.0, &Default::default());
        assert!(r.is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn trig(a: f64, b: f64, c: f64) -> ScalarField {
            ScalarField::closed(move |x| a * (b * x[0]).sin() + c * (x[0] / 3.0).cos()).with_envelope(0.0, a.abs() + c.abs())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn mixed_bounded_by_weighted_norm(a in -3.0f64..3.0, b in 0.1f64..4.0, c in -2.0f64..2.0, m in 0.0f64..3.0) {
                let s = Sampling::line(0.05);
                let phi = trig(a, b, c);
                let kappa = Weight::Polynomial { m };
                let ex = make_exhaustion(0.5, 2.0, 5).unwrap();
                let ms = MixedSeminorm::new(ex.clone(), Coefficients::Geometric { ratio: 0.7 }).unwrap();
                let mv = mixed_seminorm(&phi, &kappa, &ms, s).unwrap();
                let wn = weighted_norm(&phi, &kappa, ex.largest().radius, s).unwrap();
                prop_assert!(mv.value <= 0.7 * wn.value + 1e-12);
            }

            #[test]
            fn compact_seminorm_monotone_in_compact(a in -3.0f64..3.0, b in 0.1f64..4.0, r in 0.1f64..5.0, dr in 0.0f64..5.0) {
                let s = Sampling::line(0.05);
                let phi = trig(a, b, 1.0);
                let small = compact_seminorm(&phi, &Weight::Unit, &Compact::boxed(r), s).unwrap();
                // the larger compact is sampled on its own lattice; compare with the sampling slack
                let large = compact_seminorm(&phi, &Weight::Unit, &Compact::boxed(r + dr), s).unwrap();
                prop_assert!(small.value <= large.value + large.error_bound + 1e-12);
            }

            #[test]
            fn seminorms_homogeneous_and_subadditive(a in -3.0f64..3.0, b in 0.1f64..4.0, c in -2.0f64..2.0, t in -4.0f64..4.0) {
                let s = Sampling::line(0.05);
                let g = Grid::uniform_1d(-6.0, 6.0, 241).unwrap();
                let phi = ScalarField::tabulate(&g, |x| a * (b * x[0]).sin());
                let psi = ScalarField::tabulate(&g, |x| c * (x[0] / 3.0).cos() + 0.1 * x[0]);
                let kappa = Weight::Polynomial { m: 1.0 };
                let ex = make_exhaustion(1.0, 2.0, 3).unwrap();
                let ms = MixedSeminorm::new(ex, Coefficients::Geometric { ratio: 0.5 }).unwrap();
                let c0 = Compact::ball(4.0);
                let p = |f: &ScalarField| compact_seminorm(f, &kappa, &c0, s).unwrap().value;
                let q = |f: &ScalarField| mixed_seminorm(f, &kappa, &ms, s).unwrap().value;
                let n = |f: &ScalarField| weighted_norm(f, &kappa, 6.0, s).unwrap().value;
                let scaled = phi.combine(t, &phi, 0.0).unwrap();
                let sum = phi.combine(1.0, &psi, 1.0).unwrap();
                for f in [&p as &dyn Fn(&ScalarField) -> f64, &q, &n] {
                    prop_assert!((f(&scaled) - t.abs() * f(&phi)).abs() <= 1e-12 * (1.0 + f(&phi)));
                    prop_assert!(f(&sum) <= f(&phi) + f(&psi) + 1e-12);
                }
            }
        }
    }
}
