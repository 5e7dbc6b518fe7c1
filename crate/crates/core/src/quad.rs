//! Quadrature rules: Gauss–Hermite for Gaussian expectations,
//! Gauss–Legendre (plain and composite) and adaptive Gauss–Kronrod 7/15
//! for complex-valued integrands.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Nodes and weights for `E f(Z)`, `Z ~ N(0, 1)`; weights sum to one.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Hermite order must be positive");
        // Physicists' rule via Newton on the normalized recurrence.
        let n = order;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let pim4 = PI.powf(-0.25);
        let m = n.div_ceil(2);
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-0.16667),
                1 => z - 1.14 * (n as f64).powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j - 1) as f64 / j as f64).sqrt() * p3;
                }
                pp = (2.0 * n as f64).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        let total: f64 = w.iter().sum();
        let nodes = x.iter().rev().map(|v| v * std::f64::consts::SQRT_2).collect();
        let weights = w.iter().rev().map(|v| v / total).collect();
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `E f(mean + sd Z)`.
    pub fn expect(&self, mean: f64, sd: f64, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * f(mean + sd * z))
            .sum()
    }

    /// `E f(mean + L Z)` for a d-dimensional standard normal `Z` and lower
    /// triangular `chol` (row-major), via the tensor rule.
    pub fn expect_nd(&self, mean: &[f64], chol: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let d = mean.len();
        let n = self.order();
        let total = n.pow(d as u32);
        let mut idx = vec![0usize; d];
        let mut z = vec![0.0; d];
        let mut y = vec![0.0; d];
        let mut acc = 0.0;
        for k in 0..total {
            let mut r = k;
            let mut w = 1.0;
            for j in 0..d {
                idx[j] = r % n;
                r /= n;
                z[j] = self.nodes[idx[j]];
                w *= self.weights[idx[j]];
            }
            for i in 0..d {
                y[i] = mean[i] + (0..=i).map(|j| chol[i * d + j] * z[j]).sum::<f64>();
            }
            acc += w * f(&y);
        }
        acc
    }
}

/// Gauss–Legendre rule on [-1, 1].
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Legendre order must be positive");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut pp = 1.0;
            for _ in 0..100 {
                let mut p1 = 1.0;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
                }
                pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        Self { nodes, weights }
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        h * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(c + h * x))
            .sum::<f64>()
    }

    /// Composite rule with `panels` equal panels.
    pub fn composite(&self, a: f64, b: f64, panels: usize, f: impl Fn(f64) -> f64) -> f64 {
        let h = (b - a) / panels as f64;
        (0..panels)
            .map(|p| self.integrate(a + p as f64 * h, a + (p + 1) as f64 * h, &f))
            .sum()
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.0,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];

fn gk15(f: &impl Fn(f64) -> Complex64, a: f64, b: f64) -> (Complex64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += s * WGK[j];
        if j % 2 == 1 {
            gauss += s * WG[j / 2];
        }
    }
    let kron = kron * h;
    let gauss = gauss * h;
    (kron, (kron - gauss).norm())
}

/// Value and error estimate of an adaptive quadrature.
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveResult {
    pub value: Complex64,
    pub error: f64,
    pub evaluations: usize,
}

/// Globally adaptive Gauss–Kronrod 7/15 on `[a, b]`; bisects the interval
/// with the largest error estimate until `error <= max(abs_tol, rel_tol |I|)`.
pub fn integrate_adaptive(
    f: impl Fn(f64) -> Complex64,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Result<AdaptiveResult> {
    if a == b {
        return Ok(AdaptiveResult { value: Complex64::new(0.0, 0.0), error: 0.0, evaluations: 0 });
    }
    let mut parts = vec![{
        let (v, e) = gk15(&f, a, b);
        (a, b, v, e)
    }];
    let mut evals = 15;
    loop {
        let value: Complex64 = parts.iter().map(|p| p.2).sum();
        let error: f64 = parts.iter().map(|p| p.3).sum();
        if !value.re.is_finite() || !value.im.is_finite() {
            return Err(Error::Quadrature("non-finite integrand value".into()));
        }
        if error <= abs_tol.max(rel_tol * value.norm()) {
            return Ok(AdaptiveResult { value, error, evaluations: evals });
        }
        if parts.len() >= max_intervals {
            return Err(Error::Quadrature(format!(
                "error estimate {error:e} above tolerance after {max_intervals} intervals"
            )));
        }
        let (k, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("nonempty");
        let (lo, hi, _, _) = parts.swap_remove(k);
        let mid = 0.5 * (lo + hi);
        if !(mid > lo && mid < hi) {
            return Err(Error::Quadrature("interval bisection underflow".into()));
        }
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        evals += 30;
        parts.push((lo, mid, v1, e1));
        parts.push((mid, hi, v2, e2));
    }
}

/// Real-valued convenience wrapper around [`integrate_adaptive`].
pub fn integrate_real(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<(f64, f64)> {
    let r = integrate_adaptive(|x| Complex64::new(f(x), 0.0), a, b, abs_tol, rel_tol, 4000)?;
    Ok((r.value.re, r.error))
}

/// Lower Cholesky factor of a small symmetric positive semidefinite matrix
/// (row-major). Zero pivots are allowed (degenerate directions).
pub fn cholesky_psd(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                let scale = a[i * d + i].abs().max(1.0);
                if s < -1e-12 * scale {
                    return Err(Error::InvalidArgument("matrix is not positive semidefinite".into()));
                }
                l[i * d + i] = s.max(0.0).sqrt();
            } else if l[j * d + j] > 0.0 {
                l[i * d + j] = s / l[j * d + j];
            } else if s.abs() > 1e-12 {
                return Err(Error::InvalidArgument("matrix is not positive semidefinite".into()));
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments() {
        let gh = GaussHermite::new(20);
        let s: f64 = gh.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-14);
        assert!((gh.expect(0.0, 1.0, |z| z * z) - 1.0).abs() < 1e-12);
        assert!((gh.expect(0.0, 1.0, |z| z.powi(4)) - 3.0).abs() < 1e-11);
        // E cos(Z) = exp(-1/2)
        assert!((gh.expect(0.0, 1.0, f64::cos) - (-0.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn hermite_high_order_stable() {
        let gh = GaussHermite::new(120);
        assert!(gh.nodes.iter().all(|x| x.is_finite()));
        assert!((gh.expect(1.0, 2.0, |y| y * y) - 5.0).abs() < 1e-10);
    }

    #[test]
    fn hermite_nd_covariance() {
        let gh = GaussHermite::new(8);
        let cov = [2.0, 0.6, 0.6, 1.0];
        let l = cholesky_psd(&cov, 2).unwrap();
        let e = gh.expect_nd(&[0.5, -1.0], &l, |y| (y[0] - 0.5) * (y[1] + 1.0));
        assert!((e - 0.6).abs() < 1e-12);
    }

    #[test]
    fn legendre_polynomials_exact() {
        let gl = GaussLegendre::new(5);
        let v = gl.integrate(0.0, 2.0, |x| x.powi(9));
        assert!((v - 102.4).abs() < 1e-10);
        let c = gl.composite(0.0, PI, 10, f64::sin);
        assert!((c - 2.0).abs() < 1e-13);
    }

    #[test]
    fn adaptive_handles_sqrt_singularity() {
        let (v, e) = integrate_real(f64::sqrt, 0.0, 1.0, 1e-12, 1e-12).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-11, "{v} {e}");
    }

    #[test]
    fn adaptive_complex_exponential() {
        let r = integrate_adaptive(
            |x| Complex64::new(0.0, 3.0 * x).exp(),
            0.0,
            1.0,
            1e-13,
            1e-13,
            1000,
        )
        .unwrap();
        let exact = (Complex64::new(0.0, 3.0).exp() - 1.0) / Complex64::new(0.0, 3.0);
        assert!((r.value - exact).norm() < 1e-13);
    }

}
