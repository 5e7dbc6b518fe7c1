//! State-space primitives: lattices on R^d, polynomial weights, scalar
//! fields (closed form or sampled), compact exhaustions and the seed
//! derivation used by every Monte Carlo routine.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest supported state-space dimension.
pub const MAX_DIM: usize = 3;

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Axis-aligned lattice on a box in R^d, d <= 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    counts: Vec<usize>,
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        let d = lower.len();
        if d == 0 || d > MAX_DIM {
            return invalid(format!("grid dimension must be in 1..={MAX_DIM}, got {d}"));
        }
        if upper.len() != d || counts.len() != d {
            return invalid("grid bounds and counts must have equal length");
        }
        for j in 0..d {
            if !(lower[j] < upper[j]) || !lower[j].is_finite() || !upper[j].is_finite() {
                return invalid(format!("axis {j}: need finite lower < upper"));
            }
            if counts[j] < 2 {
                return invalid(format!("axis {j}: at least two nodes required"));
            }
        }
        Ok(Self { lower, upper, counts })
    }

    /// Lattice with the given spacing; the upper bound is moved down onto the
    /// last whole step.
    pub fn with_step(lower: Vec<f64>, upper: Vec<f64>, step: Vec<f64>) -> Result<Self> {
        if step.len() != lower.len() || upper.len() != lower.len() {
            return invalid("grid bounds and steps must have equal length");
        }
        let mut counts = Vec::with_capacity(step.len());
        let mut top = Vec::with_capacity(step.len());
        for j in 0..step.len() {
            if !(step[j] > 0.0) {
                return invalid(format!("axis {j}: step must be positive"));
            }
            let cells = ((upper[j] - lower[j]) / step[j] + 1e-9).floor();
            if cells < 1.0 {
                return invalid(format!("axis {j}: step exceeds the axis length"));
            }
            counts.push(cells as usize + 1);
            top.push(lower[j] + cells * step[j]);
        }
        Self::new(lower, top, counts)
    }

    pub fn uniform_1d(lower: f64, upper: f64, count: usize) -> Result<Self> {
        Self::new(vec![lower], vec![upper], vec![count])
    }

    /// Grid symmetric about the origin: `[-half_width, half_width]` per axis.
    pub fn symmetric(half_width: &[f64], counts: &[usize]) -> Result<Self> {
        Self::new(
            half_width.iter().map(|h| -h).collect(),
            half_width.to_vec(),
            counts.to_vec(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.counts[axis] - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinate of node `i` on `axis`. The last node is exactly `upper`.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.counts[axis] {
            self.upper[axis]
        } else {
            self.lower[axis] + i as f64 * self.step(axis)
        }
    }

    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        (0..self.counts[axis]).map(|i| self.coord(axis, i)).collect()
    }

    /// Row-major flat index (axis 0 slowest).
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.counts)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for j in (0..self.dim()).rev() {
            idx[j] = flat % self.counts[j];
            flat /= self.counts[j];
        }
        idx
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(j, &i)| self.coord(j, i))
            .collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |k| self.node(k))
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && (0..self.dim()).all(|j| {
                let slack = 1e-12 * (self.upper[j] - self.lower[j]);
                x[j] >= self.lower[j] - slack && x[j] <= self.upper[j] + slack
            })
    }

    /// Per-axis (cell index, fraction) pairs; a fraction of exactly zero marks
    /// a query that sits on a node.
    fn locate(&self, x: &[f64], clamp: bool) -> Option<Vec<(usize, f64)>> {
        let mut out = Vec::with_capacity(self.dim());
        for j in 0..self.dim() {
            let n = self.counts[j];
            let mut xj = x[j];
            if clamp {
                xj = xj.clamp(self.lower[j], self.upper[j]);
            } else if !self.contains(x) {
                return None;
            }
            let h = self.step(j);
            let t = (xj - self.lower[j]) / h;
            let r = t.round();
            if r >= 0.0 && (r as usize) < n && self.coord(j, r as usize) == xj {
                out.push((r as usize, 0.0));
                continue;
            }
            let i = (t.floor().max(0.0) as usize).min(n - 2);
            let frac = ((xj - self.coord(j, i)) / h).clamp(0.0, 1.0);
            out.push((i, frac));
        }
        Some(out)
    }

    fn interpolate(&self, values: &[f64], cell: &[(usize, f64)]) -> f64 {
        let d = self.dim();
        let mut idx = vec![0usize; d];
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut skip = false;
            for j in 0..d {
                let (i, f) = cell[j];
                let up = corner >> j & 1 == 1;
                if up {
                    if f == 0.0 {
                        skip = true;
                        break;
                    }
                    w *= f;
                    idx[j] = i + 1;
                } else {
                    w *= 1.0 - f;
                    idx[j] = i;
                }
            }
            if skip || w == 0.0 {
                continue;
            }
            acc += w * values[self.flat_index(&idx)];
        }
        acc
    }
}

/// Weight function on the state space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weight {
    Unit,
    /// `(1 + |x|^m)^{-1}`.
    Polynomial { m: f64 },
}

impl Weight {
    pub fn polynomial(m: f64) -> Result<Self> {
        if !(m >= 0.0) || !m.is_finite() {
            return invalid("polynomial weight exponent must be a nonnegative real");
        }
        Ok(Weight::Polynomial { m })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Weight::Unit => 1.0,
            Weight::Polynomial { m } => 1.0 / (1.0 + norm(x).powf(m)),
        }
    }

    /// `1 / kappa(x)`.
    pub fn inverse(&self, x: &[f64]) -> f64 {
        match *self {
            Weight::Unit => 1.0,
            Weight::Polynomial { m } => 1.0 + norm(x).powf(m),
        }
    }

    /// Growth exponent of `1/kappa`; zero for the unit weight.
    pub fn exponent(&self) -> f64 {
        match *self {
            Weight::Unit => 0.0,
            Weight::Polynomial { m } => m,
        }
    }
}

pub fn weight_eval(w: &Weight, x: &[f64]) -> f64 {
    w.eval(x)
}

/// Declared bound `|phi(x)| <= constant * (1 + |x|)^degree` for all x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEnvelope {
    pub degree: f64,
    pub constant: f64,
}

impl TailEnvelope {
    pub fn new(degree: f64, constant: f64) -> Self {
        Self { degree, constant }
    }

    /// Upper bound of `kappa |phi|` on `{|x| >= radius}`, when the weight
    /// dominates the envelope. `None` if it does not.
    pub fn weighted_tail(&self, kappa: &Weight, radius: f64) -> Option<f64> {
        let m = kappa.exponent();
        if self.degree > m {
            return None;
        }
        let r = radius.max(1.0);
        Some(self.constant * (1.0 + r).powf(self.degree) * kappa.eval(&[r]))
    }
}

type EvalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
/// Fills `grad` (length d) and `hess` (row-major d x d) at a point.
pub type DerivFn = dyn Fn(&[f64], &mut [f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
enum FieldRepr {
    Closed(Arc<EvalFn>),
    Sampled { grid: Grid, values: Arc<Vec<f64>> },
}

/// Real-valued function on R^d.
#[derive(Clone)]
pub struct ScalarField {
    repr: FieldRepr,
    envelope: Option<TailEnvelope>,
    derivatives: Option<Arc<DerivFn>>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.repr {
            FieldRepr::Closed(_) => write!(f, "ScalarField::Closed")?,
            FieldRepr::Sampled { grid, .. } => write!(f, "ScalarField::Sampled({:?})", grid.counts())?,
        }
        if let Some(e) = self.envelope {
            write!(f, " envelope={e:?}")?;
        }
        Ok(())
    }
}

impl ScalarField {
    pub fn closed(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            repr: FieldRepr::Closed(Arc::new(f)),
            envelope: None,
            derivatives: None,
        }
    }

    pub fn sampled(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return invalid(format!(
                "sample count {} does not match grid size {}",
                values.len(),
                grid.len()
            ));
        }
        Ok(Self {
            repr: FieldRepr::Sampled { grid, values: Arc::new(values) },
            envelope: None,
            derivatives: None,
        })
    }

    /// Samples `f` at every node of `grid`.
    pub fn tabulate(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = grid.nodes().map(|x| f(&x)).collect();
        Self {
            repr: FieldRepr::Sampled { grid: grid.clone(), values: Arc::new(values) },
            envelope: None,
            derivatives: None,
        }
    }

    pub fn with_envelope(mut self, degree: f64, constant: f64) -> Self {
        self.envelope = Some(TailEnvelope::new(degree, constant));
        self
    }

    pub fn with_derivatives(
        mut self,
        d: impl Fn(&[f64], &mut [f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.derivatives = Some(Arc::new(d));
        self
    }

    pub fn constant(c: f64) -> Self {
        Self::closed(move |_| c)
            .with_envelope(0.0, c.abs())
            .with_derivatives(|_, g, h| {
                g.fill(0.0);
                h.fill(0.0);
            })
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    /// `sin(x_0)`.
    pub fn sin() -> Self {
        Self::closed(|x| x[0].sin())
            .with_envelope(0.0, 1.0)
            .with_derivatives(|x, g, h| first_axis(g, h, x[0].cos(), -x[0].sin()))
    }

    /// `cos(x_0)`.
    pub fn cos() -> Self {
        Self::closed(|x| x[0].cos())
            .with_envelope(0.0, 1.0)
            .with_derivatives(|x, g, h| first_axis(g, h, -x[0].sin(), -x[0].cos()))
    }

    /// `cos(freq x_0)`.
    pub fn cos_freq(freq: f64) -> Self {
        Self::closed(move |x| (freq * x[0]).cos())
            .with_envelope(0.0, 1.0)
            .with_derivatives(move |x, g, h| {
                let s = (freq * x[0]).sin();
                let c = (freq * x[0]).cos();
                first_axis(g, h, -freq * s, -freq * freq * c)
            })
    }

    /// The coordinate function `x_j`.
    pub fn coordinate(j: usize) -> Self {
        Self::closed(move |x| x[j])
            .with_envelope(1.0, 1.0)
            .with_derivatives(move |_, g, h| {
                g.fill(0.0);
                h.fill(0.0);
                g[j] = 1.0;
            })
    }

    /// `x_0^2`.
    pub fn square() -> Self {
        Self::closed(|x| x[0] * x[0])
            .with_envelope(2.0, 1.0)
            .with_derivatives(|x, g, h| first_axis(g, h, 2.0 * x[0], 2.0))
    }

    /// `|x|`.
    pub fn abs() -> Self {
        Self::closed(norm).with_envelope(1.0, 1.0)
    }

    /// `exp(-x_0^2)`.
    pub fn gaussian_bump() -> Self {
        Self::closed(|x| (-x[0] * x[0]).exp())
            .with_envelope(0.0, 1.0)
            .with_derivatives(|x, g, h| {
                let e = (-x[0] * x[0]).exp();
                first_axis(g, h, -2.0 * x[0] * e, (4.0 * x[0] * x[0] - 2.0) * e)
            })
    }

    pub fn is_sampled(&self) -> bool {
        matches!(self.repr, FieldRepr::Sampled { .. })
    }

    pub fn grid(&self) -> Option<&Grid> {
        match &self.repr {
            FieldRepr::Sampled { grid, .. } => Some(grid),
            FieldRepr::Closed(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match &self.repr {
            FieldRepr::Sampled { values, .. } => Some(values),
            FieldRepr::Closed(_) => None,
        }
    }

    pub fn envelope(&self) -> Option<TailEnvelope> {
        self.envelope
    }

    pub fn has_derivatives(&self) -> bool {
        self.derivatives.is_some()
    }

    /// Evaluates the field; sampled fields refuse to extrapolate.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match &self.repr {
            FieldRepr::Closed(f) => Ok(f(x)),
            FieldRepr::Sampled { grid, values } => {
                let cell = grid
                    .locate(x, false)
                    .ok_or_else(|| Error::OutOfHull { point: x.to_vec() })?;
                Ok(grid.interpolate(values, &cell))
            }
        }
    }

    /// Evaluation with queries outside a sampled grid clamped onto its hull
    /// (constant extension). Closed forms are evaluated exactly.
    pub fn eval_clamped(&self, x: &[f64]) -> f64 {
        match &self.repr {
            FieldRepr::Closed(f) => f(x),
            FieldRepr::Sampled { grid, values } => {
                let cell = grid.locate(x, true).expect("clamped lookup");
                grid.interpolate(values, &cell)
            }
        }
    }

    /// Analytic gradient and Hessian, when declared.
    pub fn derivatives(&self, x: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = x.len();
        self.derivatives.as_ref().map(|f| {
            let mut g = vec![0.0; d];
            let mut h = vec![0.0; d * d];
            f(x, &mut g, &mut h);
            (g, h)
        })
    }

    /// Writes the analytic gradient and Hessian into caller buffers;
    /// `false` if the field declares none.
    pub fn derivatives_into(&self, x: &[f64], g: &mut [f64], h: &mut [f64]) -> bool {
        match &self.derivatives {
            Some(f) => {
                f(x, g, h);
                true
            }
            None => false,
        }
    }

    /// `alpha * self + beta * other`. Closed forms combine with closed forms,
    /// sampled fields only with fields on the identical grid.
    pub fn combine(&self, alpha: f64, other: &ScalarField, beta: f64) -> Result<ScalarField> {
        let envelope = match (self.envelope, other.envelope) {
            (Some(a), Some(b)) => Some(TailEnvelope::new(
                a.degree.max(b.degree),
                alpha.abs() * a.constant + beta.abs() * b.constant,
            )),
            _ => None,
        };
        let mut out = match (&self.repr, &other.repr) {
            (FieldRepr::Closed(f), FieldRepr::Closed(g)) => {
                let (f, g) = (f.clone(), g.clone());
                ScalarField::closed(move |x| alpha * f(x) + beta * g(x))
            }
            (FieldRepr::Sampled { grid: ga, values: va }, FieldRepr::Sampled { grid: gb, values: vb })
                if ga == gb =>
            {
                let v = va.iter().zip(vb.iter()).map(|(a, b)| alpha * a + beta * b).collect();
                ScalarField::sampled(ga.clone(), v)?
            }
            _ => return invalid("cannot combine fields with different representations"),
        };
        out.envelope = envelope;
        if let (Some(df), Some(dg)) = (&self.derivatives, &other.derivatives) {
            let (df, dg) = (df.clone(), dg.clone());
            out.derivatives = Some(Arc::new(move |x: &[f64], g: &mut [f64], h: &mut [f64]| {
                let mut g2 = vec![0.0; g.len()];
                let mut h2 = vec![0.0; h.len()];
                df(x, g, h);
                dg(x, &mut g2, &mut h2);
                for (a, b) in g.iter_mut().zip(&g2) {
                    *a = alpha * *a + beta * b;
                }
                for (a, b) in h.iter_mut().zip(&h2) {
                    *a = alpha * *a + beta * b;
                }
            }));
        }
        Ok(out)
    }
}

fn first_axis(g: &mut [f64], h: &mut [f64], d1: f64, d2: f64) {
    g.fill(0.0);
    h.fill(0.0);
    g[0] = d1;
    h[0] = d2;
}

pub fn field_eval(phi: &ScalarField, x: &[f64]) -> Result<f64> {
    phi.eval(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompactShape {
    Ball,
    Box,
}

/// Centered closed ball or box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Compact {
    pub radius: f64,
    pub shape: CompactShape,
}

impl Compact {
    pub fn ball(radius: f64) -> Self {
        Self { radius, shape: CompactShape::Ball }
    }

    pub fn boxed(radius: f64) -> Self {
        Self { radius, shape: CompactShape::Box }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let slack = 1e-12 * self.radius.max(1.0);
        match self.shape {
            CompactShape::Ball => norm(x) <= self.radius + slack,
            CompactShape::Box => x.iter().all(|v| v.abs() <= self.radius + slack),
        }
    }

    /// Lattice covering the bounding box of the compact with the given step;
    /// the box endpoints are always nodes.
    pub fn covering_grid(&self, dim: usize, step: f64) -> Result<Grid> {
        if !(step > 0.0) {
            return invalid("step must be positive");
        }
        let n = ((2.0 * self.radius / step).ceil() as usize).max(1) + 1;
        Grid::symmetric(&vec![self.radius; dim], &vec![n; dim])
    }
}

/// Nested compacts `C_1 ⊂ C_2 ⊂ ...` given by strictly increasing radii.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactExhaustion {
    radii: Vec<f64>,
    shape: CompactShape,
}

impl CompactExhaustion {
    pub fn from_radii(radii: Vec<f64>, shape: CompactShape) -> Result<Self> {
        if radii.is_empty() {
            return invalid("exhaustion needs at least one radius");
        }
        if !(radii[0] > 0.0) || radii.windows(2).any(|w| !(w[0] < w[1])) {
            return invalid("exhaustion radii must be positive and strictly increasing");
        }
        Ok(Self { radii, shape })
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn shape(&self) -> CompactShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    /// The `n`-th compact, zero based.
    pub fn compact(&self, n: usize) -> Compact {
        Compact { radius: self.radii[n], shape: self.shape }
    }

    pub fn compacts(&self) -> impl Iterator<Item = Compact> + '_ {
        (0..self.len()).map(move |n| self.compact(n))
    }

    pub fn largest(&self) -> Compact {
        self.compact(self.len() - 1)
    }
}

/// Balls of radii `r0 * ratio^(n-1)`, `n = 1..=count`.
pub fn make_exhaustion(r0: f64, ratio: f64, count: usize) -> Result<CompactExhaustion> {
    if !(r0 > 0.0) {
        return invalid("initial radius must be positive");
    }
    if !(ratio > 1.0) {
        return invalid("ratio must exceed 1");
    }
    if count == 0 {
        return invalid("count must be at least 1");
    }
    let radii = (0..count).map(|n| r0 * ratio.powi(n as i32)).collect();
    CompactExhaustion::from_radii(radii, CompactShape::Ball)
}

/// Deterministic randomness policy: one master seed, counter-derived
/// substreams per (stream, particle).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPolicy {
    pub master_seed: u64,
}

// splitmix64 finalizer; a bijection on u64.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngPolicy {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// `mix(((stream << 32) | particle) ^ mix(master))`. Both maps are
    /// bijections, so distinct (stream, particle) pairs never collide.
    pub fn derive_seed(&self, stream_id: u32, particle_id: u32) -> u64 {
        let key = (u64::from(stream_id) << 32) | u64::from(particle_id);
        mix64(key ^ mix64(self.master_seed))
    }

    pub fn rng(&self, stream_id: u32, particle_id: u32) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive_seed(stream_id, particle_id))
    }
}

pub fn derive_seed(policy: &RngPolicy, stream_id: u32, particle_id: u32) -> u64 {
    policy.derive_seed(stream_id, particle_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::f64::consts::PI;

    #[test]
    fn weight_examples() {
        assert_eq!(weight_eval(&Weight::Unit, &[123.0]), 1.0);
        assert_eq!(weight_eval(&Weight::Polynomial { m: 2.0 }, &[1.0]), 0.5);
        assert_eq!(weight_eval(&Weight::Polynomial { m: 1.0 }, &[3.0]), 0.25);
        assert!(Weight::polynomial(-1.0).is_err());
    }

    #[test]
    fn exhaustion_examples() {
        assert_eq!(make_exhaustion(1.0, 2.0, 3).unwrap().radii(), &[1.0, 2.0, 4.0]);
        assert_eq!(make_exhaustion(1.0, 2.0, 1).unwrap().radii(), &[1.0]);
        assert_eq!(make_exhaustion(0.5, 1.5, 2).unwrap().radii(), &[0.5, 0.75]);
        assert!(make_exhaustion(0.0, 2.0, 3).is_err());
        assert!(make_exhaustion(1.0, 1.0, 3).is_err());
        assert!(CompactExhaustion::from_radii(vec![2.0, 1.0], CompactShape::Ball).is_err());
    }

    #[test]
    fn field_examples() {
        assert_eq!(ScalarField::sin().eval(&[0.0]).unwrap(), 0.0);
        assert_eq!(ScalarField::square().eval(&[3.0]).unwrap(), 9.0);
        let g = Grid::uniform_1d(0.0, 1.0, 2).unwrap();
        let f = ScalarField::sampled(g, vec![0.0, 1.0]).unwrap();
        assert_eq!(f.eval(&[0.5]).unwrap(), 0.5);
        assert!(matches!(f.eval(&[1.5]), Err(Error::OutOfHull { .. })));
    }

    #[test]
    fn sampled_field_exact_at_nodes() {
        let g = Grid::new(vec![-1.3, 0.0], vec![2.1, 0.7], vec![17, 9]).unwrap();
        let f = ScalarField::tabulate(&g, |x| (3.0 * x[0]).sin() * x[1].exp());
        for (k, x) in g.nodes().enumerate() {
            assert_eq!(f.eval(&x).unwrap(), f.values().unwrap()[k]);
        }
    }

    #[test]
    fn multilinear_reproduces_bilinear_functions() {
        let g = Grid::new(vec![0.0, 0.0], vec![1.0, 2.0], vec![5, 7]).unwrap();
        let f = ScalarField::tabulate(&g, |x| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1]);
        let v = f.eval(&[0.37, 1.41]).unwrap();
        assert!((v - (1.0 + 0.74 - 1.41 + 0.5 * 0.37 * 1.41)).abs() < 1e-12);
    }

    #[test]
    fn with_step_hits_endpoints() {
        let g = Grid::with_step(vec![-PI / 2.0], vec![PI / 2.0], vec![PI / 100.0]).unwrap();
        assert_eq!(g.counts()[0], 101);
        assert_eq!(g.coord(0, 100), g.upper()[0]);
    }

    #[test]
    fn seeds_are_deterministic_and_distinct() {
        let p = RngPolicy::new(42);
        assert_eq!(p.derive_seed(3, 7), p.derive_seed(3, 7));
        assert_ne!(p.derive_seed(0, 0), p.derive_seed(0, 1));
        assert_ne!(p.derive_seed(1, 0), p.derive_seed(0, 1));
    }

    #[test]
    fn seed_derivation_collision_free_on_a_million_pairs() {
        let p = RngPolicy::new(0xdead_beef);
        let mut seen = HashSet::with_capacity(1_000_000);
        for s in 0..10u32 {
            for i in 0..100_000u32 {
                assert!(seen.insert(p.derive_seed(s, i)));
            }
        }
    }

    #[test]
    fn combine_checks_representations() {
        let g = Grid::uniform_1d(0.0, 1.0, 3).unwrap();
        let a = ScalarField::tabulate(&g, |x| x[0]);
        assert!(a.combine(1.0, &ScalarField::sin(), 1.0).is_err());
        let b = a.combine(2.0, &a, -1.0).unwrap();
        assert_eq!(b.eval(&[0.5]).unwrap(), 0.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weight_in_unit_interval_and_monotone(m in 0.0f64..6.0, r in 0.0f64..1e3, dr in 0.0f64..10.0) {
                let w = Weight::Polynomial { m };
                let a = w.eval(&[r]);
                let b = w.eval(&[r + dr]);
                prop_assert!(a > 0.0 && a <= 1.0);
                prop_assert!(b <= a);
            }
        }
    }
}
