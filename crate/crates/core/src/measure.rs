//! Output measures on the real line: empirical, grid-density and distribution-function
//! representations, generalized inverses and Wasserstein distances.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;
use std::f64::consts::SQRT_2;

use crate::ensemble::ParameterGrid;
use crate::error::{Error, Result};

/// Quantile levels used by [`wasserstein`].
pub const DEFAULT_QUANTILE_LEVELS: usize = 2048;

/// Weighted point cloud; weights form a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::contract("empirical measure needs matching non-empty points and weights"));
        }
        if let Some(j) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::contract(format!("non-finite support point at index {j}")));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::contract("empirical weights must be positive and finite"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("empirical weights sum to {total}, expected 1")));
        }
        Ok(Self { points, weights })
    }

    /// Equal weights on every point.
    pub fn uniform(points: Vec<f64>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn point_mass(c: f64) -> Result<Self> {
        Self::new(vec![c], vec![1.0])
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| p * w).sum()
    }

    /// Atom indices ordered by position; ties keep their original order.
    fn sorted_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.points.len()).collect();
        order.sort_by(|&a, &b| self.points[a].total_cmp(&self.points[b]));
        order
    }
}

/// Density sampled on a uniform grid over `[lo, hi]`, normalized by the trapezoid rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    lo: f64,
    hi: f64,
    values: Vec<f64>,
}

impl GridDensity {
    /// `values[i]` is the density at `lo + i (hi - lo) / (values.len() - 1)`.
    pub fn new(lo: f64, hi: f64, mut values: Vec<f64>) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config(format!("invalid density support [{lo}, {hi}]")));
        }
        if values.len() < 2 {
            return Err(Error::config("density grid needs at least two nodes"));
        }
        if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("density samples must be finite and non-negative"));
        }
        let h = (hi - lo) / (values.len() - 1) as f64;
        let mass = crate::ode::trapezoid(&values, h);
        if !(mass > 0.0) {
            return Err(Error::config("density has zero mass"));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Ok(Self { lo, hi, values })
    }

    pub fn from_fn(lo: f64, hi: f64, intervals: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let h = (hi - lo) / intervals.max(1) as f64;
        Self::new(lo, hi, (0..=intervals).map(|i| f(lo + i as f64 * h)).collect())
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.values.len() - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.values.len() {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| self.node(i)).collect()
    }

    pub fn integral(&self) -> f64 {
        crate::ode::trapezoid(&self.values, self.step())
    }

    /// Trapezoid quadrature weights for `int g(y) f(y) dy`, one per node.
    pub fn mass_weights(&self) -> Vec<f64> {
        let h = self.step();
        let last = self.values.len() - 1;
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| if i == 0 || i == last { 0.5 * h * v } else { h * v })
            .collect()
    }

    /// Linear interpolation, zero outside the support.
    pub fn eval(&self, y: f64) -> f64 {
        if y < self.lo || y > self.hi {
            return 0.0;
        }
        let s = (y - self.lo) / self.step();
        let i = (s.floor() as usize).min(self.values.len() - 2);
        let frac = s - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }
}

/// How a [`CdfTable`] is continued between its abscissae.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdfKind {
    /// Right-continuous steps (empirical measures).
    Step,
    /// Piecewise-linear (grid densities).
    Linear,
}

/// Tabulated distribution function.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfTable {
    abscissae: Vec<f64>,
    values: Vec<f64>,
    kind: CdfKind,
}

impl CdfTable {
    pub fn abscissae(&self) -> &[f64] {
        &self.abscissae
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> CdfKind {
        self.kind
    }

    /// `F(y)`.
    pub fn at(&self, y: f64) -> f64 {
        let xs = &self.abscissae;
        // number of abscissae <= y
        let k = xs.partition_point(|&x| x <= y);
        if k == 0 {
            return 0.0;
        }
        match self.kind {
            CdfKind::Step => self.values[k - 1],
            CdfKind::Linear => {
                if k == xs.len() {
                    return self.values[k - 1];
                }
                let (x0, x1) = (xs[k - 1], xs[k]);
                let frac = (y - x0) / (x1 - x0);
                self.values[k - 1] + frac * (self.values[k] - self.values[k - 1])
            }
        }
    }

    /// Generalized inverse `sup { y : F(y) <= s }`, clamped to the tabulated support.
    pub fn quantile(&self, s: f64) -> f64 {
        let xs = &self.abscissae;
        let fs = &self.values;
        let last = xs.len() - 1;
        match self.kind {
            CdfKind::Step => {
                // F is flat at F_i on [x_i, x_{i+1}); the supremum is the first atom whose F exceeds s.
                let k = fs.partition_point(|&f| f <= s);
                xs[k.min(last)]
            }
            CdfKind::Linear => {
                let k = fs.partition_point(|&f| f <= s);
                if k == 0 {
                    return xs[0];
                }
                let i = k - 1;
                if i == last {
                    return xs[last];
                }
                let frac = (s - fs[i]) / (fs[i + 1] - fs[i]);
                xs[i] + frac * (xs[i + 1] - xs[i])
            }
        }
    }
}

/// Quadrature atoms of a measure together with the distribution level attached to each atom.
///
/// For empirical measures the level is the midpoint of the atom's mass interval; for densities
/// it is the distribution function at the grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct Atoms {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub levels: Vec<f64>,
}

/// A probability measure on the real line.
pub trait Measure1d {
    fn cdf(&self) -> CdfTable;
    fn atoms(&self) -> Atoms;
}

impl Measure1d for EmpiricalMeasure {
    fn cdf(&self) -> CdfTable {
        let order = self.sorted_order();
        let total = self.mass();
        let mut abscissae: Vec<f64> = Vec::with_capacity(order.len());
        let mut values: Vec<f64> = Vec::with_capacity(order.len());
        let mut acc = 0.0;
        for &j in &order {
            acc += self.weights[j];
            let p = self.points[j];
            if abscissae.last() == Some(&p) {
                *values.last_mut().unwrap() = acc / total;
            } else {
                abscissae.push(p);
                values.push(acc / total);
            }
        }
        *values.last_mut().unwrap() = 1.0;
        CdfTable {
            abscissae,
            values,
            kind: CdfKind::Step,
        }
    }

    fn atoms(&self) -> Atoms {
        let order = self.sorted_order();
        let total = self.mass();
        let mut acc = 0.0;
        let mut atoms = Atoms {
            points: Vec::with_capacity(order.len()),
            weights: Vec::with_capacity(order.len()),
            levels: Vec::with_capacity(order.len()),
        };
        for &j in &order {
            let w = self.weights[j];
            atoms.points.push(self.points[j]);
            atoms.weights.push(w);
            atoms.levels.push((acc + 0.5 * w) / total);
            acc += w;
        }
        atoms
    }
}

impl Measure1d for GridDensity {
    fn cdf(&self) -> CdfTable {
        let h = self.step();
        let mut values = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        values.push(0.0);
        for w in self.values.windows(2) {
            acc += 0.5 * h * (w[0] + w[1]);
            values.push(acc);
        }
        let total = acc;
        values.iter_mut().for_each(|v| *v /= total);
        *values.last_mut().unwrap() = 1.0;
        CdfTable {
            abscissae: self.nodes(),
            values,
            kind: CdfKind::Linear,
        }
    }

    fn atoms(&self) -> Atoms {
        let table = self.cdf();
        let weights = self.mass_weights();
        let total: f64 = weights.iter().sum();
        let mut atoms = Atoms {
            points: Vec::new(),
            weights: Vec::new(),
            levels: Vec::new(),
        };
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                atoms.points.push(self.node(i));
                atoms.weights.push(w / total);
                atoms.levels.push(table.values[i]);
            }
        }
        atoms
    }
}

/// Output measure `(y)_# lambda`: member outputs weighted by the parameter quadrature.
pub fn pushforward(grid: &ParameterGrid, y: &[f64]) -> Result<EmpiricalMeasure> {
    if y.len() != grid.len() {
        return Err(Error::contract(format!(
            "{} outputs for a grid of {} members",
            y.len(),
            grid.len()
        )));
    }
    EmpiricalMeasure::new(y.to_vec(), grid.weights().to_vec())
}

/// Distribution function of any supported measure.
pub fn cdf<M: Measure1d + ?Sized>(measure: &M) -> CdfTable {
    measure.cdf()
}

/// `W_p` by midpoint quadrature of `int_0^1 |G_a^-1(s) - G_b^-1(s)|^p ds` on `levels` points.
pub fn wasserstein_tables(a: &CdfTable, b: &CdfTable, p: f64, levels: usize) -> f64 {
    assert!(p >= 1.0, "Wasserstein order must be >= 1");
    let n = levels.max(1);
    let sum: f64 = (0..n)
        .map(|l| {
            let s = (l as f64 + 0.5) / n as f64;
            (a.quantile(s) - b.quantile(s)).abs().powf(p)
        })
        .sum();
    (sum / n as f64).powf(1.0 / p)
}

/// `W_p(mu, nu)` on the real line with [`DEFAULT_QUANTILE_LEVELS`] levels.
pub fn wasserstein<A: Measure1d + ?Sized, B: Measure1d + ?Sized>(mu: &A, nu: &B, p: f64) -> f64 {
    wasserstein_tables(&mu.cdf(), &nu.cdf(), p, DEFAULT_QUANTILE_LEVELS)
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn truncated_gaussian_fn(mean: f64, sd: f64) -> Result<impl Fn(f64) -> f64> {
    if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
        return Err(Error::config(format!("invalid Gaussian parameters mean {mean}, sd {sd}")));
    }
    let z = normal_cdf((1.0 - mean) / sd) - normal_cdf(-mean / sd);
    if z < 1e-12 {
        return Err(Error::config(format!(
            "Gaussian(mean {mean}, sd {sd}) has negligible mass on [0, 1]"
        )));
    }
    Ok(move |b: f64| normal_pdf((b - mean) / sd) / (sd * z))
}

/// Gaussian truncated to `[0, 1]`, sampled on `intervals + 1` nodes.
pub fn truncated_gaussian(mean: f64, sd: f64, intervals: usize) -> Result<GridDensity> {
    let f = truncated_gaussian_fn(mean, sd)?;
    GridDensity::from_fn(0.0, 1.0, intervals, f)
}

/// One truncated-Gaussian component of a mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Convex combination of individually truncated Gaussians on `[0, 1]`.
pub fn gaussian_mixture(components: &[MixtureComponent], intervals: usize) -> Result<GridDensity> {
    if components.is_empty() {
        return Err(Error::config("mixture needs at least one component"));
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    if (total - 1.0).abs() > 1e-12 || components.iter().any(|c| !(c.weight > 0.0)) {
        return Err(Error::config(format!("mixture weights must be positive and sum to 1, got {total}")));
    }
    let parts = components
        .iter()
        .map(|c| truncated_gaussian_fn(c.mean, c.sd).map(|f| (c.weight, f)))
        .collect::<Result<Vec<_>>>()?;
    GridDensity::from_fn(0.0, 1.0, intervals, |b| parts.iter().map(|(w, f)| w * f(b)).sum())
}

/// Equal-weight empirical measure over `count` members drawn without replacement.
///
/// Uses every member when `count >= y.len()`.
pub fn sample_members(y: &[f64], count: usize, seed: u64) -> Result<EmpiricalMeasure> {
    if count >= y.len() {
        return EmpiricalMeasure::uniform(y.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, y.len(), count).into_vec();
    picked.sort_unstable();
    EmpiricalMeasure::uniform(picked.into_iter().map(|j| y[j]).collect())
}

/// Distribution function of the free linear ensemble `dx/dt = beta x` started from the point
/// mass at `a > 0` with identity output: `F_t(y) = log(y / a) / t` on `[a, a e^t]`.
pub fn free_linear_cdf(a: f64, t: f64, y: f64) -> f64 {
    let top = a * t.exp();
    if y < a {
        0.0
    } else if y > top {
        1.0
    } else {
        (y / a).ln() / t
    }
}

/// Both sides of `dF/dt = -(1/2) y dF^2/dy` at `(t, y)` by central differences of step `h`.
pub fn free_linear_pde_sides(a: f64, t: f64, y: f64, h: f64) -> (f64, f64) {
    let f = |t: f64, y: f64| free_linear_cdf(a, t, y);
    let dt = (f(t + h, y) - f(t - h, y)) / (2.0 * h);
    let dy_sq = (f(t, y + h).powi(2) - f(t, y - h).powi(2)) / (2.0 * h);
    (dt, -0.5 * y * dy_sq)
}

/// Largest finite-difference residual of the transport equation over the interior of the support.
///
/// Points within `2h` of a support edge at `t - h` or `t + h` are skipped because `F` has a kink there.
pub fn free_linear_pde_residual(a: f64, t: f64, h: f64) -> f64 {
    assert!(t > h && h > 0.0, "need t > h > 0");
    let lo = a + 2.0 * h;
    let hi = a * (t - h).exp() - 2.0 * h;
    let n = ((hi - lo) / h).floor() as usize;
    (0..=n)
        .map(|i| {
            let y = lo + i as f64 * h;
            let (l, r) = free_linear_pde_sides(a, t, y, h);
            (l - r).abs()
        })
        .fold(0.0, f64::max)
}
