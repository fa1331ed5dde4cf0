//! Moment coordinates of output measures.
//!
//! A measure is represented by its truncated sequence `m_k = <psi_k, mu>` for `k = 0..=q`
//! against one of three bases:
//!
//! * `MonomialParam`: `psi_k = beta^k` integrated against a state treated as a density on the
//!   parameter set (labeled measurements),
//! * `MonomialOutput`: `psi_k = y^k` integrated against the output measure (unlabeled),
//! * `Fourier`: `psi_k = e^{-ik theta}` for measures on the circle.
//!
//! Sequences are compared with the weighted metric `d_M(m, m') = sum_k 2^-k |m_k - m'_k|`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::ensemble::ParameterGrid;
use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, GridDensity};

/// Basis functions behind a [`MomentSequence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    MonomialParam,
    MonomialOutput,
    Fourier,
}

/// Truncated moment sequence `m_0..=m_q`. Monomial entries have zero imaginary part.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSequence {
    pub basis: Basis,
    pub values: Vec<Complex64>,
}

impl MomentSequence {
    pub fn real(basis: Basis, values: &[f64]) -> Self {
        Self {
            basis,
            values: values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.values.len() - 1
    }

    pub fn re(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.re).collect()
    }

    /// Projection onto orders `0..=q`.
    pub fn truncate(&self, q: usize) -> Self {
        Self {
            basis: self.basis,
            values: self.values[..=q.min(self.order())].to_vec(),
        }
    }
}

/// `m_k = int beta^k f(beta) d beta` by the trapezoid rule on the density grid.
pub fn moments_density(f: &GridDensity, q: usize) -> MomentSequence {
    let weights = f.mass_weights();
    let mut m = vec![0.0; q + 1];
    for (i, w) in weights.iter().enumerate() {
        let b = f.node(i);
        let mut pow = 1.0;
        for mk in m.iter_mut() {
            *mk += w * pow;
            pow *= b;
        }
    }
    MomentSequence::real(Basis::MonomialParam, &m)
}

/// Labeled moments of an ensemble state: `m_k = sum_j w_j beta_j^k x_j`.
pub fn moments_param(grid: &ParameterGrid, x: &[f64], q: usize) -> MomentSequence {
    let mut m = vec![0.0; q + 1];
    for ((&b, &w), &xj) in grid.nodes().iter().zip(grid.weights()).zip(x) {
        let mut pow = w * xj;
        for mk in m.iter_mut() {
            *mk += pow;
            pow *= b;
        }
    }
    MomentSequence::real(Basis::MonomialParam, &m)
}

/// Output moments `m_k = sum_j w_j y_j^k`.
pub fn moments_output(mu: &EmpiricalMeasure, q: usize) -> Result<MomentSequence> {
    let m = raw_output_moments(mu.points(), mu.weights(), q);
    if let Some(k) = m.iter().position(|v| !v.is_finite()) {
        return Err(Error::Range(format!("output moment of order {k} overflowed")));
    }
    Ok(MomentSequence::real(Basis::MonomialOutput, &m))
}

pub(crate) fn raw_output_moments(y: &[f64], w: &[f64], q: usize) -> Vec<f64> {
    let mut m = vec![0.0; q + 1];
    for (&yj, &wj) in y.iter().zip(w) {
        let mut pow = wj;
        for mk in m.iter_mut() {
            *mk += pow;
            pow *= yj;
        }
    }
    m
}

pub(crate) fn raw_fourier_moments(theta: &[f64], w: &[f64], q: usize) -> Vec<Complex64> {
    let mut m = vec![Complex64::new(0.0, 0.0); q + 1];
    for (&th, &wj) in theta.iter().zip(w) {
        let (s, c) = th.sin_cos();
        let step = Complex64::new(c, -s);
        let mut z = Complex64::new(wj, 0.0);
        for mk in m.iter_mut() {
            *mk += z;
            z *= step;
        }
    }
    m
}

/// Fourier moments `m_k = sum_j w_j e^{-ik theta_j}` of a measure on the circle.
pub fn moments_fourier(mu: &EmpiricalMeasure, q: usize) -> Result<MomentSequence> {
    if mu.points().iter().any(|&t| !(0.0..TAU).contains(&t)) {
        return Err(Error::contract("Fourier moments need angles in [0, 2pi)"));
    }
    Ok(MomentSequence {
        basis: Basis::Fourier,
        values: raw_fourier_moments(mu.points(), mu.weights(), q),
    })
}

/// Density on the circle rebuilt from a truncated Fourier sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierReconstruction {
    pub theta: Vec<f64>,
    pub values: Vec<f64>,
    /// Set when the truncated series dips below zero somewhere on the grid.
    pub has_negative_lobes: bool,
}

impl FourierReconstruction {
    /// Periodic rectangle rule over `[0, 2pi)`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * TAU / self.values.len() as f64
    }

    pub fn argmax(&self) -> f64 {
        let (i, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        self.theta[i]
    }
}

/// `f(theta) = (1/2pi) [m_0 + sum_k (conj(m_k) e^{-ik theta} + m_k e^{ik theta})]` on `points`
/// equally spaced angles. Negative values are kept and flagged.
pub fn reconstruct_fourier(m: &MomentSequence, points: usize) -> Result<FourierReconstruction> {
    if m.basis != Basis::Fourier {
        return Err(Error::contract("reconstruction needs a Fourier sequence"));
    }
    let m0 = m.values[0];
    if !(m0.re > 0.0) || m0.im.abs() > 1e-12 {
        return Err(Error::contract("m_0 must be real and positive"));
    }
    let theta: Vec<f64> = (0..points).map(|i| TAU * i as f64 / points as f64).collect();
    let values: Vec<f64> = theta
        .iter()
        .map(|&th| {
            let tail: f64 = m.values[1..]
                .iter()
                .enumerate()
                .map(|(i, mk)| {
                    let k = (i + 1) as f64;
                    2.0 * (mk * Complex64::from_polar(1.0, k * th)).re
                })
                .sum();
            (m0.re + tail) / (2.0 * PI)
        })
        .collect();
    let has_negative_lobes = values.iter().any(|&v| v < 0.0);
    Ok(FourierReconstruction {
        theta,
        values,
        has_negative_lobes,
    })
}

/// `d_M(a, b) = sum_k 2^-k |a_k - b_k|` for sequences of the same basis and order.
pub fn moment_metric(a: &MomentSequence, b: &MomentSequence) -> Result<f64> {
    if a.basis != b.basis {
        return Err(Error::contract(format!("basis mismatch: {:?} vs {:?}", a.basis, b.basis)));
    }
    if a.values.len() != b.values.len() {
        return Err(Error::contract(format!(
            "order mismatch: {} vs {}",
            a.order(),
            b.order()
        )));
    }
    Ok(weighted_distance(&a.values, &b.values))
}

/// [`moment_metric`] with the shorter sequence padded by zeros, as for a truncated sequence
/// embedded in the full moment space.
pub fn moment_metric_padded(a: &MomentSequence, b: &MomentSequence) -> Result<f64> {
    if a.basis != b.basis {
        return Err(Error::contract(format!("basis mismatch: {:?} vs {:?}", a.basis, b.basis)));
    }
    let n = a.values.len().max(b.values.len());
    let zero = Complex64::new(0.0, 0.0);
    let mut d = 0.0;
    let mut scale = 1.0;
    for k in 0..n {
        let x = a.values.get(k).unwrap_or(&zero);
        let y = b.values.get(k).unwrap_or(&zero);
        d += scale * (x - y).norm();
        scale *= 0.5;
    }
    Ok(d)
}

pub(crate) fn weighted_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    let mut scale = 1.0;
    let mut d = 0.0;
    for (x, y) in a.iter().zip(b) {
        d += scale * (x - y).norm();
        scale *= 0.5;
    }
    d
}

pub(crate) fn weighted_distance_real(a: &[f64], b: &[f64]) -> f64 {
    let mut scale = 1.0;
    let mut d = 0.0;
    for (x, y) in a.iter().zip(b) {
        d += scale * (x - y).abs();
        scale *= 0.5;
    }
    d
}

/// Outcome of [`hausdorff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct HausdorffReport {
    pub passed: bool,
    /// Most negative finite difference found (zero when none is negative).
    pub worst: f64,
    /// `(depth, k)` of the worst difference.
    pub at: Option<(usize, usize)>,
}

/// Checks `sum_i C(n, i) (-1)^i m_{k+i} >= -1e-9` for every `n <= depth` with `k + n <= q`.
///
/// These are necessary conditions for `m` to be the moment sequence of a measure on `[0, 1]`.
pub fn hausdorff_check(m: &[f64], depth: usize) -> HausdorffReport {
    let mut worst = 0.0;
    let mut at = None;
    // diff[k] holds the n-th forward difference (-Delta)^n m_k
    let mut diff = m.to_vec();
    for n in 0..=depth.min(m.len().saturating_sub(1)) {
        if n > 0 {
            for k in 0..diff.len() - 1 {
                diff[k] -= diff[k + 1];
            }
            diff.pop();
        }
        for (k, &d) in diff.iter().enumerate() {
            if d < worst {
                worst = d;
                at = Some((n, k));
            }
        }
    }
    HausdorffReport {
        passed: worst >= -1e-9,
        worst,
        at,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::mean_field;
    use crate::measure::truncated_gaussian;
    use proptest::prelude::*;

    #[test]
    fn density_moments() {
        let flat = GridDensity::from_fn(0.0, 1.0, 2000, |_| 1.0).unwrap();
        let m = moments_density(&flat, 6);
        for (k, v) in m.re().iter().enumerate() {
            assert!((v - 1.0 / (k as f64 + 1.0)).abs() < 1e-6);
        }
        let g = truncated_gaussian(0.5, 1.0 / 50f64.sqrt(), 4096).unwrap();
        assert!((moments_density(&g, 1).values[1].re - 0.5).abs() < 1e-6);
    }

    #[test]
    fn narrow_peak_tends_to_point_mass() {
        let mut prev = f64::INFINITY;
        for sd in [0.05, 0.01, 0.002] {
            let g = truncated_gaussian(0.5, sd, 20000).unwrap();
            let m = moments_density(&g, 5).re();
            let err = (0..=5).map(|k| (m[k] - 0.5f64.powi(k as i32)).abs()).fold(0.0, f64::max);
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn output_moments() {
        let d = EmpiricalMeasure::point_mass(1.5).unwrap();
        let m = moments_output(&d, 4).unwrap().re();
        for (k, v) in m.iter().enumerate() {
            assert!((v - 1.5f64.powi(k as i32)).abs() < 1e-12);
        }
        let n = 500;
        let grid = ParameterGrid::uniform(n, 0.0, 1.0).unwrap();
        let mu = crate::measure::pushforward(&grid, grid.nodes()).unwrap();
        let m = moments_output(&mu, 5).unwrap().re();
        assert!((m[0] - 1.0).abs() < 1e-12);
        for (k, v) in m.iter().enumerate() {
            assert!((v - 1.0 / (k as f64 + 1.0)).abs() < 1e-5);
        }
        let big = EmpiricalMeasure::point_mass(1e200).unwrap();
        assert!(matches!(moments_output(&big, 3), Err(Error::Range(_))));
    }

    #[test]
    fn fourier_moments_cases() {
        let th = 2.1;
        let d = EmpiricalMeasure::point_mass(th).unwrap();
        let m = moments_fourier(&d, 5).unwrap();
        for (k, v) in m.values.iter().enumerate() {
            let expect = Complex64::from_polar(1.0, -(k as f64) * th);
            assert!((v - expect).norm() < 1e-12);
        }
        let n = 100;
        let u = EmpiricalMeasure::uniform((0..n).map(|j| TAU * (j as f64 + 0.5) / n as f64).collect()).unwrap();
        let m = moments_fourier(&u, 10).unwrap();
        assert!((m.values[0].re - 1.0).abs() < 1e-12);
        assert!(m.values[1..].iter().all(|v| v.norm() <= 1.0 / n as f64));
        assert!(moments_fourier(&EmpiricalMeasure::point_mass(7.0).unwrap(), 2).is_err());
    }

    #[test]
    fn first_fourier_moment_is_order_parameter() {
        let grid = ParameterGrid::uniform(7, -1.0, 1.0).unwrap();
        let theta = vec![0.1, 0.4, 2.0, 3.3, 5.9, 1.1, 0.7];
        let mu = crate::measure::pushforward(&grid, &theta).unwrap();
        let m = moments_fourier(&mu, 1).unwrap();
        let (r, _) = mean_field(&theta, &grid);
        assert!((m.values[1].norm() - r).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_cases() {
        let n = 64;
        let u = EmpiricalMeasure::uniform((0..n).map(|j| TAU * j as f64 / n as f64).collect()).unwrap();
        let rec = reconstruct_fourier(&moments_fourier(&u, 10).unwrap(), 256).unwrap();
        assert!(rec.values.iter().all(|v| (v - 1.0 / TAU).abs() < 1e-12));

        let target = 4.0;
        let d = EmpiricalMeasure::point_mass(target).unwrap();
        let m = moments_fourier(&d, 10).unwrap();
        let rec = reconstruct_fourier(&m, 720).unwrap();
        let cell = TAU / 720.0;
        assert!((rec.argmax() - target).abs() <= cell);
        assert!(rec.has_negative_lobes);
        // Dirichlet kernel oracle: D_10(theta - target) / 2pi
        for (th, v) in rec.theta.iter().zip(&rec.values) {
            let x = th - target;
            let dirichlet = 1.0 + 2.0 * (1..=10).map(|k| (k as f64 * x).cos()).sum::<f64>();
            assert!((v - dirichlet / TAU).abs() < 1e-10);
        }
        assert!((rec.integral() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn metric_cases() {
        let a = MomentSequence::real(Basis::MonomialOutput, &[1.0, 0.5, 0.25, 0.1]);
        assert_eq!(moment_metric(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.values[2].re += 0.3;
        assert!((moment_metric(&a, &b).unwrap() - 0.3 / 4.0).abs() < 1e-15);
        let c = MomentSequence::real(Basis::MonomialParam, &[1.0, 0.5, 0.25, 0.1]);
        assert!(matches!(moment_metric(&a, &c), Err(Error::Contract(_))));
        let short = a.truncate(1);
        assert!(moment_metric(&a, &short).is_err());
        let pad = moment_metric_padded(&a, &short).unwrap();
        assert!((pad - (0.25 / 4.0 + 0.1 / 8.0)).abs() < 1e-15);
    }

    #[test]
    fn hausdorff_cases() {
        let uniform: Vec<f64> = (0..10).map(|k| 1.0 / (k as f64 + 1.0)).collect();
        assert!(hausdorff_check(&uniform, 9).passed);
        let point: Vec<f64> = (0..10).map(|k| 0.5f64.powi(k)).collect();
        assert!(hausdorff_check(&point, 9).passed);
        // Bernoulli(0.9) moments are admissible
        assert!(hausdorff_check(&[1.0, 0.9, 0.9], 2).passed);
        // m_2 > m_1 is impossible on [0, 1]
        let r = hausdorff_check(&[1.0, 0.9, 0.95], 2);
        assert!(!r.passed);
        assert_eq!(r.at, Some((1, 1)));
        assert!((r.worst + 0.05).abs() < 1e-12);
    }

    fn sequence(q: usize) -> impl Strategy<Value = MomentSequence> {
        prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), q + 1)
            .prop_map(|v| MomentSequence {
                basis: Basis::Fourier,
                values: v.into_iter().map(|(r, i)| Complex64::new(r, i)).collect(),
            })
    }

    proptest! {
        #[test]
        fn metric_triangle_inequality(a in sequence(6), b in sequence(6), c in sequence(6)) {
            let ab = moment_metric(&a, &b).unwrap();
            prop_assert!(ab <= moment_metric(&a, &c).unwrap() + moment_metric(&c, &b).unwrap() + 1e-12);
            prop_assert!((ab - moment_metric(&b, &a).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn reconstruction_integrates_to_m0(a in sequence(10), m0 in 0.1f64..3.0) {
            let mut m = a;
            m.values[0] = Complex64::new(m0, 0.0);
            let rec = reconstruct_fourier(&m, 128).unwrap();
            prop_assert!((rec.integral() - m0).abs() < 1e-8);
        }

        #[test]
        fn pushforward_moments_match_direct(y in prop::collection::vec(-1.5f64..1.5, 2..40)) {
            let grid = ParameterGrid::uniform(y.len(), 0.0, 1.0).unwrap();
            let mu = crate::measure::pushforward(&grid, &y).unwrap();
            let via_measure = moments_output(&mu, 6).unwrap().re();
            let n = y.len() as f64;
            for (k, v) in via_measure.iter().enumerate() {
                let direct: f64 = y.iter().map(|yj| yj.powi(k as i32)).sum::<f64>() / n;
                prop_assert!((v - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
            }
        }
    }
}
