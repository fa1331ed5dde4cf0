//! Displacement interpolation between output measures and the moment trajectories it induces.
//!
//! On the line the optimal plan is the monotone rearrangement `T = G_1^-1 o G_0`, and the
//! interpolant at time `t` pushes the source forward by `(1 - t) I + t T`. The reference
//! moments `m*_k(t) = int psi_k((1 - t) y + t T(y)) d mu_0(y)` are evaluated by quadrature over
//! the source atoms.

use num_complex::Complex64;
use std::f64::consts::{PI, TAU};

use crate::ensemble::wrap_angle;
use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, Measure1d};
use crate::moment::{raw_fourier_moments, raw_output_moments, Basis, MomentSequence};

/// Default number of instants of a reference trajectory on `[0, 1]`.
pub const DEFAULT_REFERENCE_INSTANTS: usize = 201;

/// Monotone transport map sampled at the atoms of the source measure.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementPlan {
    source: Vec<f64>,
    weights: Vec<f64>,
    targets: Vec<f64>,
    circular: bool,
}

impl DisplacementPlan {
    pub fn source(&self) -> &[f64] {
        &self.source
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn is_circular(&self) -> bool {
        self.circular
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Signed displacement `T(y_j) - y_j` of every atom.
    pub fn displacements(&self) -> Vec<f64> {
        self.source.iter().zip(&self.targets).map(|(y, t)| t - y).collect()
    }

    /// Atom positions at time `t`, unwrapped for circular plans.
    pub(crate) fn positions(&self, t: f64) -> Vec<f64> {
        self.source
            .iter()
            .zip(&self.targets)
            .map(|(y, ty)| (1.0 - t) * y + t * ty)
            .collect()
    }

    /// The interpolant `[(1 - t) I + t T]_# mu_0`. Circular plans return angles in `[0, 2pi)`.
    pub fn interpolate(&self, t: f64) -> Result<EmpiricalMeasure> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(format!("interpolation time {t} outside [0, 1]")));
        }
        let mut points = self.positions(t);
        if self.circular {
            points.iter_mut().for_each(|p| *p = wrap_angle(*p));
        }
        EmpiricalMeasure::new(points, self.weights.clone())
    }
}

/// Monotone rearrangement plan `T(y_j) = G_1^-1(G_0(y_j))` from `source` to `target`.
pub fn mccann_plan<A: Measure1d + ?Sized, B: Measure1d + ?Sized>(source: &A, target: &B) -> DisplacementPlan {
    let atoms = source.atoms();
    let table = target.cdf();
    let targets = atoms.levels.iter().map(|&s| table.quantile(s)).collect();
    DisplacementPlan {
        source: atoms.points,
        weights: atoms.weights,
        targets,
        circular: false,
    }
}

/// Plan from a measure on the circle to the point mass at `theta_target`.
///
/// The circle is cut at the antipode `theta_target + pi`, unrolled to an interval and
/// transported on the line; every atom travels the shorter arc and none crosses the cut.
pub fn circular_plan(source: &EmpiricalMeasure, theta_target: f64) -> Result<DisplacementPlan> {
    if !theta_target.is_finite() {
        return Err(Error::contract("target angle must be finite"));
    }
    let cut = wrap_angle(theta_target + PI);
    // unrolled coordinate in [cut, cut + 2pi); the target sits at cut + pi
    let unrolled: Vec<f64> = source.points().iter().map(|&th| cut + wrap_angle(th - cut)).collect();
    let line = EmpiricalMeasure::new(unrolled, source.weights().to_vec())?;
    let mut plan = mccann_plan(&line, &EmpiricalMeasure::point_mass(cut + PI)?);
    plan.circular = true;
    Ok(plan)
}

/// Reference moments `m*(t)` and their time derivatives on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentReference {
    pub times: Vec<f64>,
    pub m_star: Vec<MomentSequence>,
    pub dm_star: Vec<MomentSequence>,
}

impl MomentReference {
    pub fn basis(&self) -> Basis {
        self.m_star[0].basis
    }

    pub fn order(&self) -> usize {
        self.m_star[0].order()
    }

    /// Index of the grid instant equal to `t`, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.times.partition_point(|&s| s < t - 1e-12);
        (i < self.times.len() && (self.times[i] - t).abs() <= 1e-12).then_some(i)
    }

    /// `(m*(t), dm*/dt(t))`: exact on grid instants, cubic Hermite in between.
    pub fn sample(&self, t: f64) -> (Vec<Complex64>, Vec<Complex64>) {
        if let Some(i) = self.index_of(t) {
            return (self.m_star[i].values.clone(), self.dm_star[i].values.clone());
        }
        let n = self.times.len();
        let k = self.times.partition_point(|&s| s <= t).clamp(1, n - 1);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let h = t1 - t0;
        let s = ((t - t0) / h).clamp(0.0, 1.0);
        let (h00, h10, h01, h11) = (
            2.0 * s.powi(3) - 3.0 * s * s + 1.0,
            s.powi(3) - 2.0 * s * s + s,
            -2.0 * s.powi(3) + 3.0 * s * s,
            s.powi(3) - s * s,
        );
        let (d00, d10, d01, d11) = (
            (6.0 * s * s - 6.0 * s) / h,
            3.0 * s * s - 4.0 * s + 1.0,
            (-6.0 * s * s + 6.0 * s) / h,
            3.0 * s * s - 2.0 * s,
        );
        let (m0, m1) = (&self.m_star[k - 1].values, &self.m_star[k].values);
        let (v0, v1) = (&self.dm_star[k - 1].values, &self.dm_star[k].values);
        let m = (0..m0.len())
            .map(|j| m0[j] * h00 + v0[j] * (h10 * h) + m1[j] * h01 + v1[j] * (h11 * h))
            .collect();
        let dm = (0..m0.len())
            .map(|j| m0[j] * d00 + v0[j] * d10 + m1[j] * d01 + v1[j] * d11)
            .collect();
        (m, dm)
    }

    /// Real parts of `m*(t)` on the grid, as plain vectors.
    pub fn real_values(&self) -> Vec<Vec<f64>> {
        self.m_star.iter().map(MomentSequence::re).collect()
    }
}

/// `n` equally spaced instants on `[0, horizon]`.
pub fn uniform_times(n: usize, horizon: f64) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| horizon * i as f64 / (n - 1) as f64).collect()
}

/// OT moment reference of `plan` in `basis` up to order `q` at the instants `times` (within `[0, 1]`).
///
/// Monomial derivatives use the closed form `d m*_k/dt = int k (T(y) - y) z^(k-1) d mu_0`;
/// Fourier derivatives use central differences on the grid (one-sided at the ends).
pub fn ot_moment_reference(
    plan: &DisplacementPlan,
    basis: Basis,
    q: usize,
    times: &[f64],
) -> Result<MomentReference> {
    if times.len() < 2 || times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::contract("reference times must be increasing with at least two instants"));
    }
    if times[0] < 0.0 || times[times.len() - 1] > 1.0 + 1e-12 {
        return Err(Error::contract("reference times must lie in [0, 1]"));
    }
    match (basis, plan.circular) {
        (Basis::Fourier, false) => return Err(Error::contract("Fourier references need a circular plan")),
        (Basis::MonomialParam | Basis::MonomialOutput, true) => {
            return Err(Error::contract("monomial references need a plan on the line"))
        }
        _ => {}
    }
    let disp = plan.displacements();
    let mut m_star = Vec::with_capacity(times.len());
    let mut dm_star = Vec::with_capacity(times.len());
    for &t in times {
        let z = plan.positions(t.min(1.0));
        match basis {
            Basis::Fourier => {
                m_star.push(MomentSequence {
                    basis,
                    values: raw_fourier_moments(&z, &plan.weights, q),
                });
            }
            _ => {
                m_star.push(MomentSequence::real(basis, &raw_output_moments(&z, &plan.weights, q)));
                // k (T - y) z^(k-1) summed with weights
                let mut dm = vec![0.0; q + 1];
                for ((&zj, &dj), &wj) in z.iter().zip(&disp).zip(&plan.weights) {
                    let mut pow = wj * dj;
                    for (k, dmk) in dm.iter_mut().enumerate().skip(1) {
                        *dmk += k as f64 * pow;
                        pow *= zj;
                    }
                }
                dm_star.push(MomentSequence::real(basis, &dm));
            }
        }
    }
    if basis == Basis::Fourier {
        let n = times.len();
        for i in 0..n {
            let (a, b) = match i {
                0 => (0, 1),
                i if i == n - 1 => (n - 2, n - 1),
                i => (i - 1, i + 1),
            };
            let h = times[b] - times[a];
            let values = m_star[b]
                .values
                .iter()
                .zip(&m_star[a].values)
                .map(|(x, y)| (x - y) / h)
                .collect();
            dm_star.push(MomentSequence { basis, values });
        }
    }
    Ok(MomentReference {
        times: times.to_vec(),
        m_star,
        dm_star,
    })
}

/// Geodesic distance between two angles.
pub fn arc_distance(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    d.min(TAU - d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{wasserstein, GridDensity};
    use crate::moment::{moment_metric, moments_output};
    use proptest::prelude::*;

    fn uniform_atoms(n: usize, scale: f64) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform((0..n).map(|j| scale * (j as f64 + 0.5) / n as f64).collect()).unwrap()
    }

    #[test]
    fn identity_plan() {
        let mu = EmpiricalMeasure::new(vec![0.3, -1.0, 2.0, 0.3], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let plan = mccann_plan(&mu, &mu);
        assert_eq!(plan.source(), plan.targets());
        let d = GridDensity::from_fn(0.0, 1.0, 100, |b| 1.0 + b).unwrap();
        let plan = mccann_plan(&d, &d);
        for (s, t) in plan.source().iter().zip(plan.targets()) {
            assert!((s - t).abs() < 1e-12);
        }
    }

    #[test]
    fn plan_to_point_mass() {
        let mu = uniform_atoms(50, 1.0);
        let plan = mccann_plan(&mu, &EmpiricalMeasure::point_mass(0.7).unwrap());
        assert!(plan.targets().iter().all(|&t| t == 0.7));
    }

    #[test]
    fn uniform_stretch() {
        let mu = GridDensity::from_fn(0.0, 1.0, 1000, |_| 1.0).unwrap();
        let nu = GridDensity::from_fn(0.0, 2.0, 1000, |_| 1.0).unwrap();
        let plan = mccann_plan(&mu, &nu);
        for (s, t) in plan.source().iter().zip(plan.targets()) {
            assert!((t - 2.0 * s).abs() < 1e-9);
        }
    }

    #[test]
    fn interpolation_endpoints_and_geodesic() {
        let mu = EmpiricalMeasure::uniform(vec![0.1, 0.4, 0.45, 2.0, -0.3]).unwrap();
        let nu = EmpiricalMeasure::uniform(vec![1.0, 1.5, 3.0, 3.2, 4.0]).unwrap();
        let plan = mccann_plan(&mu, &nu);
        let start = plan.interpolate(0.0).unwrap();
        assert_eq!(start.cdf(), mu.cdf());
        assert!(wasserstein(&plan.interpolate(1.0).unwrap(), &nu, 2.0) <= 1e-12);
        let total = wasserstein(&mu, &nu, 2.0);
        for t in [0.1, 0.25, 0.5, 0.9] {
            let w = wasserstein(&mu, &plan.interpolate(t).unwrap(), 2.0);
            assert!((w - t * total).abs() <= 1e-3);
        }
        assert!(matches!(plan.interpolate(1.5), Err(Error::Contract(_))));
    }

    #[test]
    fn circular_identity_and_geodesics() {
        let theta = 1.2;
        let plan = circular_plan(&EmpiricalMeasure::point_mass(theta).unwrap(), theta).unwrap();
        assert!(plan.displacements().iter().all(|d| d.abs() < 1e-12));

        let n = 200;
        let mu = EmpiricalMeasure::uniform((0..n).map(|j| TAU * (j as f64 + 0.5) / n as f64).collect()).unwrap();
        let plan = circular_plan(&mu, 0.0).unwrap();
        for (src, d) in plan.source().iter().zip(plan.displacements()) {
            assert!(d.abs() <= PI + 1e-12);
            assert!((d.abs() - arc_distance(*src, 0.0)).abs() < 1e-9);
        }
        let end = plan.interpolate(1.0).unwrap();
        assert!(end.points().iter().all(|&p| arc_distance(p, 0.0) <= 1e-9));
    }

    #[test]
    fn reference_closed_form_uniform_to_point() {
        // mu_0 = U[0,1], mu_1 = delta_c
        let c = 0.8;
        let mu = GridDensity::from_fn(0.0, 1.0, 4096, |_| 1.0).unwrap();
        let plan = mccann_plan(&mu, &EmpiricalMeasure::point_mass(c).unwrap());
        let times = uniform_times(11, 1.0);
        let r = ot_moment_reference(&plan, Basis::MonomialParam, 6, &times).unwrap();
        for (i, &t) in times.iter().enumerate() {
            for k in 0..=6usize {
                let kf = k as f64;
                let exact = if t < 1.0 {
                    (((1.0 - t) + t * c).powf(kf + 1.0) - (t * c).powf(kf + 1.0)) / ((kf + 1.0) * (1.0 - t))
                } else {
                    c.powi(k as i32)
                };
                assert!((r.m_star[i].values[k].re - exact).abs() < 1e-6, "t={t} k={k}");
            }
            assert_eq!(r.dm_star[i].values[0].re, 0.0);
        }
    }

    #[test]
    fn reference_derivative_matches_central_differences() {
        let mu = GridDensity::from_fn(0.0, 1.0, 1000, |b| 1.0 + b).unwrap();
        let nu = GridDensity::from_fn(0.0, 1.0, 1000, |b| 2.0 - b).unwrap();
        let plan = mccann_plan(&mu, &nu);
        let h = 1e-3;
        let times = [0.3 - h, 0.3, 0.3 + h];
        let r = ot_moment_reference(&plan, Basis::MonomialParam, 8, &times).unwrap();
        for k in 0..=8 {
            let fd = (r.m_star[2].values[k].re - r.m_star[0].values[k].re) / (2.0 * h);
            assert!((fd - r.dm_star[1].values[k].re).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_measures_give_constant_reference() {
        let mu = uniform_atoms(30, 2.0);
        let plan = mccann_plan(&mu, &mu);
        let r = ot_moment_reference(&plan, Basis::MonomialOutput, 5, &uniform_times(21, 1.0)).unwrap();
        for (m, dm) in r.m_star.iter().zip(&r.dm_star) {
            assert!(moment_metric(m, &r.m_star[0]).unwrap() < 1e-14);
            assert!(dm.values.iter().all(|v| v.norm() < 1e-14));
        }
    }

    #[test]
    fn reference_endpoints_match_measures() {
        let mu = uniform_atoms(64, 1.0);
        let nu = EmpiricalMeasure::uniform((0..64).map(|j| 1.0 + (j as f64 / 64.0).powi(2)).collect()).unwrap();
        let plan = mccann_plan(&mu, &nu);
        let r = ot_moment_reference(&plan, Basis::MonomialOutput, 6, &uniform_times(5, 1.0)).unwrap();
        assert!(moment_metric(&r.m_star[0], &moments_output(&mu, 6).unwrap()).unwrap() <= 1e-9);
        assert!(moment_metric(&r.m_star[4], &moments_output(&nu, 6).unwrap()).unwrap() <= 1e-9);
    }

    #[test]
    fn basis_plan_compatibility() {
        let mu = uniform_atoms(10, 1.0);
        let line = mccann_plan(&mu, &mu);
        let circle = circular_plan(&mu, 0.5).unwrap();
        let t = uniform_times(3, 1.0);
        assert!(ot_moment_reference(&line, Basis::Fourier, 3, &t).is_err());
        assert!(ot_moment_reference(&circle, Basis::MonomialOutput, 3, &t).is_err());
        let r = ot_moment_reference(&circle, Basis::Fourier, 3, &t).unwrap();
        assert!(r.m_star.iter().all(|m| (m.values[0].re - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hermite_sampling_between_instants() {
        let mu = GridDensity::from_fn(0.0, 1.0, 500, |b| 1.0 + b).unwrap();
        let nu = GridDensity::from_fn(0.0, 1.0, 500, |b| 2.0 - b).unwrap();
        let plan = mccann_plan(&mu, &nu);
        let coarse = ot_moment_reference(&plan, Basis::MonomialParam, 4, &uniform_times(101, 1.0)).unwrap();
        let exact = ot_moment_reference(&plan, Basis::MonomialParam, 4, &[0.4037, 0.5]).unwrap();
        let (m, dm) = coarse.sample(0.4037);
        for k in 0..=4 {
            assert!((m[k].re - exact.m_star[0].values[k].re).abs() < 1e-9);
            assert!((dm[k].re - exact.dm_star[0].values[k].re).abs() < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn plans_are_monotone_and_mass_preserving(
            a in prop::collection::vec(-3.0f64..3.0, 1..20),
            b in prop::collection::vec(-3.0f64..3.0, 1..20),
            t in 0.0f64..1.0,
        ) {
            let mu = EmpiricalMeasure::uniform(a).unwrap();
            let nu = EmpiricalMeasure::uniform(b).unwrap();
            let plan = mccann_plan(&mu, &nu);
            for w in plan.source().windows(2).zip(plan.targets().windows(2)) {
                prop_assert!(w.0[0] <= w.0[1]);
                prop_assert!(w.1[0] <= w.1[1]);
            }
            prop_assert!((plan.interpolate(t).unwrap().mass() - 1.0).abs() <= 1e-12);
            let r = ot_moment_reference(&plan, Basis::MonomialOutput, 4, &uniform_times(7, 1.0)).unwrap();
            prop_assert!(r.dm_star.iter().all(|d| d.values[0].re == 0.0));
            let m0 = r.m_star[0].values[0].re;
            prop_assert!(r.m_star.iter().all(|m| (m.values[0].re - m0).abs() <= 1e-9));
        }
    }
}
