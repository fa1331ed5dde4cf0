//! Truncated moment dynamics.
//!
//! For the labeled linear ensemble `dx/dt = beta x + sum_i beta^(i-1) u_i` on `Omega = [0, 1]`
//! the moments `m_k = int beta^k x d beta` obey `dm_k/dt = m_{k+1} + sum_i u_i / (k + i)`.
//! Dropping `m_{q+1}` gives the linear system `dm/dt = L m + H u` with a nilpotent shift `L`
//! and a Hilbert-type block `H`. Other bases have no closed form and are computed from ensemble
//! trajectories.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{simulate, ControlSignal, EnsembleModel, EnsembleState, ParameterGrid, Trajectory};
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::moment::{moments_fourier, moments_output, moments_param, weighted_distance_real, Basis, MomentSequence};
use crate::ode::{whole_steps, Rk4};

/// Relative singular-value cutoff for ranks and pseudo-inverses.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Extra orders integrated by [`verify_moment_consistency`] so that closing the truncation does
/// not contaminate the orders being compared.
pub const CONSISTENCY_EXTRA_ORDERS: usize = 24;

/// `dm/dt = L m + H u` truncated at order `q` with `p` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMomentSystem {
    q: usize,
    p: usize,
    shift: DMatrix<f64>,
    hankel: DMatrix<f64>,
    rank: usize,
    singular_values: Vec<f64>,
}

impl LinearMomentSystem {
    pub fn order(&self) -> usize {
        self.q
    }

    pub fn inputs(&self) -> usize {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.q + 1
    }

    /// The shift `L`, ones on the superdiagonal.
    pub fn shift(&self) -> &DMatrix<f64> {
        &self.shift
    }

    /// The input matrix `H`, `H[k][i] = 1 / (k + i + 1)`.
    pub fn hankel(&self) -> &DMatrix<f64> {
        &self.hankel
    }

    /// Numerical rank of `H`.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Singular values of `H`, largest first.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Condition number of `H H'`, infinite when `H` has fewer than `q + 1` independent rows.
    pub fn gram_condition(&self) -> f64 {
        let s = &self.singular_values;
        if self.rank < self.dim() {
            f64::INFINITY
        } else {
            (s[0] / s[s.len() - 1]).powi(2)
        }
    }

    /// `L m + H u`.
    pub fn rhs(&self, m: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if m.len() != self.dim() || u.len() != self.p {
            return Err(Error::contract(format!(
                "moment system of order {} with {} inputs got m of length {} and u of length {}",
                self.q,
                self.p,
                m.len(),
                u.len()
            )));
        }
        let mut dm = vec![0.0; m.len()];
        self.rhs_into(m, u, &mut dm);
        Ok(dm)
    }

    pub(crate) fn rhs_into(&self, m: &[f64], u: &[f64], dm: &mut [f64]) {
        for k in 0..=self.q {
            let mut v = if k < self.q { m[k + 1] } else { 0.0 };
            for (i, &ui) in u.iter().enumerate() {
                v += self.hankel[(k, i)] * ui;
            }
            dm[k] = v;
        }
    }

    /// Moore-Penrose pseudo-inverse of `H` with the crate's singular-value cutoff.
    pub fn hankel_pinv(&self) -> DMatrix<f64> {
        let svd = self.hankel.clone().svd(true, true);
        let cutoff = RANK_TOLERANCE * svd.singular_values.max();
        svd.pseudo_inverse(cutoff).expect("both singular bases were computed")
    }
}

/// Build the order-`q`, `p`-input system of the labeled linear ensemble.
pub fn build_linear_moment_system(q: usize, p: usize) -> Result<LinearMomentSystem> {
    if q == 0 || p == 0 {
        return Err(Error::contract(format!("moment system needs q >= 1 and p >= 1, got q={q}, p={p}")));
    }
    let n = q + 1;
    let shift = DMatrix::from_fn(n, n, |r, c| if c == r + 1 { 1.0 } else { 0.0 });
    let hankel = DMatrix::from_fn(n, p, |k, i| 1.0 / (k + i + 1) as f64);
    let singular_values = {
        let mut s: Vec<f64> = hankel.clone().svd(false, false).singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    };
    let rank = singular_values
        .iter()
        .filter(|&&s| s > RANK_TOLERANCE * singular_values[0])
        .count();
    Ok(LinearMomentSystem {
        q,
        p,
        shift,
        hankel,
        rank,
        singular_values,
    })
}

/// Integrate the moment system under a piecewise-constant control, sampling every step.
///
/// Returns `(times, states)` on the same grid as [`simulate`] with the same `dt`.
pub fn integrate_moment_system(
    sys: &LinearMomentSystem,
    m0: &[f64],
    control: &ControlSignal,
    dt: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if m0.len() != sys.dim() {
        return Err(Error::contract(format!(
            "initial moments have length {}, system has dimension {}",
            m0.len(),
            sys.dim()
        )));
    }
    if control.channels() != sys.inputs() {
        return Err(Error::contract(format!(
            "control has {} channels, system expects {}",
            control.channels(),
            sys.inputs()
        )));
    }
    let mut m = m0.to_vec();
    let mut times = vec![0.0];
    let mut states = vec![m.clone()];
    if control.horizon() == 0.0 {
        return Ok((times, states));
    }
    let per_interval = whole_steps(control.interval_length(), dt)
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("dt = {dt} does not divide the control interval")))?;
    let mut rk = Rk4::new(m.len());
    let mut step = 0usize;
    for i in 0..control.intervals() {
        let u = control.interval(i);
        for _ in 0..per_interval {
            rk.step(|_, y, dy| sys.rhs_into(y, u, dy), step as f64 * dt, &mut m, dt);
            step += 1;
            let t = step as f64 * dt;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::solver(t, "moment state became non-finite"));
            }
            times.push(t);
            states.push(m.clone());
        }
    }
    Ok((times, states))
}

/// Largest `d_M` gap between ensemble moments and the integrated moment system.
///
/// The ensemble is simulated and its `MonomialParam` moments taken at every step. The moment
/// system is integrated from the ensemble's initial moments under the same control and `dt`, at
/// order `q` plus [`CONSISTENCY_EXTRA_ORDERS`], and projected back to order `q`; the extra
/// orders keep the comparison about the coordinate change itself rather than the truncation.
pub fn verify_moment_consistency(
    model: &EnsembleModel,
    grid: &ParameterGrid,
    x0: &EnsembleState,
    control: &ControlSignal,
    basis: Basis,
    q: usize,
    dt: f64,
) -> Result<f64> {
    let EnsembleModel::LinearScalar { inputs } = *model else {
        return Err(Error::contract("moment consistency needs the linear ensemble"));
    };
    if basis != Basis::MonomialParam {
        return Err(Error::contract("moment consistency needs the labeled monomial basis"));
    }
    let (lo, hi) = (grid.nodes()[0], grid.nodes()[grid.len() - 1]);
    if lo < 0.0 || hi > 1.0 {
        return Err(Error::contract("the analytic moment system assumes parameters in [0, 1]"));
    }
    let traj = simulate(model, x0, grid, control, dt)?;
    let extended = build_linear_moment_system(q + CONSISTENCY_EXTRA_ORDERS, inputs)?;
    let m0 = moments_param(grid, &x0.x, extended.order()).re();
    let (_, states) = integrate_moment_system(&extended, &m0, control, dt)?;
    let mut worst = 0.0f64;
    for (x, m) in traj.states.iter().zip(&states) {
        let ens = moments_param(grid, x, q).re();
        worst = worst.max(weighted_distance_real(&ens, &m[..=q]));
    }
    Ok(worst)
}

/// Moments of every sampled instant of an ensemble trajectory.
///
/// `MonomialParam` weighs the state against `beta^k`; the other bases use the pushforward of the
/// grid weights through the member outputs.
pub fn moment_trajectory(
    traj: &Trajectory,
    grid: &ParameterGrid,
    basis: Basis,
    q: usize,
) -> Result<Vec<MomentSequence>> {
    traj.states
        .iter()
        .map(|x| {
            if x.len() != grid.len() {
                return Err(Error::contract("trajectory state length differs from grid size"));
            }
            match basis {
                Basis::MonomialParam => Ok(moments_param(grid, x, q)),
                Basis::MonomialOutput => moments_output(&EmpiricalMeasure::new(x.clone(), grid.weights().to_vec())?, q),
                Basis::Fourier => moments_fourier(&EmpiricalMeasure::new(x.clone(), grid.weights().to_vec())?, q),
            }
        })
        .collect()
}

/// Closed-form moment state from zero initial moments under a constant control:
/// `m(t) = sum_j L^j H u t^(j+1) / (j+1)!`, exact because `L` is nilpotent.
pub fn constant_input_response(sys: &LinearMomentSystem, u: &[f64], t: f64) -> Result<Vec<f64>> {
    if u.len() != sys.inputs() {
        return Err(Error::contract("control length differs from system inputs"));
    }
    let mut term = &sys.hankel * DVector::from_column_slice(u);
    let mut out = DVector::zeros(sys.dim());
    let mut coef = t;
    for j in 0..sys.dim() {
        out += &term * coef;
        term = &sys.shift * term;
        coef *= t / (j + 2) as f64;
    }
    Ok(out.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment::hausdorff_check;
    use proptest::prelude::*;

    #[test]
    fn small_system_entries() {
        let sys = build_linear_moment_system(2, 2).unwrap();
        let h = sys.hankel();
        let expected = [[1.0, 0.5], [0.5, 1.0 / 3.0], [1.0 / 3.0, 0.25]];
        for (k, row) in expected.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                assert_eq!(h[(k, i)], *v);
            }
        }
        assert_eq!(sys.rhs(&[3.0, 5.0, 7.0], &[0.0, 0.0]).unwrap(), vec![5.0, 7.0, 0.0]);
    }

    #[test]
    fn ranks() {
        assert_eq!(build_linear_moment_system(7, 8).unwrap().rank(), 8);
        let sys = build_linear_moment_system(8, 8).unwrap();
        assert_eq!(sys.rank(), 8);
        assert!(sys.gram_condition().is_infinite());
        let square = build_linear_moment_system(8, 9).unwrap();
        assert_eq!(square.rank(), 9);
        assert!(square.gram_condition().is_finite());
        assert!(build_linear_moment_system(0, 2).is_err());
        assert!(build_linear_moment_system(3, 0).is_err());
    }

    #[test]
    fn rhs_examples_and_errors() {
        let sys = build_linear_moment_system(5, 3).unwrap();
        let mut e0 = vec![0.0; 6];
        e0[0] = 1.0;
        assert!(sys.rhs(&e0, &[0.0; 3]).unwrap().iter().all(|&v| v == 0.0));
        let col = sys.rhs(&[0.0; 6], &[1.0, 0.0, 0.0]).unwrap();
        for (k, v) in col.iter().enumerate() {
            assert_eq!(*v, 1.0 / (k + 1) as f64);
        }
        assert!(matches!(sys.rhs(&[0.0; 5], &[0.0; 3]), Err(Error::Contract(_))));
        assert!(matches!(sys.rhs(&[0.0; 6], &[0.0; 2]), Err(Error::Contract(_))));
    }

    #[test]
    fn shift_is_nilpotent() {
        for q in 1..10 {
            let sys = build_linear_moment_system(q, 1).unwrap();
            let l = sys.shift();
            let mut power = DMatrix::identity(q + 1, q + 1);
            for _ in 0..q {
                power = &power * l;
            }
            assert!(power.iter().any(|&v| v != 0.0));
            power = &power * l;
            assert!(power.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn columns_are_moment_sequences() {
        let sys = build_linear_moment_system(10, 4).unwrap();
        for i in 0..4 {
            let col: Vec<f64> = sys.hankel().column(i).iter().copied().collect();
            assert!(hausdorff_check(&col, 10).passed);
        }
    }

    #[test]
    fn constant_input_closed_form() {
        let sys = build_linear_moment_system(6, 3).unwrap();
        let u = [1.0, 0.0, 0.0];
        let control = ControlSignal::constant(1.0, 10, u.to_vec()).unwrap();
        let (times, states) = integrate_moment_system(&sys, &[0.0; 7], &control, 1e-3).unwrap();
        for (t, m) in times.iter().zip(&states) {
            let exact = constant_input_response(&sys, &u, *t).unwrap();
            for (a, b) in m.iter().zip(&exact) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn consistency_examples() {
        let grid = ParameterGrid::uniform(400, 0.0, 1.0).unwrap();
        let model = EnsembleModel::linear(2).unwrap();
        let ones = EnsembleState::new(0.0, vec![1.0; 400]);
        let zero = ControlSignal::zeros(1.0, 10, 2).unwrap();
        let d = verify_moment_consistency(&model, &grid, &ones, &zero, Basis::MonomialParam, 6, 1e-3).unwrap();
        assert!(d <= 1e-5, "{d}");

        let push = ControlSignal::constant(1.0, 10, vec![1.0, 0.0]).unwrap();
        let rest = EnsembleState::new(0.0, vec![0.0; 400]);
        let d = verify_moment_consistency(&model, &grid, &rest, &push, Basis::MonomialParam, 6, 1e-3).unwrap();
        assert!(d <= 1e-5, "{d}");

        let instant = ControlSignal::zeros(0.0, 1, 2).unwrap();
        let d = verify_moment_consistency(&model, &grid, &ones, &instant, Basis::MonomialParam, 6, 1e-3).unwrap();
        assert_eq!(d, 0.0);

        let kuramoto = EnsembleModel::kuramoto(1.0).unwrap();
        let one = ControlSignal::zeros(1.0, 10, 1).unwrap();
        assert!(verify_moment_consistency(&kuramoto, &grid, &ones, &one, Basis::MonomialParam, 6, 1e-3).is_err());
        assert!(verify_moment_consistency(&model, &grid, &ones, &zero, Basis::MonomialOutput, 6, 1e-3).is_err());
    }

    #[test]
    fn output_moments_of_free_linear_flow() {
        // x(t, beta) = a e^{beta t}, so m_k(t) = a^k (e^{kt} - 1) / (kt)
        let a = 0.7;
        let grid = ParameterGrid::uniform(2000, 0.0, 1.0).unwrap();
        let model = EnsembleModel::linear(1).unwrap();
        let control = ControlSignal::zeros(1.0, 10, 1).unwrap();
        let traj = simulate(&model, &EnsembleState::new(0.0, vec![a; 2000]), &grid, &control, 1e-3).unwrap();
        let ms = moment_trajectory(&traj, &grid, Basis::MonomialOutput, 5).unwrap();
        for (t, m) in traj.times.iter().zip(&ms).step_by(50) {
            for k in 0..=5usize {
                let kt = k as f64 * t;
                let exact = if kt == 0.0 { a.powi(k as i32) } else { a.powi(k as i32) * kt.exp_m1() / kt };
                assert!((m.values[k].re - exact).abs() <= 1e-5, "t={t} k={k}");
            }
        }
    }

    #[test]
    fn kuramoto_zeroth_moment_and_constant_ensembles() {
        let grid = ParameterGrid::uniform(50, -1.0, 1.0).unwrap();
        let model = EnsembleModel::kuramoto(1.0).unwrap();
        let theta: Vec<f64> = (0..50).map(|j| 0.1 * j as f64).collect();
        let control = ControlSignal::constant(1.0, 5, vec![0.3]).unwrap();
        let traj = simulate(&model, &EnsembleState::new(0.0, theta), &grid, &control, 1e-2).unwrap();
        for m in moment_trajectory(&traj, &grid, Basis::Fourier, 4).unwrap() {
            assert!((m.values[0].re - 1.0).abs() < 1e-12 && m.values[0].im.abs() < 1e-12);
        }

        let zero_grid = ParameterGrid::uniform(10, 0.0, 1.0).unwrap();
        let frozen = Trajectory {
            times: vec![0.0, 1.0],
            states: vec![vec![0.4; zero_grid.len()]; 2],
        };
        let ms = moment_trajectory(&frozen, &zero_grid, Basis::MonomialOutput, 3).unwrap();
        assert_eq!(ms[0], ms[1]);
    }

    proptest! {
        #[test]
        fn rhs_is_linear(
            m1 in prop::collection::vec(-5.0f64..5.0, 5),
            m2 in prop::collection::vec(-5.0f64..5.0, 5),
            u1 in prop::collection::vec(-5.0f64..5.0, 3),
            u2 in prop::collection::vec(-5.0f64..5.0, 3),
            alpha in -3.0f64..3.0,
        ) {
            let sys = build_linear_moment_system(4, 3).unwrap();
            let m: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| alpha * a + b).collect();
            let u: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| alpha * a + b).collect();
            let lhs = sys.rhs(&m, &u).unwrap();
            let r1 = sys.rhs(&m1, &u1).unwrap();
            let r2 = sys.rhs(&m2, &u2).unwrap();
            for k in 0..5 {
                prop_assert!((lhs[k] - (alpha * r1[k] + r2[k])).abs() <= 1e-12);
            }
        }
    }
}
