//! Control synthesis for moment tracking.
//!
//! * [`exact_tracking_feedback`]: minimum-norm feedback `u = H^+ (dm*/dt - L m)` on the linear
//!   moment system, optionally co-simulated with the labeled ensemble.
//! * [`output_tracking_feedback`]: the same minimum-norm idea realized on the unlabeled output
//!   moments of the linear ensemble, whose input matrix depends on the current state.
//! * [`lq_tracking_tpbvp`]: fixed-endpoint LQ tracking through the Pontryagin boundary value
//!   problem, solved by single shooting on the Hamiltonian system.
//! * [`direct_shooting`]: gradient descent over a piecewise-constant control for ensembles whose
//!   moment dynamics have no closed form.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::ensemble::{
    mean_field, rhs_into, simulate, wrap_angle, ControlSignal, EnsembleModel, EnsembleState, ParameterGrid,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::moment::{moments_param, raw_fourier_moments, raw_output_moments, weighted_distance, Basis, MomentSequence};
use crate::moment_system::{LinearMomentSystem, RANK_TOLERANCE};
use crate::ode::{whole_steps, Rk4};
use crate::transport::MomentReference;

/// Condition number of `H H'` above which the feedback reports a pseudo-inverse fallback.
pub const PINV_WARNING_CONDITION: f64 = 1e14;

/// Instantaneous distance between a tracked and a reference moment vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `d_M`, integrated as is.
    MomentDistance,
    /// Euclidean norm, integrated squared.
    Euclidean,
}

impl Metric {
    pub fn distance(self, a: &[Complex64], b: &[Complex64]) -> f64 {
        match self {
            Metric::MomentDistance => weighted_distance(a, b),
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt(),
        }
    }

    /// Integrand contributed by an instantaneous distance `e`.
    pub fn integrand(self, e: f64) -> f64 {
        match self {
            Metric::MomentDistance => e,
            Metric::Euclidean => e * e,
        }
    }
}

/// Control-energy term of a tracking cost.
#[derive(Debug, Clone, Copy)]
pub enum Energy<'a> {
    None,
    /// `int u' R u dt` of a piecewise-constant signal, exact.
    PiecewiseConstant {
        control: &'a ControlSignal,
        weight: &'a DMatrix<f64>,
    },
    /// `int u' R u dt` by the trapezoid rule over control samples aligned with the cost instants.
    Sampled {
        values: &'a [Vec<f64>],
        weight: &'a DMatrix<f64>,
    },
}

fn quadratic_form(u: &[f64], r: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..u.len() {
        for j in 0..u.len() {
            s += u[i] * r[(i, j)] * u[j];
        }
    }
    s
}

fn trapezoid_on(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Trapezoid quadrature of the instantaneous metric plus an optional control energy.
pub fn tracking_cost(
    times: &[f64],
    trace: &[MomentSequence],
    reference: &[MomentSequence],
    metric: Metric,
    energy: Energy<'_>,
) -> Result<f64> {
    if trace.len() != times.len() || reference.len() != times.len() {
        return Err(Error::contract(format!(
            "cost grid mismatch: {} instants, {} tracked and {} reference samples",
            times.len(),
            trace.len(),
            reference.len()
        )));
    }
    let mut integrand = Vec::with_capacity(times.len());
    for (a, b) in trace.iter().zip(reference) {
        if a.basis != b.basis || a.order() != b.order() {
            return Err(Error::contract("tracked and reference moments differ in basis or order"));
        }
        integrand.push(metric.integrand(metric.distance(&a.values, &b.values)));
    }
    let mut cost = trapezoid_on(times, &integrand);
    match energy {
        Energy::None => {}
        Energy::PiecewiseConstant { control, weight } => {
            check_weight(weight, control.channels())?;
            let h = control.interval_length();
            cost += control.values().iter().map(|u| quadratic_form(u, weight) * h).sum::<f64>();
        }
        Energy::Sampled { values, weight } => {
            if values.len() != times.len() {
                return Err(Error::contract("control samples are not aligned with the cost instants"));
            }
            check_weight(weight, values.first().map_or(0, Vec::len))?;
            let e: Vec<f64> = values.iter().map(|u| quadratic_form(u, weight)).collect();
            cost += trapezoid_on(times, &e);
        }
    }
    Ok(cost)
}

fn check_weight(weight: &DMatrix<f64>, channels: usize) -> Result<()> {
    if weight.nrows() != channels || weight.ncols() != channels {
        return Err(Error::contract(format!(
            "energy weight is {}x{}, control has {channels} channels",
            weight.nrows(),
            weight.ncols()
        )));
    }
    Ok(())
}

/// Solver-specific numbers reported next to a [`TrackingResult`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub solver: String,
    pub max_residual: f64,
    pub max_control: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gram_condition: Option<f64>,
    pub pseudo_inverse_fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boundary_residuals: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hamiltonian_defect: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matching_condition: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_exhausted: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub cost_history: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_order_parameter: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Output of every tracking solver.
///
/// `moment_trace`, `reference_trace`, `residual_trace` and `control_samples` are aligned with
/// `times`; `control` is the piecewise-constant signal that replays the solution on an ensemble.
#[derive(Debug, Clone)]
pub struct TrackingResult {
    pub times: Vec<f64>,
    pub control: ControlSignal,
    pub control_samples: Vec<Vec<f64>>,
    pub moment_trace: Vec<MomentSequence>,
    pub reference_trace: Vec<MomentSequence>,
    pub residual_trace: Vec<f64>,
    pub metric: Metric,
    pub cost: f64,
    pub costate: Option<Vec<Vec<f64>>>,
    pub ensemble: Option<Trajectory>,
    pub diagnostics: Diagnostics,
}

impl TrackingResult {
    pub fn max_residual(&self) -> f64 {
        self.residual_trace.iter().copied().fold(0.0, f64::max)
    }
}

fn max_abs(values: &[Vec<f64>]) -> f64 {
    values.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Pseudo-inverse with the crate's singular-value cutoff, and the condition of the kept part.
fn pinv(a: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return (DMatrix::zeros(a.ncols(), a.nrows()), f64::INFINITY);
    }
    let cutoff = RANK_TOLERANCE * smax;
    let smin = svd
        .singular_values
        .iter()
        .copied()
        .filter(|&s| s > cutoff)
        .fold(f64::INFINITY, f64::min);
    let p = svd.pseudo_inverse(cutoff).expect("both singular bases were computed");
    (p, smax / smin)
}

fn uniform_steps(reference: &MomentReference, dt: f64) -> Result<(f64, usize)> {
    if reference.times[0] != 0.0 {
        return Err(Error::contract("reference must start at t = 0"));
    }
    let horizon = *reference.times.last().expect("references hold at least two instants");
    let steps = whole_steps(horizon, dt)
        .filter(|&s| s > 0)
        .ok_or_else(|| Error::config(format!("dt = {dt} does not divide the horizon {horizon}")))?;
    Ok((horizon, steps))
}

fn monomial_reference(reference: &MomentReference, q: usize) -> Result<()> {
    if reference.basis() == Basis::Fourier {
        return Err(Error::contract("moment-system tracking needs a monomial reference"));
    }
    if reference.order() < q {
        return Err(Error::contract(format!(
            "reference has order {}, tracking needs {q}",
            reference.order()
        )));
    }
    Ok(())
}

/// `(P_q m*(t), P_q dm*/dt(t))` as real vectors.
fn sample_real(reference: &MomentReference, t: f64, q: usize) -> (Vec<f64>, Vec<f64>) {
    let (m, dm) = reference.sample(t);
    (m[..=q].iter().map(|c| c.re).collect(), dm[..=q].iter().map(|c| c.re).collect())
}

fn real_seq(basis: Basis, v: &[f64]) -> MomentSequence {
    MomentSequence::real(basis, v)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum-norm feedback tracking on the linear moment system.
///
/// The closed loop `dm/dt = L m + H H^+ (dm*/dt - L m)` is integrated with RK4 at step `dt`,
/// re-evaluating the feedback at every stage. The residual trace is the Euclidean tracking error
/// and the cost is its squared integral.
pub fn exact_tracking_feedback(
    sys: &LinearMomentSystem,
    reference: &MomentReference,
    m0: &[f64],
    dt: f64,
) -> Result<TrackingResult> {
    exact_closed_loop(sys, reference, m0, None, dt)
}

/// [`exact_tracking_feedback`] with the labeled linear ensemble driven by the same feedback
/// signal, integrated jointly with the moment state. The ensemble trajectory is returned in
/// [`TrackingResult::ensemble`].
pub fn exact_tracking_with_ensemble(
    sys: &LinearMomentSystem,
    reference: &MomentReference,
    m0: &[f64],
    grid: &ParameterGrid,
    x0: &[f64],
    dt: f64,
) -> Result<TrackingResult> {
    if x0.len() != grid.len() {
        return Err(Error::contract("initial ensemble state differs from grid size"));
    }
    exact_closed_loop(sys, reference, m0, Some((grid, x0)), dt)
}

fn exact_closed_loop(
    sys: &LinearMomentSystem,
    reference: &MomentReference,
    m0: &[f64],
    ensemble: Option<(&ParameterGrid, &[f64])>,
    dt: f64,
) -> Result<TrackingResult> {
    let q = sys.order();
    let n = sys.dim();
    let p = sys.inputs();
    if m0.len() != n {
        return Err(Error::contract(format!("initial moments have length {}, expected {n}", m0.len())));
    }
    monomial_reference(reference, q)?;
    let (horizon, steps) = uniform_steps(reference, dt)?;
    let (hp, _) = pinv(sys.hankel());
    let gram_condition = sys.gram_condition();
    let mut warnings = Vec::new();
    let fallback = !(gram_condition <= PINV_WARNING_CONDITION);
    if fallback {
        warnings.push(format!(
            "H H' has condition {gram_condition:e} (rank {} of {n} rows); using the pseudo-inverse, exact tracking is not guaranteed",
            sys.rank()
        ));
    }
    let feedback = |t: f64, m: &[f64]| -> Vec<f64> {
        let (_, dms) = sample_real(reference, t, q);
        let v = DVector::from_fn(n, |k, _| dms[k] - if k < q { m[k + 1] } else { 0.0 });
        (&hp * v).iter().copied().collect()
    };
    let model = EnsembleModel::LinearScalar { inputs: p };
    let members = ensemble.map_or(0, |(g, _)| g.len());
    let mut y = m0.to_vec();
    if let Some((_, x0)) = ensemble {
        y.extend_from_slice(x0);
    }
    let mut rk = Rk4::new(y.len());
    let mut times = Vec::with_capacity(steps + 1);
    let mut moments = Vec::with_capacity(steps + 1);
    let mut refs = Vec::with_capacity(steps + 1);
    let mut residual = Vec::with_capacity(steps + 1);
    let mut samples = Vec::with_capacity(steps + 1);
    let mut states = Vec::new();
    for s in 0..=steps {
        let t = if s == steps { horizon } else { s as f64 * dt };
        let (ms, _) = sample_real(reference, t, q);
        times.push(t);
        residual.push(euclid(&y[..n], &ms));
        moments.push(real_seq(reference.basis(), &y[..n]));
        refs.push(real_seq(reference.basis(), &ms));
        samples.push(feedback(t, &y[..n]));
        if members > 0 {
            states.push(y[n..].to_vec());
        }
        if s == steps {
            break;
        }
        rk.step(
            |tt, yy, dy| {
                let u = feedback(tt, &yy[..n]);
                let (dm, dx) = dy.split_at_mut(n);
                sys.rhs_into(&yy[..n], &u, dm);
                if let Some((grid, _)) = ensemble {
                    rhs_into(&model, grid, &u, &yy[n..], dx);
                }
            },
            t,
            &mut y,
            dt,
        );
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::solver(t + dt, "closed loop became non-finite"));
        }
    }
    let cost = trapezoid_on(&times, &residual.iter().map(|e| e * e).collect::<Vec<_>>());
    let control = ControlSignal::new(horizon, samples[..steps].to_vec())?;
    let diagnostics = Diagnostics {
        solver: "exact".into(),
        max_residual: residual.iter().copied().fold(0.0, f64::max),
        max_control: max_abs(&samples),
        gram_condition: Some(gram_condition),
        pseudo_inverse_fallback: fallback,
        warnings,
        ..Diagnostics::default()
    };
    let ensemble = ensemble.map(|_| Trajectory {
        times: times.clone(),
        states,
    });
    Ok(TrackingResult {
        times,
        control,
        control_samples: samples,
        moment_trace: moments,
        reference_trace: refs,
        residual_trace: residual,
        metric: Metric::Euclidean,
        cost,
        costate: None,
        ensemble,
        diagnostics,
    })
}

/// Minimum-norm output-moment feedback for the unlabeled linear ensemble.
///
/// For `dx/dt = beta x + sum_i beta^(i-1) u_i` the output moments `m_k = int x^k d lambda`
/// satisfy `dm_k/dt = k int beta x^k d lambda + sum_i u_i k int beta^(i-1) x^(k-1) d lambda`.
/// The input matrix depends on the ensemble state, so the feedback
/// `u = A(x)^+ (dm*/dt - d(x))` is evaluated on the simulated members at every RK4 stage.
pub fn output_tracking_feedback(
    grid: &ParameterGrid,
    x0: &EnsembleState,
    inputs: usize,
    reference: &MomentReference,
    q: usize,
    dt: f64,
) -> Result<TrackingResult> {
    if inputs == 0 || q == 0 {
        return Err(Error::contract("output feedback needs at least one input and q >= 1"));
    }
    if reference.basis() != Basis::MonomialOutput {
        return Err(Error::contract("output feedback needs an output-monomial reference"));
    }
    if reference.order() < q {
        return Err(Error::contract("reference order is below the tracking order"));
    }
    if x0.x.len() != grid.len() {
        return Err(Error::contract("initial ensemble state differs from grid size"));
    }
    let (horizon, steps) = uniform_steps(reference, dt)?;
    let model = EnsembleModel::LinearScalar { inputs };
    let beta = grid.nodes();
    let w = grid.weights();
    let mut worst_condition = 0.0f64;
    let mut feedback = |t: f64, x: &[f64]| -> Vec<f64> {
        let (_, dms) = sample_real(reference, t, q);
        let mut drift = vec![0.0; q + 1];
        let mut a = DMatrix::<f64>::zeros(q + 1, inputs);
        let mut xp = vec![0.0; q + 1];
        let mut bp = vec![0.0; inputs];
        for j in 0..x.len() {
            xp[0] = 1.0;
            for k in 1..=q {
                xp[k] = xp[k - 1] * x[j];
            }
            bp[0] = w[j];
            for i in 1..inputs {
                bp[i] = bp[i - 1] * beta[j];
            }
            for k in 1..=q {
                let kf = k as f64;
                drift[k] += kf * w[j] * beta[j] * xp[k];
                for i in 0..inputs {
                    a[(k, i)] += kf * bp[i] * xp[k - 1];
                }
            }
        }
        let (ap, cond) = pinv(&a);
        worst_condition = worst_condition.max(cond);
        let v = DVector::from_fn(q + 1, |k, _| dms[k] - drift[k]);
        (&ap * v).iter().copied().collect()
    };
    let mut x = x0.x.clone();
    let mut rk = Rk4::new(x.len());
    let mut times = Vec::with_capacity(steps + 1);
    let mut moments = Vec::with_capacity(steps + 1);
    let mut refs = Vec::with_capacity(steps + 1);
    let mut residual = Vec::with_capacity(steps + 1);
    let mut samples = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    for s in 0..=steps {
        let t = if s == steps { horizon } else { s as f64 * dt };
        let (ms, _) = sample_real(reference, t, q);
        let m = raw_output_moments(&x, w, q);
        times.push(t);
        residual.push(euclid(&m, &ms));
        moments.push(real_seq(Basis::MonomialOutput, &m));
        refs.push(real_seq(Basis::MonomialOutput, &ms));
        samples.push(feedback(t, &x));
        states.push(x.clone());
        if s == steps {
            break;
        }
        rk.step(
            |tt, xx, dx| {
                let u = feedback(tt, xx);
                rhs_into(&model, grid, &u, xx, dx);
            },
            t,
            &mut x,
            dt,
        );
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::solver(t + dt, "closed loop became non-finite"));
        }
    }
    let cost = trapezoid_on(&times, &residual.iter().map(|e| e * e).collect::<Vec<_>>());
    let control = ControlSignal::new(horizon, samples[..steps].to_vec())?;
    let mut warnings = Vec::new();
    if worst_condition > PINV_WARNING_CONDITION.sqrt() {
        warnings.push(format!("output input matrix reached condition {worst_condition:e}"));
    }
    let diagnostics = Diagnostics {
        solver: "exact_output".into(),
        max_residual: residual.iter().copied().fold(0.0, f64::max),
        max_control: max_abs(&samples),
        gram_condition: Some(worst_condition * worst_condition),
        pseudo_inverse_fallback: true,
        warnings,
        ..Diagnostics::default()
    };
    Ok(TrackingResult {
        times: times.clone(),
        control,
        control_samples: samples,
        moment_trace: moments,
        reference_trace: refs,
        residual_trace: residual,
        metric: Metric::Euclidean,
        cost,
        costate: None,
        ensemble: Some(Trajectory { times, states }),
        diagnostics,
    })
}

/// Control weight `R` of the LQ tracking problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LqSetup {
    weight: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl LqSetup {
    /// Validates that `weight` is symmetric positive definite.
    pub fn new(weight: DMatrix<f64>) -> Result<Self> {
        if weight.nrows() == 0 || weight.nrows() != weight.ncols() {
            return Err(Error::config("control weight must be a non-empty square matrix"));
        }
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("control weight has non-finite entries"));
        }
        let scale = weight.amax();
        if (&weight - weight.transpose()).amax() > 1e-12 * scale {
            return Err(Error::config("control weight must be symmetric"));
        }
        let min_eig = weight.clone().symmetric_eigen().eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::config(format!(
                "control weight must be positive definite, smallest eigenvalue {min_eig:e}"
            )));
        }
        let inverse = weight
            .clone()
            .cholesky()
            .ok_or_else(|| Error::config("control weight failed Cholesky factorization"))?
            .inverse();
        Ok(Self { weight, inverse })
    }

    pub fn identity(p: usize) -> Result<Self> {
        Self::new(DMatrix::identity(p, p))
    }

    pub fn scaled_identity(p: usize, r: f64) -> Result<Self> {
        Self::new(DMatrix::identity(p, p) * r)
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }
}

/// Fixed-endpoint LQ tracking by single shooting on the Hamiltonian system.
///
/// State and costate obey `d/dt [m; lambda] = [[L, -H R^-1 H'/2], [-2I, -L']] [m; lambda] + 2 [0; m*]`
/// with `m(0) = P_q m*(0)` and `m(T) = P_q m*(T)`. RK4 shooting from `lambda(0) = e_k` and from
/// `lambda(0) = 0` makes `m(T)` an affine function of `lambda(0)`; the boundary-matching system is
/// solved and the trajectory integrated once more from the matched initial costate. The control
/// is `u = -R^-1 H' lambda / 2` and the cost `int |m - m*|^2 + u' R u dt`.
///
/// Weakly controllable moment directions make the matching matrix badly conditioned and the
/// initial costate very large, so the shooting runs in double-double arithmetic; results are
/// reported in `f64`. The Hamiltonian defect estimates the local error of the stored trajectory
/// against the Hamiltonian ODE: the largest gap between one RK4 step of `dt` and two of `dt/2`.
pub fn lq_tracking_tpbvp(
    sys: &LinearMomentSystem,
    reference: &MomentReference,
    setup: &LqSetup,
    dt: f64,
) -> Result<TrackingResult> {
    let q = sys.order();
    let n = sys.dim();
    let p = sys.inputs();
    if setup.inputs() != p {
        return Err(Error::contract(format!(
            "control weight is {0}x{0}, system has {p} inputs",
            setup.inputs()
        )));
    }
    monomial_reference(reference, q)?;
    let (horizon, steps) = uniform_steps(reference, dt)?;
    let gain = -0.5 * &setup.inverse * sys.hankel().transpose();
    let ham = Hamiltonian::new(sys.hankel(), &gain);
    let time = |s: usize| if s == steps { horizon } else { s as f64 * dt };
    let forcing: Vec<[Vec<f64>; 2]> = (0..steps)
        .map(|s| {
            let t = time(s);
            [sample_real(reference, t + 0.5 * dt, q).0, sample_real(reference, t + dt, q).0]
        })
        .collect();
    let start = sample_real(reference, 0.0, q).0;
    let end = sample_real(reference, horizon, q).0;

    let shoot = |z0: Vec<Dd>, forced: bool| -> Vec<Dd> {
        let mut z = z0;
        for s in 0..steps {
            let m_now = if forced { Some(sample_real(reference, time(s), q).0) } else { None };
            z = ham.rk4(&z, dt, forced.then(|| (m_now.as_deref().unwrap_or(&[]), &forcing[s])));
        }
        z
    };
    let mut z0 = vec![Dd::from(0.0); 2 * n];
    for k in 0..n {
        z0[k] = Dd::from(start[k]);
    }
    let free = shoot(z0.clone(), true);
    let mut matching = vec![vec![Dd::from(0.0); n]; n];
    for c in 0..n {
        let mut e = vec![Dd::from(0.0); 2 * n];
        e[n + c] = Dd::from(1.0);
        let col = shoot(e, false);
        for r in 0..n {
            matching[r][c] = col[r];
        }
    }
    let rounded = DMatrix::from_fn(n, n, |r, c| f64::from(matching[r][c]));
    let sv = rounded.svd(false, false).singular_values;
    let matching_condition = sv.max() / sv.min();
    let rhs: Vec<Dd> = (0..n).map(|k| Dd::from(end[k]) - free[k]).collect();
    let lambda0 = match solve_dd(matching, rhs) {
        Some(l) if matching_condition <= MATCHING_CONDITION_LIMIT => l,
        _ => {
            return Err(Error::solver(
                horizon,
                format!(
                    "boundary-matching matrix is singular (condition {matching_condition:e}); the endpoint is unreachable at order {q} with {p} inputs"
                ),
            ))
        }
    };
    for k in 0..n {
        z0[n + k] = lambda0[k];
    }

    let mut states = Vec::with_capacity(steps + 1);
    let mut z = z0;
    let mut defect = 0.0f64;
    for s in 0..=steps {
        states.push(z.clone());
        if s == steps {
            break;
        }
        let m_now = sample_real(reference, time(s), q).0;
        let next = ham.rk4(&z, dt, Some((&m_now, &forcing[s])));
        z = next;
    }
    if states.iter().flatten().any(|v| !f64::from(*v).is_finite()) {
        return Err(Error::solver(horizon, "Hamiltonian shooting overflowed"));
    }
    // step doubling: one step of dt against two of dt/2 from every stored state
    for s in 0..steps {
        let t = time(s);
        let m_now = sample_real(reference, t, q).0;
        let first = [sample_real(reference, t + 0.25 * dt, q).0, sample_real(reference, t + 0.5 * dt, q).0];
        let second = [sample_real(reference, t + 0.75 * dt, q).0, sample_real(reference, t + dt, q).0];
        let one = ham.rk4(&states[s], dt, Some((&m_now, &forcing[s])));
        let half = ham.rk4(&states[s], 0.5 * dt, Some((&m_now, &first)));
        let two = ham.rk4(&half, 0.5 * dt, Some((&first[1], &second)));
        for (a, b) in one.iter().zip(&two) {
            defect = defect.max(f64::from(*a - *b).abs());
        }
    }

    let mut times = Vec::with_capacity(steps + 1);
    let mut moments = Vec::with_capacity(steps + 1);
    let mut refs = Vec::with_capacity(steps + 1);
    let mut residual = Vec::with_capacity(steps + 1);
    let mut samples = Vec::with_capacity(steps + 1);
    let mut costate = Vec::with_capacity(steps + 1);
    let mut integrand = Vec::with_capacity(steps + 1);
    for (s, z) in states.iter().enumerate() {
        let t = time(s);
        let ms = sample_real(reference, t, q).0;
        let m: Vec<f64> = z[..n].iter().map(|v| f64::from(*v)).collect();
        let e = z[..n]
            .iter()
            .zip(&ms)
            .map(|(a, b)| f64::from(*a - *b).powi(2))
            .sum::<f64>()
            .sqrt();
        let u: Vec<f64> = (0..p)
            .map(|i| {
                let mut acc = Dd::from(0.0);
                for k in 0..n {
                    acc += z[n + k] * gain[(i, k)];
                }
                f64::from(acc)
            })
            .collect();
        integrand.push(e * e + quadratic_form(&u, setup.weight()));
        times.push(t);
        residual.push(e);
        moments.push(real_seq(reference.basis(), &m));
        refs.push(real_seq(reference.basis(), &ms));
        samples.push(u);
        costate.push(z[n..].iter().map(|v| f64::from(*v)).collect());
    }
    let cost = trapezoid_on(&times, &integrand);
    let boundary = [residual[0], residual[steps]];
    let control = ControlSignal::new(horizon, samples[..steps].to_vec())?;
    let mut warnings = Vec::new();
    if matching_condition > 1e12 {
        warnings.push(format!("boundary-matching matrix is ill-conditioned ({matching_condition:e})"));
    }
    let diagnostics = Diagnostics {
        solver: "tpbvp".into(),
        max_residual: residual.iter().copied().fold(0.0, f64::max),
        max_control: max_abs(&samples),
        boundary_residuals: Some(boundary),
        hamiltonian_defect: Some(defect),
        matching_condition: Some(matching_condition),
        warnings,
        ..Diagnostics::default()
    };
    Ok(TrackingResult {
        times,
        control,
        control_samples: samples,
        moment_trace: moments,
        reference_trace: refs,
        residual_trace: residual,
        metric: Metric::Euclidean,
        cost,
        costate: Some(costate),
        ensemble: None,
        diagnostics,
    })
}

/// Largest boundary-matching condition number accepted by [`lq_tracking_tpbvp`]; beyond it the
/// `f64` estimate itself is unreliable and the endpoint is treated as unreachable.
pub const MATCHING_CONDITION_LIMIT: f64 = 1e15;

type Dd = TwoFloat;

/// Hamiltonian vector field with the shift structure of `L` spelled out and the dense coupling
/// `H G` (with `G = -R^-1 H' / 2`) formed exactly in double-double.
struct Hamiltonian {
    n: usize,
    coupling: Vec<Vec<Dd>>,
}

impl Hamiltonian {
    fn new(h: &DMatrix<f64>, gain: &DMatrix<f64>) -> Self {
        let n = h.nrows();
        let coupling = (0..n)
            .map(|r| {
                (0..n)
                    .map(|c| {
                        let mut acc = Dd::from(0.0);
                        for i in 0..h.ncols() {
                            acc += Dd::new_mul(h[(r, i)], gain[(i, c)]);
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        Self { n, coupling }
    }

    /// `dz = A z + 2 [0; m*]`, the forcing term omitted when `m_star` is `None`.
    fn field(&self, z: &[Dd], m_star: Option<&[f64]>, dz: &mut [Dd]) {
        let n = self.n;
        let (m, lam) = z.split_at(n);
        for k in 0..n {
            let mut v = if k + 1 < n { m[k + 1] } else { Dd::from(0.0) };
            for (c, l) in lam.iter().enumerate() {
                v += self.coupling[k][c] * *l;
            }
            dz[k] = v;
            let mut w = -2.0 * m[k];
            if k > 0 {
                w -= lam[k - 1];
            }
            if let Some(ms) = m_star {
                w += 2.0 * ms[k];
            }
            dz[n + k] = w;
        }
    }

    /// One RK4 step; `forcing` carries `m*` at the start, the midpoint and the end of the step.
    fn rk4(&self, z: &[Dd], dt: f64, forcing: Option<(&[f64], &[Vec<f64>; 2])>) -> Vec<Dd> {
        let len = z.len();
        let (f0, fh, f1) = match forcing {
            Some((a, [b, c])) => (Some(a), Some(b.as_slice()), Some(c.as_slice())),
            None => (None, None, None),
        };
        let mut k1 = vec![Dd::from(0.0); len];
        let mut k2 = k1.clone();
        let mut k3 = k1.clone();
        let mut k4 = k1.clone();
        let mut tmp = k1.clone();
        let half = 0.5 * dt;
        self.field(z, f0, &mut k1);
        for i in 0..len {
            tmp[i] = z[i] + k1[i] * half;
        }
        self.field(&tmp, fh, &mut k2);
        for i in 0..len {
            tmp[i] = z[i] + k2[i] * half;
        }
        self.field(&tmp, fh, &mut k3);
        for i in 0..len {
            tmp[i] = z[i] + k3[i] * dt;
        }
        self.field(&tmp, f1, &mut k4);
        (0..len)
            .map(|i| z[i] + (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) * (dt / 6.0))
            .collect()
    }
}

/// Double-double quotient refined by two correction terms; the crate's `/` stops at `f64` accuracy.
fn div_dd(a: Dd, b: Dd) -> Dd {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    Dd::new_add(q1, q2) + q3
}

/// Gaussian elimination with partial pivoting in double-double.
fn solve_dd(mut a: Vec<Vec<Dd>>, mut b: Vec<Dd>) -> Option<Vec<Dd>> {
    let n = b.len();
    let scale = a.iter().flatten().map(|v| f64::from(*v).abs()).fold(0.0, f64::max);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| f64::from(a[i][col]).abs().total_cmp(&f64::from(a[j][col]).abs()))?;
        if !(f64::from(a[pivot][col]).abs() > 1e-30 * scale) {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = div_dd(a[r][col], a[col][col]);
            for c in col..n {
                let v = a[col][c];
                a[r][c] -= f * v;
            }
            let v = b[col];
            b[r] -= f * v;
        }
    }
    let mut x = vec![Dd::from(0.0); n];
    for r in (0..n).rev() {
        let mut v = b[r];
        for c in r + 1..n {
            v -= a[r][c] * x[c];
        }
        x[r] = div_dd(v, a[r][r]);
    }
    Some(x)
}

/// Outcome of [`first_order_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationReport {
    /// `|dJ(u; du)| / |du|` per random variation, with `|du|` the L2 norm on `[0, T]`.
    pub ratios: Vec<f64>,
    pub worst: f64,
    /// Largest `|dm(T)| / |du|` of the variations (zero up to the null-space projection).
    pub endpoint_drift: f64,
}

fn simpson(values: &[f64], h: f64) -> f64 {
    let n = values.len() - 1;
    if n == 0 {
        return 0.0;
    }
    let even = n - n % 2;
    let mut s = 0.0;
    if even > 0 {
        s = values[0] + values[even];
        for (i, v) in values.iter().enumerate().take(even).skip(1) {
            s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
        }
        s *= h / 3.0;
    }
    if n % 2 == 1 {
        s += 0.5 * h * (values[n - 1] + values[n]);
    }
    s
}

/// Directional first-order optimality check of an LQ tracking solution.
///
/// Random variations `du` are drawn from a smooth sine/cosine basis and projected so that the
/// linearized state response `d dm/dt = L dm + H du`, `dm(0) = 0`, also ends at `dm(T) = 0`.
/// For each variation the derivative `dJ = 2 int (m - m*)' dm + u' R du dt` is evaluated by
/// Simpson's rule and reported relative to `|du|`.
pub fn first_order_check(
    sys: &LinearMomentSystem,
    result: &TrackingResult,
    setup: &LqSetup,
    trials: usize,
    seed: u64,
) -> Result<VariationReport> {
    let n = sys.dim();
    let p = sys.inputs();
    let steps = result.times.len() - 1;
    if steps < 2 || result.control_samples.len() != steps + 1 {
        return Err(Error::contract("variation check needs a sampled LQ solution"));
    }
    let dt = result.times[1] - result.times[0];
    let horizon = result.times[steps];
    let harmonics = 4;
    let basis_fn = move |j: usize, t: f64| -> f64 {
        let x = std::f64::consts::PI * t / horizon;
        if j < harmonics {
            ((j + 1) as f64 * x).sin()
        } else {
            ((j - harmonics) as f64 * x).cos()
        }
    };
    let per_channel = 2 * harmonics;
    let count = p * per_channel;

    // state response of every basis variation
    let mut responses = Vec::with_capacity(count);
    let mut rk = Rk4::new(n);
    for c in 0..p {
        for j in 0..per_channel {
            let mut dm = vec![0.0; n];
            let mut traj = vec![dm.clone()];
            for s in 0..steps {
                rk.step(
                    |t, y, dy| {
                        let mut u = vec![0.0; p];
                        u[c] = basis_fn(j, t);
                        sys.rhs_into(y, &u, dy);
                    },
                    result.times[s],
                    &mut dm,
                    dt,
                );
                traj.push(dm.clone());
            }
            responses.push(traj);
        }
    }
    let endpoint = DMatrix::from_fn(n, count, |k, b| responses[b][steps][k]);
    let (ep, _) = pinv(&endpoint);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(trials);
    let mut drift = 0.0f64;
    for _ in 0..trials {
        let raw = DVector::from_fn(count, |_, _| rng.random_range(-1.0..1.0));
        let coef = &raw - &ep * (&endpoint * &raw);
        let mut integrand = Vec::with_capacity(steps + 1);
        let mut norm_sq = Vec::with_capacity(steps + 1);
        for s in 0..=steps {
            let t = result.times[s];
            let du: Vec<f64> = (0..p)
                .map(|c| (0..per_channel).map(|j| coef[c * per_channel + j] * basis_fn(j, t)).sum())
                .collect();
            let dm: Vec<f64> = (0..n)
                .map(|k| (0..count).map(|b| coef[b] * responses[b][s][k]).sum())
                .collect();
            let m = result.moment_trace[s].re();
            let ms = result.reference_trace[s].re();
            let track: f64 = (0..n).map(|k| (m[k] - ms[k]) * dm[k]).sum();
            let u = &result.control_samples[s];
            let mut energy = 0.0;
            for i in 0..p {
                for j in 0..p {
                    energy += u[i] * setup.weight()[(i, j)] * du[j];
                }
            }
            integrand.push(2.0 * (track + energy));
            norm_sq.push(du.iter().map(|v| v * v).sum());
        }
        let norm = simpson(&norm_sq, dt).sqrt();
        let end: f64 = (0..n)
            .map(|k| (0..count).map(|b| coef[b] * responses[b][steps][k]).sum::<f64>().powi(2))
            .sum::<f64>()
            .sqrt();
        drift = drift.max(end / norm);
        ratios.push(simpson(&integrand, dt).abs() / norm);
    }
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    Ok(VariationReport {
        ratios,
        worst,
        endpoint_drift: drift,
    })
}

/// Options of [`direct_shooting`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShootingOptions {
    /// Number of piecewise-constant control intervals.
    pub intervals: usize,
    /// Weight of `sum |u|^2 dt` in the cost.
    pub energy_weight: f64,
    /// Gradient iterations.
    pub iterations: usize,
    /// Integration step; reference instants must fall on its grid.
    pub dt: f64,
    /// Relative forward-difference increment.
    pub fd_step: f64,
    /// First trial step of the line search.
    pub initial_step: f64,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self {
            intervals: 50,
            energy_weight: 1e-3,
            iterations: 300,
            dt: 0.005,
            fd_step: 1e-6,
            initial_step: 1.0,
            armijo: 1e-4,
        }
    }
}

/// Finite-difference scheme of [`ShootingProblem::gradient`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FiniteDifference {
    Forward,
    Central,
}

/// Cost evaluation of the direct-shooting problem over flat interval-major control vectors.
#[derive(Debug, Clone)]
pub struct ShootingProblem<'a> {
    model: EnsembleModel,
    grid: &'a ParameterGrid,
    x0: Vec<f64>,
    basis: Basis,
    q: usize,
    ref_times: Vec<f64>,
    ref_values: Vec<Vec<Complex64>>,
    ref_at_step: Vec<Option<usize>>,
    options: ShootingOptions,
    steps_per_interval: usize,
    horizon: f64,
}

#[derive(Debug, Clone)]
struct Evaluation {
    cost: f64,
    errors: Vec<f64>,
    boundaries: Vec<Vec<f64>>,
}

impl<'a> ShootingProblem<'a> {
    pub fn new(
        model: &EnsembleModel,
        grid: &'a ParameterGrid,
        x0: &EnsembleState,
        basis: Basis,
        q: usize,
        reference: &MomentReference,
        options: &ShootingOptions,
    ) -> Result<Self> {
        if x0.x.len() != grid.len() {
            return Err(Error::contract("initial ensemble state differs from grid size"));
        }
        if reference.basis() != basis || reference.order() < q {
            return Err(Error::contract("reference basis or order does not match the tracking problem"));
        }
        if basis == Basis::Fourier && !model.is_circular() {
            return Err(Error::contract("Fourier tracking needs a phase model"));
        }
        if options.intervals == 0 {
            return Err(Error::config("shooting needs at least one control interval"));
        }
        if !(options.energy_weight >= 0.0) || !(options.fd_step > 0.0) || !(options.initial_step > 0.0) {
            return Err(Error::config("shooting weights and steps must be positive"));
        }
        let (horizon, steps) = uniform_steps(reference, options.dt)?;
        let steps_per_interval = whole_steps(horizon / options.intervals as f64, options.dt)
            .filter(|&k| k > 0)
            .ok_or_else(|| Error::config("dt does not divide the control interval"))?;
        let mut ref_at_step = vec![None; steps + 1];
        for (r, &t) in reference.times.iter().enumerate() {
            let s = (t / options.dt).round();
            if (s * options.dt - t).abs() > 1e-9 {
                return Err(Error::config(format!("reference instant {t} is not on the integration grid")));
            }
            ref_at_step[s as usize] = Some(r);
        }
        let mut x = x0.x.clone();
        if model.is_circular() {
            x.iter_mut().for_each(|v| *v = wrap_angle(*v));
        }
        Ok(Self {
            model: *model,
            grid,
            x0: x,
            basis,
            q,
            ref_times: reference.times.clone(),
            ref_values: reference.m_star.iter().map(|m| m.values[..=q].to_vec()).collect(),
            ref_at_step,
            options: options.clone(),
            steps_per_interval,
            horizon,
        })
    }

    /// Number of control coordinates.
    pub fn dim(&self) -> usize {
        self.options.intervals * self.model.inputs()
    }

    pub fn signal(&self, u: &[f64]) -> Result<ControlSignal> {
        ControlSignal::from_flat(self.horizon, self.model.inputs(), u)
    }

    fn moments(&self, x: &[f64]) -> Vec<Complex64> {
        let w = self.grid.weights();
        match self.basis {
            Basis::Fourier => raw_fourier_moments(x, w, self.q),
            Basis::MonomialOutput => raw_output_moments(x, w, self.q)
                .into_iter()
                .map(|v| Complex64::new(v, 0.0))
                .collect(),
            Basis::MonomialParam => moments_param(self.grid, x, self.q).values,
        }
    }

    fn energy(&self, u: &[f64]) -> f64 {
        let h = self.horizon / self.options.intervals as f64;
        self.options.energy_weight * h * u.iter().map(|v| v * v).sum::<f64>()
    }

    /// Simulate from the start of interval `from`, reusing `base` before it.
    fn run(&self, u: &[f64], from: usize, base: Option<&Evaluation>) -> Result<Evaluation> {
        if u.len() != self.dim() {
            return Err(Error::contract(format!("control vector has {} entries, expected {}", u.len(), self.dim())));
        }
        let channels = self.model.inputs();
        let (mut x, mut errors, mut boundaries) = match base {
            Some(b) if from > 0 => (b.boundaries[from].clone(), b.errors.clone(), Vec::new()),
            _ => (self.x0.clone(), vec![0.0; self.ref_times.len()], Vec::with_capacity(self.options.intervals)),
        };
        let record = base.is_none() || from == 0;
        let dt = self.options.dt;
        let mut rk = Rk4::new(x.len());
        let circular = self.model.is_circular();
        let steps = self.options.intervals * self.steps_per_interval;
        for i in from..self.options.intervals {
            if record {
                boundaries.push(x.clone());
            }
            let ui = &u[i * channels..(i + 1) * channels];
            for k in 0..self.steps_per_interval {
                let s = i * self.steps_per_interval + k;
                if let Some(r) = self.ref_at_step[s] {
                    errors[r] = weighted_distance(&self.moments(&x), &self.ref_values[r]);
                }
                rk.step(|_, y, dy| rhs_into(&self.model, self.grid, ui, y, dy), s as f64 * dt, &mut x, dt);
                if circular {
                    x.iter_mut().for_each(|v| *v = wrap_angle(*v));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::solver((s + 1) as f64 * dt, "ensemble state became non-finite"));
                }
            }
        }
        if let Some(r) = self.ref_at_step[steps] {
            errors[r] = weighted_distance(&self.moments(&x), &self.ref_values[r]);
        }
        let cost = trapezoid_on(&self.ref_times, &errors) + self.energy(u);
        if !cost.is_finite() {
            return Err(Error::solver(self.horizon, "shooting cost is not finite"));
        }
        Ok(Evaluation {
            cost,
            errors,
            boundaries,
        })
    }

    /// `J(u) = int d_M(P_q m*, m) dt + energy_weight * sum |u|^2 dt`.
    pub fn cost(&self, u: &[f64]) -> Result<f64> {
        Ok(self.run(u, 0, None)?.cost)
    }

    /// Finite-difference gradient of [`ShootingProblem::cost`].
    pub fn gradient(&self, u: &[f64], scheme: FiniteDifference) -> Result<Vec<f64>> {
        let base = self.run(u, 0, None)?;
        self.gradient_at(u, &base, scheme)
    }

    fn gradient_at(&self, u: &[f64], base: &Evaluation, scheme: FiniteDifference) -> Result<Vec<f64>> {
        let channels = self.model.inputs();
        let mut probe = u.to_vec();
        let mut g = vec![0.0; u.len()];
        for idx in 0..u.len() {
            let h = self.options.fd_step * u[idx].abs().max(1.0);
            let interval = idx / channels;
            probe[idx] = u[idx] + h;
            let plus = self.run(&probe, interval, Some(base))?.cost;
            g[idx] = match scheme {
                FiniteDifference::Forward => (plus - base.cost) / h,
                FiniteDifference::Central => {
                    probe[idx] = u[idx] - h;
                    let minus = self.run(&probe, interval, Some(base))?.cost;
                    (plus - minus) / (2.0 * h)
                }
            };
            probe[idx] = u[idx];
        }
        Ok(g)
    }
}

/// Minimize the moment tracking cost over piecewise-constant controls.
///
/// Gradient descent with forward-difference gradients and Armijo backtracking; the trial step
/// doubles after every accepted iteration. The cost trace is strictly decreasing. The run stops
/// when the line search cannot make progress or when the iteration budget runs out, the latter
/// being flagged in the diagnostics.
pub fn direct_shooting(
    model: &EnsembleModel,
    grid: &ParameterGrid,
    x0: &EnsembleState,
    basis: Basis,
    q: usize,
    reference: &MomentReference,
    options: &ShootingOptions,
    initial: Option<&ControlSignal>,
) -> Result<TrackingResult> {
    let problem = ShootingProblem::new(model, grid, x0, basis, q, reference, options)?;
    let mut u = match initial {
        Some(c) => {
            if c.intervals() != options.intervals || c.channels() != model.inputs() {
                return Err(Error::contract("initial control does not match the shooting grid"));
            }
            c.flat()
        }
        None => vec![0.0; problem.dim()],
    };
    let mut best = problem.run(&u, 0, None)?;
    let mut history = vec![best.cost];
    let mut step = options.initial_step;
    let mut iterations = 0;
    let mut exhausted = true;
    for _ in 0..options.iterations {
        let g = problem.gradient_at(&u, &best, FiniteDifference::Forward)?;
        let gg: f64 = g.iter().map(|v| v * v).sum();
        if !(gg > 0.0) {
            exhausted = false;
            break;
        }
        let mut accepted = None;
        while step >= 1e-14 {
            let trial: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            // blow-ups count as rejected trial steps
            if let Ok(eval) = problem.run(&trial, 0, None) {
                if eval.cost <= best.cost - options.armijo * step * gg {
                    accepted = Some((trial, eval));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, eval)) => {
                u = trial;
                best = eval;
                history.push(best.cost);
                iterations += 1;
                step *= 2.0;
            }
            None => {
                exhausted = false;
                break;
            }
        }
    }

    let control = problem.signal(&u)?;
    let trajectory = simulate(model, x0, grid, &control, options.dt)?;
    let ref_steps: Vec<usize> = problem
        .ref_at_step
        .iter()
        .enumerate()
        .filter_map(|(s, r)| r.map(|_| s))
        .collect();
    let moment_trace: Vec<MomentSequence> = ref_steps
        .iter()
        .map(|&s| MomentSequence {
            basis,
            values: problem.moments(&trajectory.states[s]),
        })
        .collect();
    let reference_trace: Vec<MomentSequence> = problem
        .ref_values
        .iter()
        .map(|v| MomentSequence { basis, values: v.clone() })
        .collect();
    let control_samples: Vec<Vec<f64>> = problem.ref_times.iter().map(|&t| control.value_at(t).to_vec()).collect();
    let final_order_parameter = model
        .is_circular()
        .then(|| mean_field(trajectory.final_state(), grid).0);
    let diagnostics = Diagnostics {
        solver: "shooting".into(),
        max_residual: best.errors.iter().copied().fold(0.0, f64::max),
        max_control: u.iter().fold(0.0f64, |a, v| a.max(v.abs())),
        iterations: Some(iterations),
        budget_exhausted: Some(exhausted && options.iterations > 0),
        cost_history: history,
        final_order_parameter,
        ..Diagnostics::default()
    };
    Ok(TrackingResult {
        times: problem.ref_times.clone(),
        control,
        control_samples,
        moment_trace,
        reference_trace,
        residual_trace: best.errors,
        metric: Metric::MomentDistance,
        cost: best.cost,
        costate: None,
        ensemble: Some(trajectory),
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment_system::{build_linear_moment_system, moment_trajectory};
    use crate::presets::unlabeled_transfer;
    use crate::transport::uniform_times;

    fn constant_reference(m: &[f64], instants: usize) -> MomentReference {
        let times = uniform_times(instants, 1.0);
        MomentReference {
            m_star: vec![MomentSequence::real(Basis::MonomialParam, m); instants],
            dm_star: vec![MomentSequence::real(Basis::MonomialParam, &vec![0.0; m.len()]); instants],
            times,
        }
    }

    #[test]
    fn cost_of_identical_and_offset_traces() {
        let times = uniform_times(11, 2.0);
        let base = MomentSequence::real(Basis::MonomialOutput, &[1.0, 0.5, 0.25, 0.125]);
        let trace = vec![base.clone(); 11];
        for metric in [Metric::MomentDistance, Metric::Euclidean] {
            assert_eq!(tracking_cost(&times, &trace, &trace, metric, Energy::None).unwrap(), 0.0);
        }
        let delta = 0.3;
        let mut shifted = base.clone();
        shifted.values[2].re += delta;
        let offset = vec![shifted; 11];
        let c = tracking_cost(&times, &offset, &trace, Metric::MomentDistance, Energy::None).unwrap();
        assert!((c - 0.25 * delta * 2.0).abs() < 1e-14);
        let c = tracking_cost(&times, &offset, &trace, Metric::Euclidean, Energy::None).unwrap();
        assert!((c - delta * delta * 2.0).abs() < 1e-14);
        assert!(matches!(
            tracking_cost(&times[..5], &trace, &trace, Metric::Euclidean, Energy::None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn piecewise_energy_is_exact() {
        let times = uniform_times(3, 1.0);
        let trace = vec![MomentSequence::real(Basis::MonomialParam, &[1.0, 0.0]); 3];
        let control = ControlSignal::new(1.0, vec![vec![1.0, 2.0], vec![-1.0, 0.0]]).unwrap();
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let c = tracking_cost(
            &times,
            &trace,
            &trace,
            Metric::Euclidean,
            Energy::PiecewiseConstant {
                control: &control,
                weight: &r,
            },
        )
        .unwrap();
        assert!((c - (0.5 * 6.0 + 0.5 * 2.0)).abs() < 1e-14);
    }

    #[test]
    fn equilibrium_reference_needs_minimum_norm_input() {
        let sys = build_linear_moment_system(3, 4).unwrap();
        let m = [0.4, 0.2, -0.1, 0.3];
        let reference = constant_reference(&m, 11);
        let r = exact_tracking_feedback(&sys, &reference, &m, 1e-3).unwrap();
        assert!(r.max_residual() <= 1e-10, "{}", r.max_residual());
        let lm = DVector::from_row_slice(&[m[1], m[2], m[3], 0.0]);
        let expected = sys.hankel_pinv() * (-lm);
        for u in &r.control_samples {
            for (a, b) in u.iter().zip(expected.iter()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
        assert!(!r.diagnostics.pseudo_inverse_fallback);
    }

    #[test]
    fn free_reference_needs_no_input() {
        // m(t) = e^{Lt} m0 is a cubic for q = 3, reproduced exactly by Hermite sampling
        let sys = build_linear_moment_system(3, 2).unwrap();
        let m0 = [1.0, 0.5, 0.3, 0.2];
        let times = uniform_times(21, 1.0);
        let free = |t: f64| {
            let m = [
                m0[0] + m0[1] * t + m0[2] * t * t / 2.0 + m0[3] * t.powi(3) / 6.0,
                m0[1] + m0[2] * t + m0[3] * t * t / 2.0,
                m0[2] + m0[3] * t,
                m0[3],
            ];
            let dm = [m[1], m[2], m[3], 0.0];
            (m, dm)
        };
        let reference = MomentReference {
            m_star: times.iter().map(|&t| MomentSequence::real(Basis::MonomialParam, &free(t).0)).collect(),
            dm_star: times.iter().map(|&t| MomentSequence::real(Basis::MonomialParam, &free(t).1)).collect(),
            times,
        };
        let r = exact_tracking_feedback(&sys, &reference, &m0, 1e-3).unwrap();
        assert!(r.diagnostics.max_control <= 1e-8, "{}", r.diagnostics.max_control);
        assert!(r.max_residual() <= 1e-10);
        // H H' is singular here, so the fallback is reported
        assert!(r.diagnostics.pseudo_inverse_fallback);
        assert!(!r.diagnostics.warnings.is_empty());
    }

    #[test]
    fn exact_feedback_with_ensemble_matches_moments() {
        let sys = build_linear_moment_system(3, 4).unwrap();
        let grid = ParameterGrid::uniform(400, 0.0, 1.0).unwrap();
        let x0 = vec![1.0; 400];
        let m0 = moments_param(&grid, &x0, 3).re();
        let reference = constant_reference(&m0, 11);
        let r = exact_tracking_with_ensemble(&sys, &reference, &m0, &grid, &x0, 1e-3).unwrap();
        let ens = r.ensemble.as_ref().unwrap();
        // the ensemble sees the same input, but its moments are coupled to orders above q
        let last = moments_param(&grid, ens.final_state(), 3).re();
        assert!(last.iter().zip(&m0).all(|(a, b)| a.is_finite() && (a - b).abs() < 1.0));
        assert_eq!(ens.times.len(), r.times.len());
    }

    #[test]
    fn contract_checks() {
        let sys = build_linear_moment_system(3, 2).unwrap();
        let reference = constant_reference(&[1.0, 0.0], 5);
        assert!(matches!(
            exact_tracking_feedback(&sys, &reference, &[1.0, 0.0, 0.0, 0.0], 1e-3),
            Err(Error::Contract(_))
        ));
        let reference = constant_reference(&[1.0, 0.0, 0.0, 0.0], 5);
        assert!(matches!(
            exact_tracking_feedback(&sys, &reference, &[1.0, 0.0], 1e-3),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            exact_tracking_feedback(&sys, &reference, &[1.0, 0.0, 0.0, 0.0], 0.3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lq_setup_validation() {
        assert!(LqSetup::identity(3).is_ok());
        assert!(LqSetup::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(LqSetup::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(LqSetup::new(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0])).is_err());
        assert!(LqSetup::new(DMatrix::zeros(0, 0)).is_err());
    }

    #[test]
    fn lq_zero_reference_is_trivial() {
        let sys = build_linear_moment_system(4, 2).unwrap();
        let reference = constant_reference(&[0.0; 5], 11);
        let r = lq_tracking_tpbvp(&sys, &reference, &LqSetup::identity(2).unwrap(), 1e-2).unwrap();
        assert_eq!(r.cost, 0.0);
        assert!(r.control_samples.iter().flatten().all(|&u| u == 0.0));
        assert!(r.costate.unwrap().iter().flatten().all(|&l| l == 0.0));
    }

    #[test]
    fn lq_solution_meets_boundaries_and_is_stationary() {
        let sys = build_linear_moment_system(4, 2).unwrap();
        let times = uniform_times(51, 1.0);
        let path = |t: f64| [1.0, 0.5 + 0.2 * t, 0.3 - 0.1 * t * t, 0.2 * t, 0.1];
        let dpath = |t: f64| [0.0, 0.2, -0.2 * t, 0.2, 0.0];
        let reference = MomentReference {
            m_star: times.iter().map(|&t| MomentSequence::real(Basis::MonomialParam, &path(t))).collect(),
            dm_star: times.iter().map(|&t| MomentSequence::real(Basis::MonomialParam, &dpath(t))).collect(),
            times,
        };
        let setup = LqSetup::scaled_identity(2, 0.1).unwrap();
        let r = lq_tracking_tpbvp(&sys, &reference, &setup, 1e-3).unwrap();
        let [b0, b1] = r.diagnostics.boundary_residuals.unwrap();
        assert!(b0 <= 1e-12 && b1 <= 1e-12, "{b0} {b1}");
        assert!(r.diagnostics.hamiltonian_defect.unwrap() <= 1e-8);
        let check = first_order_check(&sys, &r, &setup, 10, 3).unwrap();
        assert!(check.worst <= 1e-6, "{:?}", check);
        assert!(check.endpoint_drift <= 1e-8);

        // cost matches its trace plus the sampled energy
        let energy = Energy::Sampled {
            values: &r.control_samples,
            weight: setup.weight(),
        };
        let recomputed = tracking_cost(&r.times, &r.moment_trace, &r.reference_trace, Metric::Euclidean, energy).unwrap();
        assert!((recomputed - r.cost).abs() <= 1e-9 * r.cost.max(1.0));

        // a perturbed control that keeps the endpoints costs more
        let worse = first_order_check(&sys, &r, &LqSetup::scaled_identity(2, 0.2).unwrap(), 3, 3).unwrap();
        assert!(worse.worst > check.worst);
    }

    #[test]
    fn unlabeled_feedback_tracks_moments() {
        let setup = unlabeled_transfer(4, 300).unwrap();
        let r = output_tracking_feedback(&setup.grid, &setup.x0, 4, &setup.reference, 4, 1e-3).unwrap();
        assert!(r.max_residual() <= 1e-6, "{}", r.max_residual());
        assert_eq!(r.ensemble.as_ref().unwrap().states.len(), r.times.len());
    }

    fn small_kuramoto() -> (EnsembleModel, ParameterGrid, EnsembleState) {
        let grid = ParameterGrid::uniform(24, -1.0, 1.0).unwrap();
        let theta = (0..24).map(|j| 0.25 * j as f64).collect();
        (EnsembleModel::kuramoto(1.0).unwrap(), grid, EnsembleState::new(0.0, theta))
    }

    #[test]
    fn shooting_stays_on_free_reference() {
        let (model, grid, x0) = small_kuramoto();
        let dt = 0.01;
        let control = ControlSignal::zeros(1.0, 5, 1).unwrap();
        let traj = simulate(&model, &x0, &grid, &control, dt).unwrap();
        let moments = moment_trajectory(&traj, &grid, Basis::Fourier, 4).unwrap();
        let picks: Vec<usize> = (0..=20).map(|i| i * 5).collect();
        let reference = MomentReference {
            times: picks.iter().map(|&i| traj.times[i]).collect(),
            m_star: picks.iter().map(|&i| moments[i].clone()).collect(),
            dm_star: picks.iter().map(|&i| moments[i].clone()).collect(),
        };
        let opts = ShootingOptions {
            intervals: 5,
            energy_weight: 0.0,
            iterations: 5,
            dt,
            ..ShootingOptions::default()
        };
        let r = direct_shooting(&model, &grid, &x0, Basis::Fourier, 4, &reference, &opts, None).unwrap();
        assert!(r.cost <= 1e-12, "{}", r.cost);
        assert!(r.control.flat().iter().all(|&u| u == 0.0));
        assert_eq!(r.diagnostics.iterations, Some(0));
        assert_eq!(r.diagnostics.budget_exhausted, Some(false));
    }

    fn sync_reference(points: usize) -> MomentReference {
        let (_, grid, x0) = small_kuramoto();
        let mu = crate::measure::EmpiricalMeasure::new(x0.x, grid.weights().to_vec()).unwrap();
        let plan = crate::transport::circular_plan(&mu, 1.0).unwrap();
        crate::transport::ot_moment_reference(&plan, Basis::Fourier, 4, &uniform_times(points, 1.0)).unwrap()
    }

    #[test]
    fn forward_and_central_gradients_agree() {
        let (model, grid, x0) = small_kuramoto();
        let reference = sync_reference(21);
        let opts = ShootingOptions {
            intervals: 5,
            dt: 0.01,
            ..ShootingOptions::default()
        };
        let problem = ShootingProblem::new(&model, &grid, &x0, Basis::Fourier, 4, &reference, &opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let u: Vec<f64> = (0..problem.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fwd = problem.gradient(&u, FiniteDifference::Forward).unwrap();
            let ctr = problem.gradient(&u, FiniteDifference::Central).unwrap();
            let diff: f64 = fwd.iter().zip(&ctr).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = ctr.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff <= 1e-3 * scale, "{diff} vs {scale}");
        }
    }

    #[test]
    fn cached_gradient_matches_full_resimulation() {
        let (model, grid, x0) = small_kuramoto();
        let reference = sync_reference(21);
        let opts = ShootingOptions {
            intervals: 4,
            dt: 0.01,
            ..ShootingOptions::default()
        };
        let problem = ShootingProblem::new(&model, &grid, &x0, Basis::Fourier, 4, &reference, &opts).unwrap();
        let u = vec![0.3, -0.2, 0.5, 0.1];
        let g = problem.gradient(&u, FiniteDifference::Forward).unwrap();
        let base = problem.cost(&u).unwrap();
        for i in 0..4 {
            let mut v = u.clone();
            let h = opts.fd_step * u[i].abs().max(1.0);
            v[i] += h;
            let full = (problem.cost(&v).unwrap() - base) / h;
            assert!((full - g[i]).abs() <= 1e-12 * full.abs().max(1.0));
        }
    }

    #[test]
    fn shooting_cost_trace_is_monotone() {
        let (model, grid, x0) = small_kuramoto();
        let reference = sync_reference(21);
        let opts = ShootingOptions {
            intervals: 5,
            dt: 0.01,
            iterations: 15,
            ..ShootingOptions::default()
        };
        let r = direct_shooting(&model, &grid, &x0, Basis::Fourier, 4, &reference, &opts, None).unwrap();
        let h = &r.diagnostics.cost_history;
        assert!(h.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(*h.last().unwrap(), r.cost);
        let energy = opts.energy_weight * DMatrix::identity(1, 1);
        let recomputed = tracking_cost(
            &r.times,
            &r.moment_trace,
            &r.reference_trace,
            Metric::MomentDistance,
            Energy::PiecewiseConstant {
                control: &r.control,
                weight: &energy,
            },
        )
        .unwrap();
        assert!((recomputed - r.cost).abs() <= 1e-9);
        assert!(r.diagnostics.final_order_parameter.is_some());
    }

    #[test]
    fn shooting_rejects_misaligned_reference() {
        let (model, grid, x0) = small_kuramoto();
        let reference = sync_reference(21);
        let opts = ShootingOptions {
            intervals: 5,
            dt: 0.03,
            ..ShootingOptions::default()
        };
        assert!(matches!(
            ShootingProblem::new(&model, &grid, &x0, Basis::Fourier, 4, &reference, &opts),
            Err(Error::Config(_))
        ));
        let opts = ShootingOptions {
            intervals: 5,
            dt: 0.01,
            ..ShootingOptions::default()
        };
        assert!(ShootingProblem::new(&model, &grid, &x0, Basis::MonomialOutput, 4, &reference, &opts).is_err());
    }
}
