//! Parameterized ensembles driven by one broadcast control.
//!
//! An ensemble is a family of scalar systems `dx/dt = F(x, beta, u)` indexed by a
//! parameter `beta` drawn from a quadrature grid. Two dynamics are provided:
//!
//! * [`EnsembleModel::LinearScalar`]: `dx/dt = beta x + sum_i beta^(i-1) u_i`
//! * [`EnsembleModel::Kuramoto`]: `dtheta/dt = omega + K r sin(psi - theta) + u sin(theta)`
//!
//! where `(r, psi)` is the mean field of the phase population.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::ode::{whole_steps, Rk4};

/// Quadrature discretization of the parameter set, with weights forming a probability measure.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl ParameterGrid {
    /// Midpoint grid with `n` equal-weight nodes on `[lo, hi]`.
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::config(format!("parameter grid needs at least 2 members, got {n}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config(format!("invalid parameter bounds [{lo}, {hi}]")));
        }
        let h = (hi - lo) / n as f64;
        let nodes = (0..n).map(|j| lo + (j as f64 + 0.5) * h).collect();
        Ok(Self {
            nodes,
            weights: vec![1.0 / n as f64; n],
        })
    }

    /// Grid from explicit nodes and weights.
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if nodes.len() != weights.len() || nodes.is_empty() {
            return Err(Error::config("nodes and weights must be non-empty and of equal length"));
        }
        if nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("grid nodes must be strictly increasing"));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::config("grid weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("grid weights sum to {total}, expected 1")));
        }
        Ok(Self { nodes, weights })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Piecewise-constant broadcast control on `[0, horizon]`.
///
/// `values[i]` holds the channel amplitudes on the `i`-th of the equal intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    horizon: f64,
    values: Vec<Vec<f64>>,
}

impl ControlSignal {
    pub fn new(horizon: f64, values: Vec<Vec<f64>>) -> Result<Self> {
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!("control horizon must be finite and >= 0, got {horizon}")));
        }
        if values.is_empty() {
            return Err(Error::config("control signal needs at least one interval"));
        }
        let channels = values[0].len();
        if channels == 0 {
            return Err(Error::config("control signal needs at least one channel"));
        }
        for (i, v) in values.iter().enumerate() {
            if v.len() != channels {
                return Err(Error::config(format!(
                    "interval {i} has {} channels, expected {channels}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(format!("interval {i} holds a non-finite control value")));
            }
        }
        Ok(Self { horizon, values })
    }

    pub fn zeros(horizon: f64, intervals: usize, channels: usize) -> Result<Self> {
        Self::new(horizon, vec![vec![0.0; channels]; intervals.max(1)])
    }

    /// Same amplitude on every interval.
    pub fn constant(horizon: f64, intervals: usize, value: Vec<f64>) -> Result<Self> {
        Self::new(horizon, vec![value; intervals.max(1)])
    }

    /// Build a signal from flat interval-major coordinates.
    pub fn from_flat(horizon: f64, channels: usize, flat: &[f64]) -> Result<Self> {
        if channels == 0 || flat.len() % channels != 0 {
            return Err(Error::contract("flat control length is not a multiple of the channel count"));
        }
        Self::new(horizon, flat.chunks(channels).map(<[f64]>::to_vec).collect())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn intervals(&self) -> usize {
        self.values.len()
    }

    pub fn channels(&self) -> usize {
        self.values[0].len()
    }

    pub fn interval_length(&self) -> f64 {
        self.horizon / self.values.len() as f64
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn interval(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    /// Amplitude active at time `t` (right-continuous, clamped to the last interval).
    pub fn value_at(&self, t: f64) -> &[f64] {
        let h = self.interval_length();
        let i = if h > 0.0 { (t / h).floor().max(0.0) as usize } else { 0 };
        &self.values[i.min(self.values.len() - 1)]
    }
}

/// Dynamics shared by every ensemble member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnsembleModel {
    /// `dx/dt = beta x + sum_{i=1..inputs} beta^(i-1) u_i`.
    LinearScalar { inputs: usize },
    /// Phase oscillators with natural frequency `beta`, mean-field coupling and one input channel.
    Kuramoto { coupling: f64 },
}

impl EnsembleModel {
    pub fn linear(inputs: usize) -> Result<Self> {
        if inputs == 0 {
            return Err(Error::config("linear ensemble needs at least one input"));
        }
        Ok(Self::LinearScalar { inputs })
    }

    pub fn kuramoto(coupling: f64) -> Result<Self> {
        if !(coupling >= 0.0 && coupling.is_finite()) {
            return Err(Error::config(format!("coupling strength must be >= 0, got {coupling}")));
        }
        Ok(Self::Kuramoto { coupling })
    }

    pub fn inputs(&self) -> usize {
        match *self {
            Self::LinearScalar { inputs } => inputs,
            Self::Kuramoto { .. } => 1,
        }
    }

    pub fn is_circular(&self) -> bool {
        matches!(self, Self::Kuramoto { .. })
    }
}

/// Member values at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub t: f64,
    pub x: Vec<f64>,
}

impl EnsembleState {
    pub fn new(t: f64, x: Vec<f64>) -> Self {
        Self { t, x }
    }
}

/// Ensemble states sampled at every integration step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory always holds the initial state")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Wrap an angle into `[0, 2pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Complex order parameter `r e^{i psi} = sum_j w_j e^{i theta_j}`, returned as `(r, psi)`.
pub fn mean_field(theta: &[f64], grid: &ParameterGrid) -> (f64, f64) {
    let (mut re, mut im) = (0.0, 0.0);
    for (&th, &w) in theta.iter().zip(grid.weights()) {
        let (s, c) = th.sin_cos();
        re += w * c;
        im += w * s;
    }
    (re.hypot(im).min(1.0), wrap_angle(im.atan2(re)))
}

/// Member derivatives of `model` at `x` under the control vector `u`.
pub fn rhs(model: &EnsembleModel, x: &[f64], grid: &ParameterGrid, u: &[f64]) -> Result<Vec<f64>> {
    if u.len() != model.inputs() {
        return Err(Error::contract(format!(
            "control has {} channels, model expects {}",
            u.len(),
            model.inputs()
        )));
    }
    if x.len() != grid.len() {
        return Err(Error::contract(format!(
            "state has {} members, grid has {}",
            x.len(),
            grid.len()
        )));
    }
    let mut dx = vec![0.0; x.len()];
    rhs_into(model, grid, u, x, &mut dx);
    Ok(dx)
}

pub(crate) fn rhs_into(model: &EnsembleModel, grid: &ParameterGrid, u: &[f64], x: &[f64], dx: &mut [f64]) {
    let beta = grid.nodes();
    match *model {
        EnsembleModel::LinearScalar { .. } => {
            for j in 0..x.len() {
                // Horner evaluation of sum_i beta^(i-1) u_i
                let drive = u.iter().rev().fold(0.0, |acc, &ui| acc * beta[j] + ui);
                dx[j] = beta[j] * x[j] + drive;
            }
        }
        EnsembleModel::Kuramoto { coupling } => {
            let (mut re, mut im) = (0.0, 0.0);
            for (&th, &w) in x.iter().zip(grid.weights()) {
                let (s, c) = th.sin_cos();
                re += w * c;
                im += w * s;
            }
            // K r sin(psi - theta) = K (im cos(theta) - re sin(theta))
            for j in 0..x.len() {
                let (s, c) = x[j].sin_cos();
                dx[j] = beta[j] + coupling * (im * c - re * s) + u[0] * s;
            }
        }
    }
}

/// Integrate the ensemble with fixed-step RK4 over the control horizon.
///
/// Samples are stored at every step; Kuramoto phases are wrapped after each step.
pub fn simulate(
    model: &EnsembleModel,
    x0: &EnsembleState,
    grid: &ParameterGrid,
    control: &ControlSignal,
    dt: f64,
) -> Result<Trajectory> {
    if x0.x.len() != grid.len() {
        return Err(Error::contract("initial state length differs from grid size"));
    }
    if control.channels() != model.inputs() {
        return Err(Error::contract(format!(
            "control has {} channels, model expects {}",
            control.channels(),
            model.inputs()
        )));
    }
    if x0.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::solver(x0.t, "non-finite initial state"));
    }
    let mut times = vec![x0.t];
    let mut x = x0.x.clone();
    if model.is_circular() {
        x.iter_mut().for_each(|v| *v = wrap_angle(*v));
    }
    let mut states = vec![x.clone()];
    if control.horizon() == 0.0 {
        return Ok(Trajectory { times, states });
    }
    let per_interval = whole_steps(control.interval_length(), dt)
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("dt = {dt} does not divide the control interval")))?;

    let mut rk = Rk4::new(x.len());
    let mut step = 0usize;
    for i in 0..control.intervals() {
        let u = control.interval(i);
        for _ in 0..per_interval {
            let t = x0.t + step as f64 * dt;
            rk.step(|_, y, dy| rhs_into(model, grid, u, y, dy), t, &mut x, dt);
            step += 1;
            let t_next = x0.t + step as f64 * dt;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::solver(t_next, "non-finite ensemble state"));
            }
            if model.is_circular() {
                x.iter_mut().for_each(|v| *v = wrap_angle(*v));
            }
            times.push(t_next);
            states.push(x.clone());
        }
    }
    Ok(Trajectory { times, states })
}
