//! Scenario files and the `simulate`, `plan`, `track` and `validate` commands.
//!
//! A scenario is a TOML file; unknown keys are rejected. Every command writes into an output
//! directory (`--out`, or `output` in the scenario). CSV files carry a header row and numbers in
//! `{:.16e}` format.
//!
//! | file | columns |
//! |------|---------|
//! | `trajectory.csv` | `t, member_0, .., member_{n-1}` |
//! | `reference.csv` | `t, m0_re, m0_im, .., mq_im, dm0_re, dm0_im, .., dmq_im` |
//! | `control.csv` | `t, u_1, .., u_p` |
//! | `moments.csv` | `t, m0_re, m0_im, .., ref_m0_re, ref_m0_im, ..` |
//! | `residual.csv` | `t, residual` |

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ensemble::{simulate, wrap_angle, ControlSignal, EnsembleModel, EnsembleState, ParameterGrid, Trajectory};
use crate::error::{Error, Result};
use crate::measure::{
    gaussian_mixture, pushforward, sample_members, truncated_gaussian, wasserstein, EmpiricalMeasure, GridDensity,
    Measure1d, MixtureComponent,
};
use crate::moment::{moment_metric, moments_density, moments_fourier, moments_output, moments_param, Basis, MomentSequence};
use crate::moment_system::build_linear_moment_system;
use crate::presets::DENSITY_INTERVALS;
use crate::tracking::{
    direct_shooting, exact_tracking_with_ensemble, lq_tracking_tpbvp, output_tracking_feedback, LqSetup,
    ShootingOptions, TrackingResult,
};
use crate::transport::{
    arc_distance, circular_plan, mccann_plan, ot_moment_reference, uniform_times, MomentReference,
    DEFAULT_REFERENCE_INSTANTS,
};

/// Largest truncation order a scenario may ask for.
pub const MAX_ORDER: usize = 16;
/// Members drawn for validation unless the scenario says otherwise.
pub const DEFAULT_SAMPLES: usize = 1000;
pub const DEFAULT_SEED: u64 = 42;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;
pub const EXIT_VALIDATION: u8 = 4;

/// Ensemble dynamics and parameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Linear {
        inputs: usize,
        members: usize,
        #[serde(default = "unit_interval")]
        omega: [f64; 2],
    },
    Kuramoto {
        coupling: f64,
        members: usize,
        #[serde(default = "symmetric_interval")]
        omega: [f64; 2],
    },
}

fn unit_interval() -> [f64; 2] {
    [0.0, 1.0]
}

fn symmetric_interval() -> [f64; 2] {
    [-1.0, 1.0]
}

/// A probability measure, or a constant initial condition.
///
/// Gaussians and mixtures are truncated to `[0, 1]`. `constant` puts every member at `value`; as
/// a target it is the point mass at `value` (an angle for the Fourier basis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    #[serde(alias = "point_mass")]
    Constant { value: f64 },
    TruncatedGaussian { mean: f64, sd: f64 },
    Mixture { components: Vec<ComponentSpec> },
    Uniform { lo: f64, hi: f64 },
    UniformCircle {},
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Open-loop control used by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    Zero {},
    Constant {
        value: Vec<f64>,
    },
    Piecewise {
        values: Vec<Vec<f64>>,
    },
}

/// Tracking solver used by `track`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverSpec {
    /// Minimum-norm feedback; labeled (`monomial_param`) or output (`monomial_output`) moments.
    Exact {},
    /// Fixed-endpoint LQ tracking with weight `r I`, or the full matrix `weight`.
    Tpbvp {
        #[serde(default = "one")]
        r: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weight: Option<Vec<Vec<f64>>>,
    },
    /// Direct shooting; the integration step is the scenario `dt`.
    Shooting {
        #[serde(default = "shooting_intervals")]
        intervals: usize,
        #[serde(default = "shooting_energy")]
        energy_weight: f64,
        #[serde(default = "shooting_iterations")]
        iterations: usize,
        #[serde(default = "shooting_fd_step")]
        fd_step: f64,
        #[serde(default = "shooting_initial_step")]
        initial_step: f64,
        #[serde(default = "shooting_armijo")]
        armijo: f64,
    },
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self::Zero {}
    }
}

fn one() -> f64 {
    1.0
}
fn shooting_intervals() -> usize {
    ShootingOptions::default().intervals
}
fn shooting_energy() -> f64 {
    ShootingOptions::default().energy_weight
}
fn shooting_iterations() -> usize {
    ShootingOptions::default().iterations
}
fn shooting_fd_step() -> f64 {
    ShootingOptions::default().fd_step
}
fn shooting_initial_step() -> f64 {
    ShootingOptions::default().initial_step
}
fn shooting_armijo() -> f64 {
    ShootingOptions::default().armijo
}

/// Acceptance thresholds; a violated one makes `track` or `validate` exit with code 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_boundary_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_order_parameter: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_wasserstein: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_moment_distance: Option<f64>,
    /// Members drawn (without replacement) for the empirical output measure in `validate`.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            max_residual: None,
            max_boundary_residual: None,
            min_order_parameter: None,
            max_wasserstein: None,
            max_moment_distance: None,
            samples: DEFAULT_SAMPLES,
        }
    }
}

fn default_instants() -> usize {
    DEFAULT_REFERENCE_INSTANTS
}

/// Everything a command needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub basis: Basis,
    pub q: usize,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default = "default_instants")]
    pub reference_instants: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub model: ModelSpec,
    pub initial: MeasureSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<MeasureSpec>,
    #[serde(default)]
    pub control: ControlSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSpec>,
    #[serde(default)]
    pub validation: Thresholds,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        s.check()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read scenario {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Range checks beyond what the schema enforces.
    pub fn check(&self) -> Result<()> {
        if self.q == 0 || self.q > MAX_ORDER {
            return Err(Error::config(format!("q must lie in 1..={MAX_ORDER}, got {}", self.q)));
        }
        positive("dt", self.dt)?;
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::config(format!("horizon must be finite and >= 0, got {}", self.horizon)));
        }
        if self.reference_instants < 2 {
            return Err(Error::config("reference_instants must be at least 2"));
        }
        let (members, omega) = match &self.model {
            ModelSpec::Linear { inputs, members, omega } => {
                if *inputs == 0 {
                    return Err(Error::config("model.inputs must be at least 1"));
                }
                (*members, omega)
            }
            ModelSpec::Kuramoto { coupling, members, omega } => {
                if !(*coupling >= 0.0 && coupling.is_finite()) {
                    return Err(Error::config(format!("model.coupling must be >= 0, got {coupling}")));
                }
                (*members, omega)
            }
        };
        if members < 2 {
            return Err(Error::config(format!("model.members must be at least 2, got {members}")));
        }
        if !(omega[0] < omega[1] && omega[0].is_finite() && omega[1].is_finite()) {
            return Err(Error::config(format!("model.omega must be an interval, got {omega:?}")));
        }
        if self.validation.samples == 0 {
            return Err(Error::config("validation.samples must be at least 1"));
        }
        match &self.solver {
            Some(SolverSpec::Tpbvp { r, weight }) => {
                if weight.is_none() {
                    positive("solver.r", *r)?;
                }
            }
            Some(SolverSpec::Shooting {
                intervals,
                energy_weight,
                iterations: _,
                fd_step,
                initial_step,
                armijo,
            }) => {
                if *intervals == 0 {
                    return Err(Error::config("solver.intervals must be at least 1"));
                }
                if !(*energy_weight >= 0.0 && energy_weight.is_finite()) {
                    return Err(Error::config("solver.energy_weight must be >= 0"));
                }
                positive("solver.fd_step", *fd_step)?;
                positive("solver.initial_step", *initial_step)?;
                if !(*armijo > 0.0 && *armijo < 1.0) {
                    return Err(Error::config("solver.armijo must lie in (0, 1)"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn model(&self) -> Result<EnsembleModel> {
        match self.model {
            ModelSpec::Linear { inputs, .. } => EnsembleModel::linear(inputs),
            ModelSpec::Kuramoto { coupling, .. } => EnsembleModel::kuramoto(coupling),
        }
    }

    pub fn grid(&self) -> Result<ParameterGrid> {
        match self.model {
            ModelSpec::Linear { members, omega, .. } | ModelSpec::Kuramoto { members, omega, .. } => {
                ParameterGrid::uniform(members, omega[0], omega[1])
            }
        }
    }

    /// Initial member values.
    ///
    /// Labeled moments take `x(beta)` to be the initial density; output moments place member `j`
    /// at the `(j + 1/2)/n` quantile; on the circle `uniform_circle` spaces the phases evenly.
    pub fn initial_state(&self) -> Result<EnsembleState> {
        let grid = self.grid()?;
        let n = grid.len();
        let x = match (&self.initial, self.basis) {
            (MeasureSpec::Constant { value }, Basis::Fourier) => vec![wrap_angle(*value); n],
            (MeasureSpec::Constant { value }, _) => vec![*value; n],
            (MeasureSpec::UniformCircle {}, Basis::Fourier) => {
                (0..n).map(|j| std::f64::consts::TAU * (j as f64 + 0.5) / n as f64).collect()
            }
            (MeasureSpec::UniformCircle {}, _) => {
                return Err(Error::config("initial uniform_circle needs the fourier basis"));
            }
            (_, Basis::Fourier) => {
                return Err(Error::config("the fourier basis takes a constant or uniform_circle initial condition"));
            }
            (spec, Basis::MonomialParam) => {
                let f = density(spec)?;
                grid.nodes().iter().map(|&b| f.eval(b)).collect()
            }
            (spec, Basis::MonomialOutput) => {
                let table = density(spec)?.cdf();
                (0..n).map(|j| table.quantile((j as f64 + 0.5) / n as f64)).collect()
            }
        };
        Ok(EnsembleState::new(0.0, x))
    }

    fn target(&self) -> Result<&MeasureSpec> {
        self.target
            .as_ref()
            .ok_or_else(|| Error::config("scenario has no [target] table"))
    }

    /// Displacement-interpolation reference on `reference_instants` uniform instants.
    pub fn reference(&self) -> Result<MomentReference> {
        if !(self.horizon > 0.0) {
            return Err(Error::config("planning needs a positive horizon"));
        }
        let times = uniform_times(self.reference_instants, self.horizon);
        let target = self.target()?;
        let plan = match self.basis {
            Basis::MonomialParam => {
                if matches!(self.initial, MeasureSpec::Constant { .. }) {
                    return Err(Error::config("labeled moments need an initial density, not a constant"));
                }
                mccann_plan(&density(&self.initial)?, &density(target)?)
            }
            Basis::MonomialOutput => {
                let x0 = self.initial_state()?;
                let start = pushforward(&self.grid()?, &x0.x)?;
                match target {
                    MeasureSpec::Constant { value } => mccann_plan(&start, &EmpiricalMeasure::point_mass(*value)?),
                    spec => mccann_plan(&start, &density(spec)?),
                }
            }
            Basis::Fourier => {
                let MeasureSpec::Constant { value } = target else {
                    return Err(Error::config("a fourier target must be a constant phase"));
                };
                let x0 = self.initial_state()?;
                circular_plan(&pushforward(&self.grid()?, &x0.x)?, *value)?
            }
        };
        ot_moment_reference(&plan, self.basis, self.q, &times)
    }

    pub fn control(&self) -> Result<ControlSignal> {
        let p = self.model()?.inputs();
        match &self.control {
            ControlSpec::Zero {} => ControlSignal::zeros(self.horizon, 1, p),
            ControlSpec::Constant { value } => ControlSignal::constant(self.horizon, 1, value.clone()),
            ControlSpec::Piecewise { values } => ControlSignal::new(self.horizon, values.clone()),
        }
    }
}

fn density(spec: &MeasureSpec) -> Result<GridDensity> {
    match spec {
        MeasureSpec::TruncatedGaussian { mean, sd } => truncated_gaussian(*mean, *sd, DENSITY_INTERVALS),
        MeasureSpec::Mixture { components } => gaussian_mixture(
            &components
                .iter()
                .map(|c| MixtureComponent {
                    weight: c.weight,
                    mean: c.mean,
                    sd: c.sd,
                })
                .collect::<Vec<_>>(),
            DENSITY_INTERVALS,
        ),
        MeasureSpec::Uniform { lo, hi } => {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::config(format!("invalid uniform support [{lo}, {hi}]")));
            }
            let height = 1.0 / (hi - lo);
            GridDensity::from_fn(*lo, *hi, DENSITY_INTERVALS, |_| height)
        }
        MeasureSpec::Constant { .. } | MeasureSpec::UniformCircle {} => {
            Err(Error::config(format!("{spec:?} has no density")))
        }
    }
}

fn out_dir(scenario: &Scenario, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| scenario.output.clone())
        .ok_or_else(|| Error::config("no output directory: pass --out or set `output`"))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::config(format!("{other:?}")),
    }
}

fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:.16e}"))).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn complex_header(prefix: &str, q: usize) -> Vec<String> {
    (0..=q)
        .flat_map(|k| [format!("{prefix}{k}_re"), format!("{prefix}{k}_im")])
        .collect()
}

fn complex_row(row: &mut Vec<f64>, values: &[Complex64]) {
    for c in values {
        row.push(c.re);
        row.push(c.im);
    }
}

fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let n = traj.states.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|j| format!("member_{j}")));
    write_csv(
        path,
        &header,
        traj.times.iter().zip(&traj.states).map(|(&t, x)| {
            let mut row = Vec::with_capacity(n + 1);
            row.push(t);
            row.extend_from_slice(x);
            row
        }),
    )
}

/// Last row of a `trajectory.csv`.
pub fn read_final_state(path: &Path) -> Result<EnsembleState> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::config(format!("cannot read {}: {io}", path.display())),
        other => Error::config(format!("{other:?}")),
    })?;
    let mut last = None;
    for rec in r.records() {
        last = Some(rec.map_err(csv_error)?);
    }
    let rec = last.ok_or_else(|| Error::config(format!("{} holds no rows", path.display())))?;
    let values = rec
        .iter()
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    Ok(EnsembleState::new(values[0], values[1..].to_vec()))
}

/// `trajectory.csv` from an open-loop run.
pub fn cmd_simulate(scenario: &Scenario, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out_dir(scenario, out)?;
    let traj = simulate(
        &scenario.model()?,
        &scenario.initial_state()?,
        &scenario.grid()?,
        &scenario.control()?,
        scenario.dt,
    )?;
    let path = dir.join("trajectory.csv");
    write_trajectory(&path, &traj)?;
    Ok(path)
}

/// `reference.csv` with the reference moments and their time derivatives.
pub fn cmd_plan(scenario: &Scenario, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out_dir(scenario, out)?;
    let reference = scenario.reference()?;
    let q = reference.order();
    let mut header = vec!["t".to_string()];
    header.extend(complex_header("m", q));
    header.extend(complex_header("dm", q));
    let path = dir.join("reference.csv");
    write_csv(
        &path,
        &header,
        (0..reference.times.len()).map(|i| {
            let mut row = vec![reference.times[i]];
            complex_row(&mut row, &reference.m_star[i].values);
            complex_row(&mut row, &reference.dm_star[i].values);
            row
        }),
    )?;
    Ok(path)
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub solver: String,
    pub basis: Basis,
    pub q: usize,
    pub p: usize,
    pub cost: f64,
    pub max_residual: f64,
    pub boundary_residuals: Option<[f64; 2]>,
    pub final_order_parameter: Option<f64>,
    pub diagnostics: crate::tracking::Diagnostics,
    pub violations: Vec<String>,
}

/// Run the configured solver.
pub fn run_solver(scenario: &Scenario) -> Result<TrackingResult> {
    let solver = scenario
        .solver
        .as_ref()
        .ok_or_else(|| Error::config("scenario has no [solver] table"))?;
    let model = scenario.model()?;
    let grid = scenario.grid()?;
    let x0 = scenario.initial_state()?;
    let reference = scenario.reference()?;
    let q = scenario.q;
    let p = model.inputs();
    let linear_only = || {
        if matches!(model, EnsembleModel::LinearScalar { .. }) {
            Ok(())
        } else {
            Err(Error::config("this solver needs the linear model"))
        }
    };
    match solver {
        SolverSpec::Exact {} => {
            linear_only()?;
            match scenario.basis {
                Basis::MonomialParam => {
                    let sys = build_linear_moment_system(q, p)?;
                    let m0 = reference.m_star[0].re();
                    exact_tracking_with_ensemble(&sys, &reference, &m0, &grid, &x0.x, scenario.dt)
                }
                Basis::MonomialOutput => output_tracking_feedback(&grid, &x0, p, &reference, q, scenario.dt),
                Basis::Fourier => Err(Error::config("exact tracking needs a monomial basis")),
            }
        }
        SolverSpec::Tpbvp { r, weight } => {
            linear_only()?;
            if scenario.basis != Basis::MonomialParam {
                return Err(Error::config("the tpbvp solver needs the monomial_param basis"));
            }
            let setup = match weight {
                Some(rows) => {
                    if rows.len() != p || rows.iter().any(|row| row.len() != p) {
                        return Err(Error::config(format!("solver.weight must be {p} x {p}")));
                    }
                    LqSetup::new(nalgebra::DMatrix::from_row_iterator(p, p, rows.iter().flatten().copied()))?
                }
                None => LqSetup::scaled_identity(p, *r)?,
            };
            let sys = build_linear_moment_system(q, p)?;
            let mut result = lq_tracking_tpbvp(&sys, &reference, &setup, scenario.dt)?;
            result.ensemble = Some(simulate(&model, &x0, &grid, &result.control, scenario.dt)?);
            Ok(result)
        }
        SolverSpec::Shooting {
            intervals,
            energy_weight,
            iterations,
            fd_step,
            initial_step,
            armijo,
        } => {
            let options = ShootingOptions {
                intervals: *intervals,
                energy_weight: *energy_weight,
                iterations: *iterations,
                dt: scenario.dt,
                fd_step: *fd_step,
                initial_step: *initial_step,
                armijo: *armijo,
            };
            direct_shooting(&model, &grid, &x0, scenario.basis, q, &reference, &options, None)
        }
    }
}

fn check_track(scenario: &Scenario, result: &TrackingResult) -> Vec<String> {
    let th = &scenario.validation;
    let mut v = Vec::new();
    if let Some(limit) = th.max_residual {
        let r = result.max_residual();
        if !(r <= limit) {
            v.push(format!("max residual {r:e} exceeds {limit:e}"));
        }
    }
    if let Some(limit) = th.max_boundary_residual {
        match result.diagnostics.boundary_residuals {
            Some([a, b]) if a <= limit && b <= limit => {}
            Some([a, b]) => v.push(format!("boundary residuals {a:e}, {b:e} exceed {limit:e}")),
            None => v.push("solver reports no boundary residuals".into()),
        }
    }
    if let Some(limit) = th.min_order_parameter {
        match result.diagnostics.final_order_parameter {
            Some(r) if r >= limit => {}
            Some(r) => v.push(format!("final order parameter {r} below {limit}")),
            None => v.push("solver reports no order parameter".into()),
        }
    }
    v
}

/// `control.csv`, `moments.csv`, `residual.csv`, `summary.json`, and `trajectory.csv` when the
/// solver realizes the control on the ensemble.
pub fn cmd_track(scenario: &Scenario, out: Option<&Path>) -> Result<Summary> {
    let dir = out_dir(scenario, out)?;
    let result = run_solver(scenario)?;
    let p = scenario.model()?.inputs();
    let q = scenario.q;

    let mut header = vec!["t".to_string()];
    header.extend((1..=p).map(|i| format!("u_{i}")));
    write_csv(
        &dir.join("control.csv"),
        &header,
        result.times.iter().zip(&result.control_samples).map(|(&t, u)| {
            let mut row = vec![t];
            row.extend_from_slice(u);
            row
        }),
    )?;

    let mut header = vec!["t".to_string()];
    header.extend(complex_header("m", q));
    header.extend(complex_header("ref_m", q));
    write_csv(
        &dir.join("moments.csv"),
        &header,
        (0..result.times.len()).map(|i| {
            let mut row = vec![result.times[i]];
            complex_row(&mut row, &result.moment_trace[i].values[..=q]);
            complex_row(&mut row, &result.reference_trace[i].values[..=q]);
            row
        }),
    )?;

    write_csv(
        &dir.join("residual.csv"),
        &["t".to_string(), "residual".to_string()],
        result.times.iter().zip(&result.residual_trace).map(|(&t, &r)| vec![t, r]),
    )?;

    if let Some(traj) = &result.ensemble {
        write_trajectory(&dir.join("trajectory.csv"), traj)?;
    }

    let violations = check_track(scenario, &result);
    let summary = Summary {
        solver: result.diagnostics.solver.clone(),
        basis: scenario.basis,
        q,
        p,
        cost: result.cost,
        max_residual: result.max_residual(),
        boundary_residuals: result.diagnostics.boundary_residuals,
        final_order_parameter: result.diagnostics.final_order_parameter,
        diagnostics: result.diagnostics.clone(),
        violations: violations.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    if !violations.is_empty() {
        return Err(Error::Validation(violations.join("; ")));
    }
    Ok(summary)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::config(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Contents of `validation.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Validation {
    /// `W_2` on the line, or its circular analogue for phases.
    pub wasserstein: f64,
    pub circular: bool,
    pub moment_distance: f64,
    pub samples: usize,
    pub seed: u64,
    pub final_time: f64,
    pub max_wasserstein: Option<f64>,
    pub max_moment_distance: Option<f64>,
    pub pass: bool,
}

/// `W_2` to the point mass at `c` on the circle.
fn circular_w2(mu: &EmpiricalMeasure, c: f64) -> f64 {
    let total = mu.mass();
    let s: f64 = mu
        .points()
        .iter()
        .zip(mu.weights())
        .map(|(&x, &w)| w * arc_distance(x, c).powi(2))
        .sum();
    (s / total).sqrt()
}

fn moments_of(spec: &MeasureSpec, basis: Basis, q: usize) -> Result<MomentSequence> {
    match (spec, basis) {
        (MeasureSpec::Constant { value }, Basis::Fourier) => {
            moments_fourier(&EmpiricalMeasure::point_mass(wrap_angle(*value))?, q)
        }
        (MeasureSpec::Constant { value }, Basis::MonomialOutput) => {
            moments_output(&EmpiricalMeasure::point_mass(*value)?, q)
        }
        (spec, Basis::MonomialParam | Basis::MonomialOutput) => {
            let m = moments_density(&density(spec)?, q);
            Ok(MomentSequence::real(basis, &m.re()))
        }
        (spec, Basis::Fourier) => Err(Error::config(format!("{spec:?} is not a phase target"))),
    }
}

/// Compare the final ensemble of `trajectory` (default `<out>/trajectory.csv`) with the target.
///
/// Labeled runs read the final state as a density on the parameter grid (negative values are
/// clipped); output runs draw `validation.samples` members with `seed`.
pub fn cmd_validate(
    scenario: &Scenario,
    out: Option<&Path>,
    trajectory: Option<&Path>,
    seed: u64,
) -> Result<Validation> {
    let dir = out_dir(scenario, out)?;
    let path = trajectory.map(Path::to_path_buf).unwrap_or_else(|| dir.join("trajectory.csv"));
    let last = read_final_state(&path)?;
    let grid = scenario.grid()?;
    if last.x.len() != grid.len() {
        return Err(Error::config(format!(
            "{} has {} members, the scenario {}",
            path.display(),
            last.x.len(),
            grid.len()
        )));
    }
    let target = scenario.target()?;
    let q = scenario.q;
    let th = &scenario.validation;
    let want = moments_of(target, scenario.basis, q)?;
    let (w2, dm, samples, circular) = match scenario.basis {
        Basis::MonomialParam => {
            let weights: Vec<f64> = grid.weights().iter().zip(&last.x).map(|(w, x)| w * x.max(0.0)).collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Validation("final state has no positive mass".into()));
            }
            let mu = EmpiricalMeasure::new(grid.nodes().to_vec(), weights.iter().map(|w| w / total).collect())?;
            let w2 = wasserstein(&mu, &density(target)?, 2.0);
            let dm = moment_metric(&moments_param(&grid, &last.x, q), &want)?;
            (w2, dm, grid.len(), false)
        }
        Basis::MonomialOutput => {
            let mu = sample_members(&last.x, th.samples, seed)?;
            let w2 = match target {
                MeasureSpec::Constant { value } => wasserstein(&mu, &EmpiricalMeasure::point_mass(*value)?, 2.0),
                spec => wasserstein(&mu, &density(spec)?, 2.0),
            };
            let dm = moment_metric(&moments_output(&mu, q)?, &want)?;
            (w2, dm, mu.len(), false)
        }
        Basis::Fourier => {
            let MeasureSpec::Constant { value } = target else {
                return Err(Error::config("a fourier target must be a constant phase"));
            };
            let phases: Vec<f64> = last.x.iter().map(|&x| wrap_angle(x)).collect();
            let mu = sample_members(&phases, th.samples, seed)?;
            let w2 = circular_w2(&mu, wrap_angle(*value));
            let dm = moment_metric(&moments_fourier(&mu, q)?, &want)?;
            (w2, dm, mu.len(), true)
        }
    };
    let pass = th.max_wasserstein.is_none_or(|l| w2 <= l) && th.max_moment_distance.is_none_or(|l| dm <= l);
    let report = Validation {
        wasserstein: w2,
        circular,
        moment_distance: dm,
        samples,
        seed,
        final_time: last.t,
        max_wasserstein: th.max_wasserstein,
        max_moment_distance: th.max_moment_distance,
        pass,
    };
    write_json(&dir.join("validation.json"), &report)?;
    if !pass {
        return Err(Error::Validation(format!(
            "W2 = {w2:e}, d_M = {dm:e} against thresholds {:?} / {:?}",
            th.max_wasserstein, th.max_moment_distance
        )));
    }
    Ok(report)
}

#[derive(Debug, Parser)]
#[command(name = "distctl", version, about = "Steer the output distribution of an ensemble along an optimal-transport path")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory; overrides `output` in the scenario.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for member subsampling.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the ensemble under the scenario's open-loop control.
    Simulate(Common),
    /// Build the optimal-transport moment reference.
    Plan(Common),
    /// Solve the tracking problem.
    Track(Common),
    /// Compare a final ensemble with the target measure.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Trajectory to validate; defaults to `<out>/trajectory.csv`.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Io(_) => EXIT_CONFIG,
        Error::Solver { .. } | Error::Range(_) => EXIT_SOLVER,
        Error::Validation(_) => EXIT_VALIDATION,
    }
}

fn execute(cli: Cli) -> Result<()> {
    let load = |c: &Common| Scenario::load(&c.scenario);
    match cli.command {
        Command::Simulate(c) => {
            let path = cmd_simulate(&load(&c)?, c.out.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Plan(c) => {
            let path = cmd_plan(&load(&c)?, c.out.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Track(c) => {
            let s = cmd_track(&load(&c)?, c.out.as_deref())?;
            println!("{}: cost {:e}, max residual {:e}", s.solver, s.cost, s.max_residual);
        }
        Command::Validate { common, trajectory } => {
            let v = cmd_validate(&load(&common)?, common.out.as_deref(), trajectory.as_deref(), common.seed)?;
            println!("W2 {:e}, d_M {:e}: pass", v.wasserstein, v.moment_distance);
        }
    }
    Ok(())
}

/// Parse `args` and run one command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("distctl: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXACT: &str = r#"
basis = "monomial_param"
q = 8
horizon = 1.0
dt = 1e-3

[model]
kind = "linear"
inputs = 9
members = 400

[initial]
kind = "truncated_gaussian"
mean = 0.5
sd = 0.1414213562373095

[target]
kind = "mixture"
components = [
  { weight = 0.5, mean = 0.25, sd = 0.1414213562373095 },
  { weight = 0.5, mean = 0.75, sd = 0.1414213562373095 },
]

[solver]
kind = "exact"

[validation]
max_residual = 1e-6
"#;

    #[test]
    fn parses_and_round_trips() {
        let s = Scenario::from_toml_str(EXACT).unwrap();
        assert_eq!(s.reference_instants, DEFAULT_REFERENCE_INSTANTS);
        assert_eq!(s.validation.samples, DEFAULT_SAMPLES);
        assert_eq!(s.control, ControlSpec::Zero {});
        let text = s.to_toml_string().unwrap();
        assert_eq!(Scenario::from_toml_str(&text).unwrap(), s);
    }

    #[test]
    fn missing_field_is_named() {
        let text = EXACT.replace("q = 8\n", "");
        let e = Scenario::from_toml_str(&text).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.to_string().contains("`q`"), "{e}");
        assert_eq!(exit_code(&e), EXIT_CONFIG);
    }

    #[test]
    fn unknown_keys_and_ranges_are_rejected() {
        for text in [
            EXACT.replace("dt = 1e-3", "dt = 1e-3\nspeed = 2"),
            EXACT.replace("members = 400", "members = 400\nsize = 3"),
            EXACT.replace("kind = \"exact\"", "kind = \"exact\"\nr = 1.0"),
            EXACT.replace("q = 8", "q = 17"),
            EXACT.replace("dt = 1e-3", "dt = 0.0"),
            EXACT.replace("members = 400", "members = 1"),
            EXACT.replace("kind = \"linear\"", "kind = \"quadratic\""),
        ] {
            assert!(matches!(Scenario::from_toml_str(&text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn point_mass_alias() {
        let text = EXACT.replace(
            "kind = \"mixture\"\ncomponents = [\n  { weight = 0.5, mean = 0.25, sd = 0.1414213562373095 },\n  { weight = 0.5, mean = 0.75, sd = 0.1414213562373095 },\n]",
            "kind = \"point_mass\"\nvalue = 0.3",
        );
        let s = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(s.target, Some(MeasureSpec::Constant { value: 0.3 }));
    }

    #[test]
    fn initial_layouts() {
        let mut s = Scenario::from_toml_str(EXACT).unwrap();
        let x = s.initial_state().unwrap().x;
        let f = truncated_gaussian(0.5, 0.1414213562373095, DENSITY_INTERVALS).unwrap();
        assert!((x[200] - f.eval(s.grid().unwrap().nodes()[200])).abs() < 1e-12);
        s.basis = Basis::MonomialOutput;
        let x = s.initial_state().unwrap().x;
        assert!(x.windows(2).all(|w| w[0] < w[1]));
        assert!((x[199] + x[200] - 1.0).abs() < 1e-9);
        s.basis = Basis::Fourier;
        assert!(s.initial_state().is_err());
        s.initial = MeasureSpec::UniformCircle {};
        let x = s.initial_state().unwrap().x;
        assert!((x[0] - std::f64::consts::PI / 400.0).abs() < 1e-15);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::solver(0.0, "x")), 3);
        assert_eq!(exit_code(&Error::Range("x".into())), 3);
        assert_eq!(exit_code(&Error::Validation("x".into())), 4);
    }

    #[test]
    fn circular_distance_to_point_mass() {
        let mu = EmpiricalMeasure::uniform(vec![0.1, 6.2]).unwrap();
        let d = circular_w2(&mu, 0.0);
        let expected = ((0.01 + (std::f64::consts::TAU - 6.2).powi(2)) / 2.0).sqrt();
        assert!((d - expected).abs() < 1e-14);
    }
}
