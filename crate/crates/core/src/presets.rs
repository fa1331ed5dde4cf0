//! Ready-made transfer problems used by the examples, the acceptance suite and the CLI defaults.

use std::f64::consts::{PI, TAU};

use crate::ensemble::{EnsembleModel, EnsembleState, ParameterGrid};
use crate::error::Result;
use crate::measure::{gaussian_mixture, truncated_gaussian, EmpiricalMeasure, GridDensity, Measure1d, MixtureComponent};
use crate::moment::Basis;
use crate::transport::{
    circular_plan, mccann_plan, ot_moment_reference, uniform_times, DisplacementPlan, MomentReference,
    DEFAULT_REFERENCE_INSTANTS,
};

/// Standard deviation shared by the initial Gaussian and both mixture components.
pub fn gaussian_sd() -> f64 {
    1.0 / 50f64.sqrt()
}

/// Intervals of the density grids behind the Gaussian measures.
pub const DENSITY_INTERVALS: usize = 4096;

/// Truncated Gaussian on `[0, 1]` centred at 0.5.
pub fn initial_gaussian() -> Result<GridDensity> {
    truncated_gaussian(0.5, gaussian_sd(), DENSITY_INTERVALS)
}

/// Equal-weight mixture of truncated Gaussians centred at 0.25 and 0.75.
pub fn target_mixture() -> Result<GridDensity> {
    gaussian_mixture(&mixture_components(), DENSITY_INTERVALS)
}

pub fn mixture_components() -> [MixtureComponent; 2] {
    [
        MixtureComponent {
            weight: 0.5,
            mean: 0.25,
            sd: gaussian_sd(),
        },
        MixtureComponent {
            weight: 0.5,
            mean: 0.75,
            sd: gaussian_sd(),
        },
    ]
}

/// Labeled transfer: the state `x(beta)` is a density on `Omega = [0, 1]`, moved from
/// [`initial_gaussian`] to [`target_mixture`].
#[derive(Debug, Clone)]
pub struct LabeledTransfer {
    pub grid: ParameterGrid,
    pub x0: EnsembleState,
    pub source: GridDensity,
    pub target: GridDensity,
    pub plan: DisplacementPlan,
    pub reference: MomentReference,
}

impl LabeledTransfer {
    /// `P_q m*(0)`.
    pub fn initial_moments(&self, q: usize) -> Vec<f64> {
        self.reference.m_star[0].values[..=q].iter().map(|c| c.re).collect()
    }
}

pub fn labeled_transfer(q: usize, members: usize) -> Result<LabeledTransfer> {
    let source = initial_gaussian()?;
    let target = target_mixture()?;
    let grid = ParameterGrid::uniform(members, 0.0, 1.0)?;
    let x0 = EnsembleState::new(0.0, grid.nodes().iter().map(|&b| source.eval(b)).collect());
    let plan = mccann_plan(&source, &target);
    let reference = ot_moment_reference(
        &plan,
        Basis::MonomialParam,
        q,
        &uniform_times(DEFAULT_REFERENCE_INSTANTS, 1.0),
    )?;
    Ok(LabeledTransfer {
        grid,
        x0,
        source,
        target,
        plan,
        reference,
    })
}

/// Unlabeled transfer: member `j` starts at the `beta_j` quantile of [`initial_gaussian`], so the
/// output measure of the uniform parameter measure is the Gaussian itself.
#[derive(Debug, Clone)]
pub struct UnlabeledTransfer {
    pub grid: ParameterGrid,
    pub x0: EnsembleState,
    pub target: GridDensity,
    pub plan: DisplacementPlan,
    pub reference: MomentReference,
}

pub fn unlabeled_transfer(q: usize, members: usize) -> Result<UnlabeledTransfer> {
    let source = initial_gaussian()?;
    let target = target_mixture()?;
    let grid = ParameterGrid::uniform(members, 0.0, 1.0)?;
    let table = source.cdf();
    let x0: Vec<f64> = grid.nodes().iter().map(|&b| table.quantile(b)).collect();
    let start = EmpiricalMeasure::new(x0.clone(), grid.weights().to_vec())?;
    let plan = mccann_plan(&start, &target);
    let reference = ot_moment_reference(
        &plan,
        Basis::MonomialOutput,
        q,
        &uniform_times(DEFAULT_REFERENCE_INSTANTS, 1.0),
    )?;
    Ok(UnlabeledTransfer {
        grid,
        x0: EnsembleState::new(0.0, x0),
        target,
        plan,
        reference,
    })
}

/// Oscillators with frequencies spread uniformly over `[-1, 1]`, phases spread uniformly over the
/// circle, to be synchronized at `target` (radians).
#[derive(Debug, Clone)]
pub struct Synchronization {
    pub model: EnsembleModel,
    pub grid: ParameterGrid,
    pub x0: EnsembleState,
    pub target: f64,
    pub plan: DisplacementPlan,
    pub reference: MomentReference,
}

pub fn synchronization(members: usize, q: usize, coupling: f64) -> Result<Synchronization> {
    synchronization_at(members, q, coupling, PI)
}

pub fn synchronization_at(members: usize, q: usize, coupling: f64, target: f64) -> Result<Synchronization> {
    let grid = ParameterGrid::uniform(members, -1.0, 1.0)?;
    let theta: Vec<f64> = (0..members)
        .map(|j| TAU * (j as f64 + 0.5) / members as f64)
        .collect();
    let start = EmpiricalMeasure::new(theta.clone(), grid.weights().to_vec())?;
    let plan = circular_plan(&start, target)?;
    let reference = ot_moment_reference(&plan, Basis::Fourier, q, &uniform_times(DEFAULT_REFERENCE_INSTANTS, 1.0))?;
    Ok(Synchronization {
        model: EnsembleModel::kuramoto(coupling)?,
        grid,
        x0: EnsembleState::new(0.0, theta),
        target,
        plan,
        reference,
    })
}
