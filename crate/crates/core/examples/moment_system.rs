//! The truncated linear moment system and its agreement with the simulated ensemble.

use distctl::ensemble::{ControlSignal, EnsembleModel, EnsembleState, ParameterGrid};
use distctl::moment::Basis;
use distctl::moment_system::{build_linear_moment_system, verify_moment_consistency};

fn main() -> distctl::Result<()> {
    for (q, p) in [(8, 8), (8, 9), (8, 4)] {
        let sys = build_linear_moment_system(q, p)?;
        println!(
            "q = {q}, p = {p}: rank {} of {}, gram condition {:.3e}",
            sys.rank(),
            sys.dim(),
            sys.gram_condition()
        );
    }

    let grid = ParameterGrid::uniform(400, 0.0, 1.0)?;
    let model = EnsembleModel::linear(2)?;
    let x0 = EnsembleState::new(0.0, grid.nodes().iter().map(|b| 1.0 + b).collect());
    let control = ControlSignal::new(1.0, vec![vec![1.0, -0.5], vec![0.0, 2.0], vec![-1.0, 0.0], vec![0.5, 0.5]])?;
    let gap = verify_moment_consistency(&model, &grid, &x0, &control, Basis::MonomialParam, 6, 1e-3)?;
    println!("ensemble moments vs moment system, q = 6: max d_M = {gap:.3e}");
    Ok(())
}
