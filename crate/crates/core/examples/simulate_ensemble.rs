//! Integrate a linear ensemble and a Kuramoto population under open-loop controls.

use distctl::ensemble::{mean_field, simulate, ControlSignal, EnsembleModel, EnsembleState, ParameterGrid};

fn main() -> distctl::Result<()> {
    // dx/dt = beta x + u_1 + beta u_2 from x = 1
    let grid = ParameterGrid::uniform(11, 0.0, 1.0)?;
    let model = EnsembleModel::linear(2)?;
    let x0 = EnsembleState::new(0.0, vec![1.0; grid.len()]);
    let control = ControlSignal::new(1.0, vec![vec![0.5, 0.0], vec![0.0, -1.0]])?;
    let traj = simulate(&model, &x0, &grid, &control, 1e-3)?;
    println!("linear ensemble, {} samples", traj.len());
    for (b, x) in grid.nodes().iter().zip(traj.final_state()) {
        println!("  beta = {b:.3}  x(1) = {x:.6}");
    }

    // uncontrolled oscillators with spread frequencies drift apart
    let grid = ParameterGrid::uniform(100, -1.0, 1.0)?;
    let model = EnsembleModel::kuramoto(1.0)?;
    let x0 = EnsembleState::new(0.0, vec![0.0; grid.len()]);
    let traj = simulate(&model, &x0, &grid, &ControlSignal::zeros(5.0, 1, 1)?, 0.01)?;
    for t in [0, 100, 300, 500] {
        let (r, psi) = mean_field(&traj.states[t], &grid);
        println!("kuramoto t = {:.1}: r = {r:.4}, psi = {psi:.4}", traj.times[t]);
    }
    Ok(())
}
