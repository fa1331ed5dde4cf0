//! Direct shooting that synchronizes Kuramoto oscillators at phase pi.
//!
//! Pass an iteration count as the first argument (default 40).

use distctl::ensemble::mean_field;
use distctl::moment::Basis;
use distctl::presets::synchronization;
use distctl::tracking::{direct_shooting, ShootingOptions};

fn main() -> distctl::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(40);
    let sync = synchronization(200, 10, 1.0)?;
    let options = ShootingOptions {
        iterations,
        ..ShootingOptions::default()
    };
    let r = direct_shooting(&sync.model, &sync.grid, &sync.x0, Basis::Fourier, 10, &sync.reference, &options, None)?;
    let (r0, _) = mean_field(&sync.x0.x, &sync.grid);
    let traj = r.ensemble.as_ref().expect("shooting simulates the ensemble");
    let (r1, psi) = mean_field(traj.final_state(), &sync.grid);
    println!("order parameter {r0:.4} -> {r1:.4}, mean phase {psi:.4}");
    println!("cost {:.5} after {} iterations", r.cost, r.diagnostics.iterations.unwrap_or(0));
    Ok(())
}
