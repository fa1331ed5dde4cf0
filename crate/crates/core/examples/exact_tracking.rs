//! Minimum-norm feedback on the labeled Gaussian-to-mixture transfer.

use distctl::moment_system::build_linear_moment_system;
use distctl::presets::labeled_transfer;
use distctl::tracking::exact_tracking_with_ensemble;

fn main() -> distctl::Result<()> {
    let q = 8;
    let setup = labeled_transfer(q, 400)?;
    let m0 = setup.initial_moments(q);
    for p in [8, 9] {
        let sys = build_linear_moment_system(q, p)?;
        let r = exact_tracking_with_ensemble(&sys, &setup.reference, &m0, &setup.grid, &setup.x0.x, 1e-3)?;
        println!(
            "p = {p}: max |m - P_q m*| = {:.3e}, max |u| = {:.3e}, pseudo-inverse fallback {}",
            r.max_residual(),
            r.diagnostics.max_control,
            r.diagnostics.pseudo_inverse_fallback
        );
        for w in &r.diagnostics.warnings {
            println!("  warning: {w}");
        }
    }
    Ok(())
}
