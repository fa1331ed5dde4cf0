//! Fixed-endpoint LQ tracking with four inputs, and its first-order optimality check.

use distctl::moment_system::build_linear_moment_system;
use distctl::presets::labeled_transfer;
use distctl::tracking::{first_order_check, lq_tracking_tpbvp, LqSetup};

fn main() -> distctl::Result<()> {
    let q = 8;
    let setup = labeled_transfer(q, 400)?;
    let sys = build_linear_moment_system(q, 4)?;
    let weight = LqSetup::identity(4)?;
    let r = lq_tracking_tpbvp(&sys, &setup.reference, &weight, 1e-3)?;
    let d = &r.diagnostics;
    println!("cost {:.6e}", r.cost);
    println!("boundary residuals {:?}", d.boundary_residuals.unwrap());
    println!("hamiltonian defect {:.3e}", d.hamiltonian_defect.unwrap());
    println!("matching condition {:.3e}", d.matching_condition.unwrap());
    let check = first_order_check(&sys, &r, &weight, 10, 7)?;
    println!("directional derivative ratios: worst {:.3e}", check.worst);
    Ok(())
}
