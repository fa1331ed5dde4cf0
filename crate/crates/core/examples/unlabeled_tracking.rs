//! Output-moment feedback moving unlabeled members from the Gaussian to the mixture.

use distctl::measure::{sample_members, wasserstein};
use distctl::presets::unlabeled_transfer;
use distctl::tracking::output_tracking_feedback;

fn main() -> distctl::Result<()> {
    let q = 8;
    let setup = unlabeled_transfer(q, 1000)?;
    let r = output_tracking_feedback(&setup.grid, &setup.x0, 8, &setup.reference, q, 1e-3)?;
    let last = r.ensemble.as_ref().expect("output feedback simulates the ensemble").final_state();
    let sample = sample_members(last, 1000, 42)?;
    println!("max moment error {:.3e}", r.max_residual());
    println!("W2(final, target) = {:.5}", wasserstein(&sample, &setup.target, 2.0));
    println!("W2(start, target) = {:.5}", wasserstein(&sample_members(&setup.x0.x, 1000, 42)?, &setup.target, 2.0));
    Ok(())
}
