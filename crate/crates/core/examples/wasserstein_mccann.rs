//! Wasserstein distances on the line and McCann displacement interpolation.

use distctl::measure::{wasserstein, EmpiricalMeasure};
use distctl::presets::{initial_gaussian, target_mixture};
use distctl::transport::mccann_plan;

fn main() -> distctl::Result<()> {
    let source = initial_gaussian()?;
    let target = target_mixture()?;
    println!("W2(gaussian, mixture) = {:.6}", wasserstein(&source, &target, 2.0));

    let plan = mccann_plan(&source, &target);
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let mu_t = plan.interpolate(t)?;
        println!(
            "t = {t:.2}: W2 to source {:.6}, to target {:.6}",
            wasserstein(&mu_t, &source, 2.0),
            wasserstein(&mu_t, &target, 2.0)
        );
    }

    let a = EmpiricalMeasure::uniform(vec![0.0, 1.0])?;
    let b = EmpiricalMeasure::point_mass(0.5)?;
    println!("W1 = {}, W2 = {}", wasserstein(&a, &b, 1.0), wasserstein(&a, &b, 2.0));
    Ok(())
}
