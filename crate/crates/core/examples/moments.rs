//! Moment sequences, the moment metric, Hausdorff checks and Fourier reconstruction.

use std::f64::consts::PI;

use distctl::measure::EmpiricalMeasure;
use distctl::moment::{hausdorff_check, moment_metric, moments_density, moments_fourier, reconstruct_fourier};
use distctl::presets::{initial_gaussian, target_mixture};

fn main() -> distctl::Result<()> {
    let m0 = moments_density(&initial_gaussian()?, 8);
    let m1 = moments_density(&target_mixture()?, 8);
    println!("gaussian moments {:?}", m0.re().iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>());
    println!("mixture moments  {:?}", m1.re().iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>());
    println!("d_M = {:.6}", moment_metric(&m0, &m1)?);

    println!("(1, 0.9, 0.95) is a moment sequence on [0, 1]: {}", hausdorff_check(&[1.0, 0.9, 0.95], 2).passed);
    println!("gaussian moments pass: {}", hausdorff_check(&m0.re(), 8).passed);

    // phases bunched near pi, seen through ten Fourier moments
    let phases: Vec<f64> = (0..50).map(|j| PI + 0.4 * (j as f64 / 49.0 - 0.5)).collect();
    let m = moments_fourier(&EmpiricalMeasure::uniform(phases)?, 10)?;
    let f = reconstruct_fourier(&m, 720)?;
    println!(
        "reconstruction: mass {:.6}, peak at {:.4}, negative lobes {}",
        f.integral(),
        f.argmax(),
        f.has_negative_lobes
    );
    Ok(())
}
