//! Output measures as pushforwards, with the two closed-form cases.

use distctl::ensemble::ParameterGrid;
use distctl::measure::{free_linear_cdf, free_linear_pde_residual, pushforward, Measure1d};

fn main() -> distctl::Result<()> {
    // indicator output of x_t(beta) = e^{t beta}(beta - a): a Bernoulli measure with mu({0}) = a
    let (a, n) = (0.3, 1000);
    let grid = ParameterGrid::uniform(n, 0.0, 1.0)?;
    let y: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|b| if (0.8 * b).exp() * (b - a) >= 0.0 { 1.0 } else { 0.0 })
        .collect();
    let table = pushforward(&grid, &y)?.cdf();
    println!("mu({{0}}) = {} (a = {a}, n = {n})", table.values()[0]);

    // free ensemble dx/dt = beta x from the point mass at a: F_t(y) = log(y/a)/t
    let a = 1.0;
    let grid = ParameterGrid::uniform(2000, 0.0, 1.0)?;
    let t: f64 = 0.7;
    let y: Vec<f64> = grid.nodes().iter().map(|b| a * (b * t).exp()).collect();
    let table = pushforward(&grid, &y)?.cdf();
    for probe in [1.1, 1.5, 1.9] {
        println!("F_{t}({probe}) = {:.5}, closed form {:.5}", table.at(probe), free_linear_cdf(a, t, probe));
    }
    println!("PDE residual at t = {t}: {:.2e}", free_linear_pde_residual(a, t, 1e-4));
    Ok(())
}
