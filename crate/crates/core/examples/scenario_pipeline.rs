//! The plan / track / validate pipeline driven by a scenario file, as the command line runs it.

use std::path::Path;

use distctl::cli::{cmd_plan, cmd_track, cmd_validate, Scenario, DEFAULT_SEED};

fn main() -> distctl::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/unlabeled_p8.toml");
    let scenario = Scenario::load(&path)?;
    let out = std::env::temp_dir().join("distctl-pipeline");
    println!("writing into {}", out.display());
    cmd_plan(&scenario, Some(&out))?;
    let summary = cmd_track(&scenario, Some(&out))?;
    println!("{}: cost {:.3e}, max residual {:.3e}", summary.solver, summary.cost, summary.max_residual);
    let v = cmd_validate(&scenario, Some(&out), None, DEFAULT_SEED)?;
    println!("W2 {:.5}, d_M {:.3e}, pass {}", v.wasserstein, v.moment_distance, v.pass);
    Ok(())
}
