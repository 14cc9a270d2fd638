//! One trajectory of the viscous Galerkin scheme with its energy ledger, then moment ratios.

use sidelab::problem::Problem;
use sidelab::solver::{Simulation, SolverConfig};

fn main() -> sidelab::Result<()> {
    let problem = Problem::builtin("smooth")?;
    let mut cfg = SolverConfig::new(64, 16, 0.5, 500);
    cfg.order = 2;
    let sim = Simulation::new(&problem, &cfg, None)?;
    println!("stability number {:.3}", sim.stability_number()?);

    let traj = sim.solve_trajectory(1)?;
    for row in traj.ledger.rows.iter().step_by(100) {
        println!(
            "t = {:.3}  |u|_0^2 = {:.6}  dissipation {:.6}  residual {:.2e}",
            row.time, row.norms_sq[0], row.dissipation, row.energy_residual
        );
    }

    let ensemble = sim.ensemble(11, 16)?;
    for m in [1, 2] {
        let r = sim.moment_estimates(&ensemble, m)?;
        println!("moment m = {m}: lhs {:.4e} +- {:.1e}, rhs {:.4e}, ratio {:?}", r.lhs, r.lhs_std_error, r.rhs, r.ratio);
    }
    Ok(())
}
