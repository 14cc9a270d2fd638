//! Cauchy study across viscosity indices: the mean-square gap should shrink like 1/n.

use sidelab::problem::Problem;
use sidelab::solver::{Simulation, SolverConfig};

fn main() -> sidelab::Result<()> {
    let problem = Problem::builtin("reference")?;
    let sim = Simulation::new(&problem, &SolverConfig::new(128, 8, 0.5, 500), None)?;
    let table = sim.cauchy_study(&[8, 16, 32, 64], 8, 7)?;
    for r in table.rows.iter().filter(|r| r.consecutive) {
        println!("n = {:>3}, m = {:>3}: sup E|u_n - u_m|^2 = {:.3e} (stderr {:.1e})", r.n, r.m, r.sup_mean_sq_diff, r.std_error);
    }
    println!("fitted slope {:?}", table.slope);
    Ok(())
}
