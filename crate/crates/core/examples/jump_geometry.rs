//! Diffeomorphism diagnostics and regularity bounds for the atoms of a builtin problem.

use sidelab::jump::kernel_mass_1d;
use sidelab::problem::Problem;

fn main() -> sidelab::Result<()> {
    let problem = Problem::builtin("reference")?;
    let grid = problem.coefficients.grid(128)?;
    let cs = problem.coefficients.build(&grid)?;
    let beta = problem.coefficients.regularity.beta;

    for (atom, report) in cs.jumps.atoms.iter().zip(cs.jumps.hadamard_reports(1e-3)) {
        let b = atom.bounds(beta);
        println!(
            "{} (kind {}, weight {}): inversion residual {:.1e}, det range [{:.4}, {:.4}], passed {}",
            atom.label,
            atom.kind,
            atom.weight,
            report.max_inversion_residual,
            report.det_inverse_min,
            report.det_inverse_max,
            report.passed
        );
        println!(
            "  K {:.4}  Kbar {:.4}  l {:.4}  budget {:.4}  second-order det ratio {:.3}",
            b.k_sup,
            b.k_grad,
            b.l_sup,
            b.budget(beta),
            atom.det_identity_residual()?
        );
    }
    println!("catalog budget {:.4}", cs.jumps.budget());

    for y in [0.5, 1.0, 2.0] {
        println!("kernel mass at y = {y}, kappa 0.5: {:.6}", kernel_mass_1d(y, 0.5)?);
    }
    Ok(())
}
