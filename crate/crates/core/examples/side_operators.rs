//! Operator evaluation on a random state and the coefficient-extension identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sidelab::operators::{extension_identity_check, OperatorAssembly};
use sidelab::problem::Problem;
use sidelab::FieldSampler;

fn main() -> sidelab::Result<()> {
    let problem = Problem::builtin("reference")?;
    let grid = problem.coefficients.grid(128)?;
    let cs = problem.coefficients.build(&grid)?;

    let report = cs.bound_report()?;
    for item in &report.items {
        println!("{:<24} {:>10.4} <= {:<10.4} {}", item.item, item.value, item.limit, item.ok);
    }

    let asm = OperatorAssembly::new(&cs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = FieldSampler::new(2.0, 30).sample(&grid, cs.system(), &mut rng)?;
    let eval = asm.evaluate(&v, true)?;
    println!("|L v|_-1 = {:.6}", eval.drift.sobolev_norm(-1.0));
    if let Some(n) = &eval.noise {
        println!("|N v|_0  = {:.6}", n.sobolev_norm(0.0));
    }
    for (idx, jump) in asm.kind_one_atoms().into_iter().zip(&eval.jumps) {
        println!("|I v|_0 for {} = {:.6}", asm.atom(idx).label, jump.sobolev_norm(0.0));
    }

    for n in [1, 2] {
        println!("extension identity, n = {n}: residual {:.2e}", extension_identity_check(&cs, &v, n)?);
    }
    Ok(())
}
