//! Run the inequality checks on a builtin problem and print the fitted constants.

use sidelab::verification::{all_pass, load_problem, run_suite, CheckConfig, KernelConfig};

fn main() -> sidelab::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "reference".into());
    let problem = load_problem(&name)?;
    let cfg = CheckConfig::default();
    let kernels = KernelConfig {
        orders: vec![0.5],
        ..KernelConfig::default()
    };
    let reports = run_suite(&problem, &cfg, &kernels)?;
    for r in &reports {
        println!(
            "{:<28} N_hat {:>10.4e}  refined {:>10.4e}  stable {:<5} pass {}",
            r.id, r.n_hat, r.n_hat_refined, r.stable, r.pass
        );
    }
    println!("all pass: {}", all_pass(&reports));
    Ok(())
}
