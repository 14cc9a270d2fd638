//! Singular-integral forms of the fractional derivative against the spectral multiplier.

use sidelab::verification::{check_kernel_identities, kernel_mass_slope, KernelConfig};

fn main() -> sidelab::Result<()> {
    let cfg = KernelConfig::default();
    for &kappa in &cfg.orders {
        let r = check_kernel_identities(kappa, &cfg)?;
        println!("kappa {kappa}: pass {}", r.pass);
        for (k, v) in &r.details {
            println!("  {k:<22} {v:.3e}");
        }
        println!("  mass slope {:.6}", kernel_mass_slope(kappa)?);
    }
    Ok(())
}
