//! Bessel-potential norms of a random field and the interpolation bound between them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sidelab::{FieldSampler, TorusGrid};

fn main() -> sidelab::Result<()> {
    let grid = TorusGrid::new(1, 128, 4.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = FieldSampler::new(1.5, 40).sample(&grid, 1, &mut rng)?;

    for alpha in [-1.0, 0.0, 0.5, 1.0, 2.0] {
        println!("|v|_{alpha:<4} = {:.6}", v.sobolev_norm(alpha));
    }

    let (lo, hi, theta) = (0.0, 2.0, 0.25);
    let mid = v.sobolev_norm((1.0 - theta) * lo + theta * hi);
    let bound = v.sobolev_norm(lo).powf(1.0 - theta) * v.sobolev_norm(hi).powf(theta);
    println!("interpolation: {mid:.6} <= {bound:.6}");

    let back = v.apply_lambda(1.3)?.apply_lambda(-1.3)?;
    println!("Lambda^1.3 then Lambda^-1.3, max rel diff {:.2e}", back.max_rel_diff(&v));

    let d = v.fractional_derivative(0.5)?;
    println!("|d^0.5 v|_0 = {:.6}", d.sobolev_norm(0.0));
    Ok(())
}
