//! Sample a Wiener plus compensated Poisson path, coarsen it and dump it as CSV.

use sidelab::noise::{Clock, ClockKind, NoisePath};

fn main() -> sidelab::Result<()> {
    let clock = Clock::new(1.0, 1000, ClockKind::Saturating)?;
    let path = NoisePath::sample_with_weights(&clock, &[4.0, 0.5], 2, 2024)?;

    for atom in 0..path.atoms() {
        println!("atom {atom}: {} jumps", path.total_count(atom));
    }
    let w_end: Vec<f64> = (0..path.steps()).fold(vec![0.0; path.drivers()], |mut acc, k| {
        for (a, dw) in acc.iter_mut().zip(path.wiener(k)) {
            *a += dw;
        }
        acc
    });
    println!("W_T = {w_end:?}, V_T = {}", clock.bound());

    let coarse = path.coarsen(10)?;
    println!("coarsened to {} steps, atom 0 still has {} jumps", coarse.steps(), coarse.total_count(0));

    let mut out = Vec::new();
    coarse.write_csv(&mut out).expect("write to memory");
    for line in String::from_utf8_lossy(&out).lines().take(5) {
        println!("{line}");
    }
    Ok(())
}
