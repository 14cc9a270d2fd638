use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sidelab::cli::{parse_config, Command};
use sidelab::operators::{CoefficientSet, OperatorAssembly};
use sidelab::problem::Problem;
use sidelab::{FieldSampler, SpectralField, TorusGrid};

fn grid_1d() -> Arc<TorusGrid> {
    TorusGrid::new(1, 64, 2.5).unwrap()
}

fn field(grid: &Arc<TorusGrid>, seed: u64, decay: f64, k_max: usize, channels: usize) -> SpectralField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FieldSampler::new(decay, k_max).sample(grid, channels, &mut rng).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn combine(a: f64, u: &SpectralField, b: f64, v: &SpectralField) -> SpectralField {
    &(u * a) + &(v * b)
}

fn reference_set() -> CoefficientSet {
    let p = Problem::builtin("reference").unwrap();
    let g = p.coefficients.grid(128).unwrap();
    p.coefficients.build(&g).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lambda_group_law(seed in any::<u64>(), decay in 0.5f64..3.0, a in -4.0f64..4.0, b in -4.0f64..4.0) {
        let g = grid_1d();
        let v = field(&g, seed, decay, 30, 1);
        let two = v.apply_lambda(a).unwrap().apply_lambda(b).unwrap();
        let one = v.apply_lambda(a + b).unwrap();
        prop_assert!(two.max_rel_diff(&one) <= 1e-12);
    }

    #[test]
    fn lambda_is_self_adjoint(seed in any::<u64>(), a in -4.0f64..4.0) {
        let g = grid_1d();
        let u = field(&g, seed, 1.5, 30, 2);
        let v = field(&g, seed ^ 0xabcd, 1.0, 30, 2);
        let left = u.apply_lambda(a).unwrap().sobolev_inner(&v, 0.0).unwrap();
        let right = u.sobolev_inner(&v.apply_lambda(a).unwrap(), 0.0).unwrap();
        let scale = u.apply_lambda(a).unwrap().sobolev_norm(0.0) * v.sobolev_norm(0.0)
            + u.sobolev_norm(0.0) * v.apply_lambda(a).unwrap().sobolev_norm(0.0);
        prop_assert!((left - right).abs() <= 1e-10 * scale);
    }

    #[test]
    fn duality_pairing(seed in any::<u64>(), mu in 0.0f64..3.0) {
        let g = grid_1d();
        let u = field(&g, seed, 2.0, 30, 1);
        let v = field(&g, seed.wrapping_add(1), 2.0, 30, 1);
        let paired = u.apply_lambda(mu).unwrap().sobolev_inner(&v.apply_lambda(-mu).unwrap(), 0.0).unwrap();
        let plain = u.sobolev_inner(&v, 0.0).unwrap();
        prop_assert!((paired - plain).abs() <= 1e-10 * u.sobolev_norm(0.0) * v.sobolev_norm(0.0));
    }

    #[test]
    fn parseval(seed in any::<u64>(), decay in 0.0f64..3.0, k_max in 1usize..31) {
        let g = grid_1d();
        let v = field(&g, seed, decay, k_max, 1);
        let phys = v.to_physical();
        let quad: f64 = phys.iter().map(|x| x * x).sum::<f64>() * g.cell_volume();
        prop_assert!(rel(v.sobolev_norm_sq(0.0), quad) <= 1e-10);
    }

    #[test]
    fn log_convexity(seed in any::<u64>(), lo in -2.0f64..2.0, gap in 0.1f64..4.0, theta in 0.0f64..1.0) {
        let g = grid_1d();
        let v = field(&g, seed, 1.0, 30, 1);
        let hi = lo + gap;
        let mid = (1.0 - theta) * lo + theta * hi;
        let bound = v.sobolev_norm(lo).powf(1.0 - theta) * v.sobolev_norm(hi).powf(theta);
        prop_assert!(v.sobolev_norm(mid) <= bound * (1.0 + 1e-10));
    }

    #[test]
    fn physical_round_trip(seed in any::<u64>()) {
        let g = TorusGrid::new(2, 16, 1.0).unwrap();
        let v = field(&g, seed, 1.5, 7, 2);
        let back = SpectralField::from_physical(&g, 2, &v.to_physical()).unwrap();
        prop_assert!(back.max_rel_diff(&v) <= 1e-12);
        prop_assert!(v.hermitian_defect() <= 1e-10);
    }

    #[test]
    fn fractional_derivative_composes(seed in any::<u64>(), a in 0.05f64..0.95, b in 0.05f64..0.95) {
        let g = grid_1d();
        let v = field(&g, seed, 1.5, 30, 1);
        let two = v.fractional_derivative(a).unwrap().fractional_derivative(b).unwrap();
        // |xi|^a |xi|^b = |xi|^{a+b}, compared through the second-order multiplier
        let one = v.fractional_derivative((a + b) / 2.0).unwrap().fractional_derivative((a + b) / 2.0).unwrap();
        prop_assert!(two.max_rel_diff(&one) <= 1e-12);
    }

    #[test]
    fn config_round_trip(
        seed in 0u64..(i64::MAX as u64),
        command in prop::sample::select(vec![Command::Simulate, Command::Converge, Command::Verify, Command::Kernels]),
        members in 1usize..500,
        horizon in 0.01f64..10.0,
        steps in 1usize..5000,
        first in 1usize..16,
        tol in 0.01f64..1.0,
    ) {
        let text = format!(
            "command = \"{}\"\nseed = {seed}\n[problem]\nbuiltin = \"zero\"\n[solver]\npoints = 16\nhorizon = {horizon:?}\nsteps = {steps}\n[ensemble]\nmembers = {members}\n[converge]\nviscosities = [{first}, {}]\nslope_tolerance = {tol:?}\n[verify]\npoints = 16\n",
            command.name(),
            first * 2,
        );
        let cfg = parse_config(&text).unwrap();
        let again = parse_config(&cfg.to_canonical().unwrap()).unwrap();
        prop_assert_eq!(&cfg, &again);
        prop_assert_eq!(cfg.config_hash().unwrap(), again.config_hash().unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn operators_are_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let cs = reference_set();
        let asm = OperatorAssembly::new(&cs).unwrap();
        let g = cs.grid().clone();
        let u = field(&g, seed, 1.5, 40, 1);
        let v = field(&g, seed ^ 7, 1.0, 40, 1);
        let combo = combine(a, &u, b, &v);
        let l = asm.apply_l(&combo, None).unwrap();
        let l_parts = combine(a, &asm.apply_l(&u, None).unwrap(), b, &asm.apply_l(&v, None).unwrap());
        prop_assert!(l.max_rel_diff(&l_parts) <= 1e-10);
        let n = asm.apply_n(&combo).unwrap();
        let n_parts = combine(a, &asm.apply_n(&u).unwrap(), b, &asm.apply_n(&v).unwrap());
        prop_assert!(n.max_rel_diff(&n_parts) <= 1e-10);
        for idx in asm.kind_one_atoms() {
            let i = asm.apply_i(&combo, idx).unwrap();
            let i_parts = combine(a, &asm.apply_i(&u, idx).unwrap(), b, &asm.apply_i(&v, idx).unwrap());
            prop_assert!(i.max_rel_diff(&i_parts) <= 1e-10);
        }
    }
}
